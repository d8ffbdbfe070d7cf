"""Pipeline assembly and the benchmark runner: sample, run stages, report.

The whole run is deterministic under stub providers: worker count changes wall
time only, and every emitted byte is a function of (config, dataset, seed).
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .config import RunConfig
from .data_model import (QARecord, SamplingPlan, load_corpus, load_records,
                         sample_records, save_records)
from .evaluators import (COGL_METRICS, CogLScore, aggregate_cogl, cogl_evaluate,
                         cong_evaluate, conr_evaluate)
from .generation import (SynthesisMode, TemplateSet, load_templates, synthesize,
                         two_step_answer)
from .indexing import (ChunkingConfig, IndexBundle, build_bm25_index,
                       build_vector_index, load_index, save_index,
                       split_into_chunks, split_into_sentence_windows)
from .postprocess import PostprocessConfig, filter_candidates, rerank, substitute_windows
from .providers import (EndpointConfig, ExchangeLedger, HttpChatProvider,
                        HttpRerankProvider, NoLogprobProvider, ResponseCache,
                        StubChatProvider, StubEmbeddingProvider, StubLogprobProvider,
                        StubRerankProvider, HttpEmbeddingProvider)
from .reporting import ReportTable, fmt_pm, mean_std
from .retrieval import (QueryBundle, RankedEntry, RankedList, bm25_retrieve,
                        decompose_query, dense_retrieve, hyde_transform,
                        rewrite_query, rrf_fuse, sentence_window_retrieve,
                        stepback_transform)
from .textproc import split_sentences

CONR_REPORT_COLUMNS = ("F1", "MRR", "Hit@1", "Hit@10", "MAP", "NDCG", "DCG", "IDCG")
CONG_REPORT_COLUMNS = ("ChrF", "ChrF++", "METEOR", "R1", "R2", "RL", "PPL", "CER", "WER")

_CONR_FIELDS = {"F1": "f1", "MRR": "mrr", "Hit@1": "hit_at_1", "Hit@10": "hit_at_10",
                "MAP": "map", "NDCG": "ndcg", "DCG": "dcg", "IDCG": "idcg"}
_CONG_FIELDS = {"ChrF": "chrf", "ChrF++": "chrf_pp", "METEOR": "meteor", "R1": "rouge1",
                "R2": "rouge2", "RL": "rougel", "PPL": "ppl", "CER": "cer", "WER": "wer"}
# Metrics reported x100; the unbounded ones stay on their natural scale.
_PERCENT_SCALE = {"F1", "MRR", "Hit@1", "Hit@10", "MAP", "NDCG",
                  "ChrF", "ChrF++", "METEOR", "R1", "R2", "RL"}


class RunError(RuntimeError):
    """A pipeline stage precondition failed; carries record and stage names."""

    def __init__(self, stage: str, record_id: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed for record {record_id!r}: {cause}")
        self.stage = stage
        self.record_id = record_id


# ---------------------------------------------------------------------------
# Deterministic stub behavior


def _extract_question(prompt: str) -> str:
    lines = prompt.splitlines()
    for i in range(len(lines) - 1, -1, -1):
        line = lines[i].strip()
        lowered = line.lower()
        if "question:" in lowered:
            tail = line[lowered.index("question:") + len("question:"):].strip()
            if tail:
                return tail
            for follow in lines[i + 1:]:
                if follow.strip():
                    return follow.strip()
    for line in reversed(lines):
        if line.strip() and not line.strip().startswith("-"):
            return line.strip()
    return "OK"


def _context_block(prompt: str) -> str:
    parts = prompt.split("---------------------")
    if len(parts) >= 3:
        return parts[1].strip()
    return ""


def stub_chat_reply(messages: list[dict]) -> str:
    """Pure reply function for offline runs.

    Answers the answerability gate positively, echoes questions for transform
    prompts, and answers QA prompts with the context sentence sharing the most
    words with the question.
    """
    text = messages[-1]["content"]
    question = _extract_question(text)
    if "ANSWERABLE" in text and "INSUFFICIENT" in text:
        return "ANSWERABLE"
    if "numbered list" in text:
        return f"1. {question}\n2. What else is known about this?"
    if "Output only the passage" in text:
        return f"{question} It is described in reference works."
    if "Output only the rewritten question" in text:
        return question
    context = _context_block(text)
    if context:
        sentences = split_sentences(context)
        q_terms = set(question.lower().split())
        best, best_overlap = "OK", -1
        for sent in sentences:
            overlap = len(q_terms & set(sent.lower().split()))
            if overlap > best_overlap:
                best, best_overlap = sent, overlap
        return best
    return "OK"


def stub_judge_reply(messages: list[dict]) -> str:
    """Deterministic pseudo-judge: a stable hash of the prompt mapped to [0,1]."""
    digest = hashlib.blake2b(messages[-1]["content"].encode("utf-8"),
                             digest_size=4).digest()
    value = int.from_bytes(digest, "little") % 101 / 100.0
    return f"SCORE: {value:.2f}"


# ---------------------------------------------------------------------------
# Pipeline assembly


@dataclass
class ProviderSet:
    chat: object
    embedder: object
    reranker: object
    logprobs: object
    judge: object
    ledger: ExchangeLedger


def make_providers(cfg: RunConfig) -> ProviderSet:
    ledger = ExchangeLedger()
    if cfg.provider == "stub":
        return ProviderSet(
            chat=StubChatProvider(reply=stub_chat_reply, ledger=ledger),
            embedder=StubEmbeddingProvider(dim=cfg.embed_dim, seed=cfg.seed),
            reranker=StubRerankProvider(),
            logprobs=StubLogprobProvider(),
            judge=StubChatProvider(reply=stub_judge_reply, ledger=ledger),
            ledger=ledger,
        )
    endpoint = EndpointConfig(base_url=cfg.openai_base, api_key_env=cfg.openai_key_env,
                              model=cfg.model, cache_enabled=cfg.cache)
    judge_endpoint = EndpointConfig(base_url=cfg.openai_base,
                                    api_key_env=cfg.openai_key_env,
                                    model=cfg.judge_model or cfg.model,
                                    cache_enabled=cfg.cache)
    cache = ResponseCache(cfg.cache_path or None) if cfg.cache else None
    return ProviderSet(
        chat=HttpChatProvider(endpoint, ledger=ledger, cache=cache),
        embedder=HttpEmbeddingProvider(endpoint, ledger=ledger),
        reranker=HttpRerankProvider(endpoint, ledger=ledger),
        logprobs=NoLogprobProvider(),
        judge=HttpChatProvider(judge_endpoint, ledger=ledger, cache=cache),
        ledger=ledger,
    )


def build_indexes(cfg: RunConfig, corpus) -> IndexBundle:
    chunk_cfg = ChunkingConfig(chunk_size=cfg.chunk_size, chunk_overlap=cfg.overlap,
                               sentence_window=cfg.sentence_window)
    chunks = []
    if cfg.index == "sentence_window":
        for doc in corpus:
            chunks.extend(split_into_sentence_windows(doc, chunk_cfg))
    else:
        for doc in corpus:
            chunks.extend(split_into_chunks(doc, chunk_cfg))
    embedder = (StubEmbeddingProvider(dim=cfg.embed_dim, seed=cfg.seed)
                if cfg.provider == "stub"
                else HttpEmbeddingProvider(EndpointConfig(
                    base_url=cfg.openai_base, api_key_env=cfg.openai_key_env,
                    model=cfg.model)))
    bm25 = build_bm25_index(chunks) if cfg.index in ("bm25", "both") else None
    vectors = (build_vector_index(chunks, embedder)
               if cfg.index in ("vector", "both", "sentence_window") else None)
    return IndexBundle(chunks=chunks, bm25=bm25, vectors=vectors)


def load_or_build_indexes(cfg: RunConfig, corpus) -> IndexBundle:
    if cfg.index_dir and os.path.exists(os.path.join(cfg.index_dir, "manifest.json")):
        return load_index(cfg.index_dir)
    bundle = build_indexes(cfg, corpus)
    if cfg.index_dir:
        save_index(cfg.index_dir, bundle)
    return bundle


def _transform_query(cfg: RunConfig, query: str, providers: ProviderSet,
                     templates: TemplateSet) -> QueryBundle:
    if cfg.transform == "hyde":
        return hyde_transform(query, providers.chat, templates)
    if cfg.transform == "stepback":
        return stepback_transform(query, providers.chat, templates)
    if cfg.transform == "rewrite":
        return rewrite_query(query, providers.chat, templates)
    if cfg.transform == "decompose":
        return decompose_query(query, providers.chat, templates)
    return QueryBundle(original_query=query, effective_query=query)


def _retrieve_one(cfg: RunConfig, bundle: IndexBundle, chunk_map, query: str,
                  providers: ProviderSet, k: int) -> RankedList:
    if cfg.index == "bm25":
        return bm25_retrieve(bundle.bm25, query, k, chunk_map)
    query_vec = providers.embedder.embed([query])[0]
    if cfg.index == "vector":
        return dense_retrieve(bundle.vectors, query_vec, k, chunk_map)
    if cfg.index == "sentence_window":
        return sentence_window_retrieve(bundle.vectors, query_vec, k, chunk_map)
    dense = dense_retrieve(bundle.vectors, query_vec, k, chunk_map)
    lexical = bm25_retrieve(bundle.bm25, query, k, chunk_map)
    return rrf_fuse([dense, lexical], k=k)


def retrieve_for_record(cfg: RunConfig, bundle: IndexBundle, chunk_map,
                        qb: QueryBundle, providers: ProviderSet) -> RankedList:
    fetch_k = max(cfg.top_k, cfg.rerank_top_n)
    queries = qb.sub_queries if qb.sub_queries else [qb.effective_query]
    ranked_lists = [_retrieve_one(cfg, bundle, chunk_map, q, providers, fetch_k)
                    for q in queries]
    if len(ranked_lists) == 1:
        ranked = ranked_lists[0]
    else:
        ranked = rrf_fuse(ranked_lists, k=fetch_k)
    if cfg.rerank and ranked.entries:
        ranked = rerank(ranked, providers.reranker, cfg.rerank_top_n,
                        query=qb.original_query)
    ranked = filter_candidates(ranked, PostprocessConfig(
        rerank_enabled=cfg.rerank, rerank_top_n=cfg.rerank_top_n,
        score_threshold=cfg.score_threshold))
    if cfg.index == "sentence_window":
        ranked = substitute_windows(ranked)
    if len(ranked.entries) > cfg.top_k:
        ranked = RankedList(entries=list(ranked.entries[: cfg.top_k]),
                            origin=ranked.origin, fallback=ranked.fallback)
    return ranked


def _fill_record(rec: QARecord, ranked: RankedList) -> QARecord:
    """Write the retrieval outputs, one entry per distinct document, best rank first."""
    filled = rec.copy()
    seen: set[str] = set()
    ids, texts = [], []
    for entry in ranked.entries:
        if entry.node.doc_id in seen:
            continue
        seen.add(entry.node.doc_id)
        ids.append(entry.node.doc_id)
        texts.append(entry.node.text)
    filled.retrieval_context_ids = ids
    filled.retrieval_context = texts
    return filled


@dataclass
class RecordRun:
    record: QARecord
    cogl: dict[str, CogLScore] = field(default_factory=dict)


def process_record(cfg: RunConfig, bundle: IndexBundle, chunk_map, rec: QARecord,
                   providers: ProviderSet, templates: TemplateSet,
                   cogl_metrics: list[str]) -> RecordRun:
    try:
        qb = _transform_query(cfg, rec.user_query, providers, templates)
    except Exception as exc:
        raise RunError("transform", rec.record_id, exc) from exc
    try:
        ranked = retrieve_for_record(cfg, bundle, chunk_map, qb, providers)
    except Exception as exc:
        raise RunError("retrieve", rec.record_id, exc) from exc
    filled = _fill_record(rec, ranked)

    if not cfg.retrieval_only and filled.retrieval_context:
        try:
            if cfg.two_step:
                result = two_step_answer(rec.user_query, filled.retrieval_context,
                                         providers.chat, templates,
                                         brief=cfg.brief_answer, max_tokens=cfg.tokens,
                                         context_window=cfg.context_length)
            else:
                result = synthesize(SynthesisMode(cfg.synthesis), rec.user_query,
                                    filled.retrieval_context, providers.chat, templates,
                                    brief=cfg.brief_answer, few_shot=cfg.few_shot,
                                    max_tokens=cfg.tokens,
                                    context_window=cfg.context_length)
        except Exception as exc:
            raise RunError("generate", rec.record_id, exc) from exc
        filled.actual_response = result.answer

    run = RecordRun(record=filled)
    if cfg.cogl and not cfg.retrieval_only:
        for metric in cogl_metrics:
            try:
                run.cogl[metric] = cogl_evaluate(metric, filled, providers.judge,
                                                 templates.judge_templates,
                                                 context_window=cfg.context_length)
            except ValueError:
                # Signature needs a field this record does not carry; skip honestly.
                continue
    return run


# ---------------------------------------------------------------------------
# Report


@dataclass
class MetricReport:
    config_hash: str
    template_version: str
    timestamp: str
    seed: int
    settings: dict
    rows: list[dict]
    aggregates: dict
    gates: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "template_version": self.template_version,
            "timestamp": self.timestamp,
            "seed": self.seed,
            "settings": self.settings,
            "rows": self.rows,
            "aggregates": self.aggregates,
            "gates": self.gates,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricReport":
        return cls(config_hash=obj["config_hash"],
                   template_version=obj["template_version"],
                   timestamp=obj["timestamp"], seed=obj["seed"],
                   settings=obj["settings"], rows=obj["rows"],
                   aggregates=obj["aggregates"], gates=obj["gates"])


def _aggregate_rows(rows: list[dict]) -> dict:
    """Per-family, per-metric trial means recomputed from the per-record rows."""
    trials = sorted({row["trial"] for row in rows})
    agg: dict = {"conr": {}, "cong": {}, "cogl": {}}
    for family in ("conr", "cong"):
        metrics = sorted({row["metric"] for row in rows if row["family"] == family})
        for metric in metrics:
            means = []
            for t in trials:
                values = [row["value"] for row in rows
                          if row["family"] == family and row["metric"] == metric
                          and row["trial"] == t and row["value"] is not None]
                if values:
                    means.append(sum(values) / len(values))
            agg[family][metric] = means
    cogl_metrics = sorted({row["metric"] for row in rows if row["family"] == "cogl"})
    for metric in cogl_metrics:
        per_trial: list[list[CogLScore]] = []
        for t in trials:
            scores = [
                CogLScore(metric_id=metric, value=row["value"], raw_text="",
                          success=row["value"] is not None)
                for row in rows
                if row["family"] == "cogl" and row["metric"] == metric
                and row["trial"] == t
            ]
            if scores:
                per_trial.append(scores)
        if per_trial:
            result = aggregate_cogl(per_trial)
            agg["cogl"][metric] = {
                "trial_means": result.trial_means,
                "per_trial_p_sc": result.per_trial_p_sc,
                "value": result.value,
                "p_sc_pct": result.p_sc_pct,
                "unavailable": result.unavailable,
            }
    return agg


def _evaluate_gates(cfg: RunConfig, agg: dict) -> list[dict]:
    """Optional pass/fail thresholds on aggregate values (reported, never fatal)."""
    gates = []

    def overall(family: str, metric: str):
        means = agg.get(family, {}).get(metric)
        if not means:
            return None
        return sum(means) / len(means)

    checks = [
        ("hit_1", cfg.gate_hit_1, overall("conr", "Hit@1"), "ge"),
        ("f1", cfg.gate_f1, overall("conr", "F1"), "ge"),
        ("mrr", cfg.gate_mrr, overall("conr", "MRR"), "ge"),
        ("rouge1", cfg.gate_rouge1, overall("cong", "R1"), "ge"),
        ("ppl", cfg.gate_ppl, overall("cong", "PPL"), "le"),
    ]
    for name, threshold, observed, direction in checks:
        if threshold is None or observed is None:
            continue
        passed = observed >= threshold if direction == "ge" else observed <= threshold
        gates.append({"gate": name, "threshold": threshold,
                      "observed": round(observed, 6), "passed": passed})
    return gates


def run_benchmark(cfg: RunConfig) -> MetricReport:
    """Execute transform -> retrieve -> postprocess -> generate -> evaluate.

    Provider failures are accounted, not fatal; stage precondition failures
    abort with the failing record and stage. Worker count never changes the
    report content.
    """
    dataset = load_records(cfg.dataset)
    corpus = load_corpus(cfg.corpus)
    templates = load_templates(cfg.templates) if cfg.templates else TemplateSet()
    bundle = load_or_build_indexes(cfg, corpus)
    chunk_map = bundle.chunk_map()
    providers = make_providers(cfg)
    cogl_metrics = cfg.cogl_metrics or sorted(COGL_METRICS)

    plan = SamplingPlan(e_sp=cfg.e_sp, e_no=cfg.e_no, seed=cfg.seed)
    batches = sample_records(dataset, plan)
    tasks = [(t, rec) for t, batch in enumerate(batches) for rec in batch]

    def work(task):
        t, rec = task
        return (t, rec.record_id), process_record(cfg, bundle, chunk_map, rec,
                                                  providers, templates, cogl_metrics)

    results: dict[tuple[int, str], RecordRun] = {}
    if cfg.workers == 1:
        for task in tasks:
            key, run = work(task)
            results[key] = run
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for key, run in pool.map(work, tasks):
                results[key] = run

    rows: list[dict] = []
    filled_by_trial: list[list[QARecord]] = []
    for t, batch in enumerate(batches):
        filled_batch = []
        for rec in batch:
            run = results[(t, rec.record_id)]
            filled = run.record
            filled_batch.append(filled)
            if cfg.conr:
                scores = conr_evaluate(filled.retrieval_context_ids,
                                       set(filled.golden_context_ids))
                for column, attr in _CONR_FIELDS.items():
                    rows.append({"trial": t, "record_id": rec.record_id,
                                 "family": "conr", "metric": column,
                                 "value": getattr(scores, attr)})
            if cfg.cong and not cfg.retrieval_only and filled.expected_answer \
                    and filled.actual_response is not None:
                scores = cong_evaluate(filled.actual_response, filled.expected_answer,
                                       logprob_provider=providers.logprobs)
                for column, attr in _CONG_FIELDS.items():
                    rows.append({"trial": t, "record_id": rec.record_id,
                                 "family": "cong", "metric": column,
                                 "value": getattr(scores, attr)})
            for metric in cogl_metrics:
                if metric in run.cogl:
                    score = run.cogl[metric]
                    rows.append({"trial": t, "record_id": rec.record_id,
                                 "family": "cogl", "metric": metric,
                                 "value": score.value})
        filled_by_trial.append(filled_batch)

    rows.sort(key=lambda r: (r["trial"], r["record_id"], r["family"], r["metric"]))
    aggregates = _aggregate_rows(rows)
    gates = _evaluate_gates(cfg, aggregates)

    os.makedirs(cfg.output, exist_ok=True)
    for t, filled_batch in enumerate(filled_by_trial):
        save_records(os.path.join(cfg.output, f"filled_t{t}.jsonl"), filled_batch)

    if cfg.provider == "stub":
        timestamp = "1970-01-01T00:00:00Z"  # pinned: stub runs are reproducible byte-for-byte
    else:
        timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat()

    settings = {"index": cfg.index, "top_k": cfg.top_k, "rerank": cfg.rerank,
                "transform": cfg.transform, "synthesis": cfg.synthesis,
                "two_step": cfg.two_step, "e_sp": cfg.e_sp, "e_no": cfg.e_no,
                "provider": cfg.provider, "retrieval_only": cfg.retrieval_only}
    return MetricReport(config_hash=cfg.config_hash(),
                        template_version=templates.version(),
                        timestamp=timestamp, seed=cfg.seed, settings=settings,
                        rows=rows, aggregates=aggregates, gates=gates)


# ---------------------------------------------------------------------------
# Emission


def _family_table(agg: dict, family: str, columns: tuple[str, ...],
                  title: str) -> ReportTable | None:
    metrics = agg.get(family, {})
    if not metrics:
        return None
    cells = []
    for column in columns:
        means = metrics.get(column)
        if not means:
            cells.append("n/a")
            continue
        scale = 100.0 if column in _PERCENT_SCALE else 1.0
        cells.append(fmt_pm(means, scale=scale, digits=2 if scale == 100.0 else 4))
    return ReportTable(title=title, columns=list(columns), rows=[cells])


def _cogl_table(agg: dict) -> ReportTable | None:
    metrics = agg.get("cogl", {})
    if not metrics:
        return None
    table = ReportTable(title="Judge metrics",
                        columns=["Metric", "Value", "P_sc (%)"])
    for metric in sorted(metrics):
        entry = metrics[metric]
        if entry["unavailable"]:
            value = "unavailable"
        else:
            value = fmt_pm(entry["trial_means"], digits=4)
        table.rows.append([metric, value, f"{entry['p_sc_pct']:.2f}"])
    return table


def report_tables(report: MetricReport) -> list[ReportTable]:
    tables = []
    conr = _family_table(report.aggregates, "conr", CONR_REPORT_COLUMNS,
                         "Retrieval metrics")
    if conr:
        tables.append(conr)
    cong = _family_table(report.aggregates, "cong", CONG_REPORT_COLUMNS,
                         "Generation metrics")
    if cong:
        tables.append(cong)
    cogl = _cogl_table(report.aggregates)
    if cogl:
        tables.append(cogl)
    return tables


def emit_report(report: MetricReport, formats, out_dir) -> list[str]:
    """Write the report in the requested formats; aggregates are re-verified first."""
    recomputed = _aggregate_rows(report.rows)
    if json.dumps(recomputed, sort_keys=True) != json.dumps(report.aggregates,
                                                            sort_keys=True):
        raise RunError("emit", "-", ValueError("aggregates do not match per-record rows"))
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            path = os.path.join(out_dir, "report.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2,
                          sort_keys=True)
                fh.write("\n")
        elif fmt == "csv":
            path = os.path.join(out_dir, "report.csv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write("trial,record_id,family,metric,value\n")
                for row in report.rows:
                    value = "" if row["value"] is None else repr(row["value"])
                    fh.write(f"{row['trial']},{row['record_id']},{row['family']},"
                             f"{row['metric']},{value}\n")
        elif fmt == "markdown":
            path = os.path.join(out_dir, "report.md")
            lines = [
                "# Benchmark report", "",
                f"- config hash: `{report.config_hash}`",
                f"- template version: `{report.template_version}`",
                f"- timestamp: {report.timestamp}",
                f"- seed: {report.seed}",
                f"- settings: `{json.dumps(report.settings, sort_keys=True)}`",
                "",
                "Values for [0,1] metrics are shown x100; DCG/IDCG/PPL/CER/WER are "
                "on their natural scale. METEOR uses exact-match alignment only "
                "(no stemming or synonyms).",
                "",
            ]
            for table in report_tables(report):
                lines.append(table.to_markdown())
            if report.gates:
                gate_table = ReportTable(
                    title="Threshold gates",
                    columns=["Gate", "Threshold", "Observed", "Status"],
                    rows=[[g["gate"], f"{g['threshold']}", f"{g['observed']}",
                           "pass" if g["passed"] else "fail"] for g in report.gates],
                )
                lines.append(gate_table.to_markdown())
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def load_report(path) -> MetricReport:
    with open(path, "r", encoding="utf-8") as fh:
        return MetricReport.from_dict(json.load(fh))
