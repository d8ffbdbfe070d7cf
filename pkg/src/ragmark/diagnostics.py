"""Failure-mode dataset builders and the strategy-matrix runner.

Five protocols: negative refusal, ranking confusion, answer absence, noise
impact, complex reasoning. Builders are pure in (inputs, seed); the matrix
runner emits one deterministic table per protocol.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

from .data_model import CorpusDocument, QARecord, SamplingPlan, sample_records
from .evaluators import COGL_METRICS, aggregate_cogl, cogl_evaluate, conr_evaluate
from .generation import REFUSAL_PHRASE, GenerationResult
from .reporting import ReportTable, fmt_pm

FAILURE_KINDS = (
    "negative_refusal",
    "ranking_confusion",
    "answer_absence",
    "noise_impact",
    "complex_reasoning",
)

# Metric set shared by the answer-absence / noise / complex-reasoning protocols.
JUDGE_METRIC_SET = ("Up-FAcc", "Up-RCns", "Up-CUti", "Up-RCmp", "Up-RMch")

CONR_COLUMNS = ("F1", "EM", "MRR", "Hit@1", "MAP", "DCG", "IDCG", "NDCG")

DEFAULT_REFUSAL_PATTERNS = (
    "i'm sorry, i do not have information",
    "i do not have information",
    "i don't have information",
    "insufficient information",
    "cannot answer",
    "can't answer",
    "unable to answer",
    "i don't know",
    "no relevant information",
)


class DiagnosticsError(RuntimeError):
    pass


@dataclass(frozen=True)
class RefusalDetector:
    """Case-insensitive substring patterns, optionally backed by a judge call."""

    patterns: tuple[str, ...] = DEFAULT_REFUSAL_PATTERNS
    judge_fallback: bool = False

    def __post_init__(self):
        if not self.patterns and not self.judge_fallback:
            raise ValueError("need refusal patterns when judge fallback is off")

    def matches(self, text: str) -> bool:
        lowered = text.lower()
        return any(p.lower() in lowered for p in self.patterns)


@dataclass
class FailureProtocol:
    """One failure kind with its strategies, dataset parameters, and metric set."""

    kind: str
    strategies: list[str]
    seed: int = 0
    n_noise_levels: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    f1_threshold: float = 1.0
    subset_tag: str = "hard"
    curated_ids: list[str] | None = None
    e_sp: int = 20
    e_no: int = 3

    def __post_init__(self):
        if self.kind not in FAILURE_KINDS:
            raise ValueError(f"unknown failure kind {self.kind!r}")
        if not self.strategies:
            raise ValueError("strategy list must be non-empty")
        if self.kind == "noise_impact" and any(n < 0 for n in self.n_noise_levels):
            raise ValueError("noise levels must be >= 0")


@dataclass
class PipelineOutcome:
    """What one pipeline invocation produced for one record."""

    record: QARecord
    generation: GenerationResult | None = None
    retrieved_doc_ids: list[str] | None = None


class OracleGenerator:
    """Answers the expected answer iff any golden doc id is present in the context.

    The desk-scale stand-in for a perfect generator: with it, the refusal set
    yields rejection rate 1.0 and the unmodified set 0.0, exactly.
    """

    def __init__(self, golden_by_record: dict[str, set[str]],
                 answers: dict[str, str]):
        self.golden_by_record = golden_by_record
        self.answers = answers

    def generate(self, record: QARecord, context_ids: list[str]) -> GenerationResult:
        golden = self.golden_by_record[record.record_id]
        if golden & set(context_ids):
            return GenerationResult(answer=self.answers[record.record_id], mode="oracle")
        return GenerationResult(answer=REFUSAL_PHRASE, refused=True, mode="oracle")


def build_refusal_set(records: list[QARecord], corpus: list[CorpusDocument],
                      seed: int) -> list[QARecord]:
    """Pair every query with another record's golden context via a seeded derangement.

    No record keeps its own context, and (re-drawing when needed) no record
    receives a context sharing document ids with its own. Original golden ids
    are preserved in the tags for audit.
    """
    if len(records) < 2:
        raise DiagnosticsError("refusal set needs at least 2 records")
    rng = random.Random(seed)
    n = len(records)
    for _ in range(1000):
        perm = list(range(n))
        rng.shuffle(perm)
        if any(perm[i] == i for i in range(n)):
            continue
        if any(set(records[i].golden_context_ids) & set(records[perm[i]].golden_context_ids)
               for i in range(n)):
            continue
        break
    else:
        raise DiagnosticsError("could not find a derangement with disjoint golden ids")

    out = []
    for i, rec in enumerate(records):
        donor = records[perm[i]]
        new = rec.copy()
        new.golden_context = list(donor.golden_context)
        new.golden_context_ids = list(donor.golden_context_ids)
        new.tags = set(rec.tags) | {"orig_golden:" + ",".join(rec.golden_context_ids)}
        out.append(new)
    return out


def rejection_rate(results: list[GenerationResult],
                   detector: RefusalDetector | None = None) -> float:
    """Fraction of generations flagged refused, by flag or by pattern match."""
    if not results:
        raise ValueError("rejection_rate needs at least one result")
    detector = detector or RefusalDetector()
    refused = sum(1 for r in results if r.refused or detector.matches(r.answer))
    return refused / len(results)


def select_ranking_confusion_set(scored: list[tuple[QARecord, float]],
                                 f1_threshold: float) -> list[QARecord]:
    """Records whose baseline retrieval F1 is below the threshold, worst first."""
    picked = [(f1, i, rec) for i, (rec, f1) in enumerate(scored) if f1 < f1_threshold]
    picked.sort(key=lambda t: (t[0], t[1]))
    return [rec for _, _, rec in picked]


def build_noise_set(records: list[QARecord], corpus: list[CorpusDocument],
                    n_noise: int, seed: int) -> list[QARecord]:
    """Golden passages plus n_noise non-golden documents, shuffled; golden always kept."""
    if n_noise < 0:
        raise ValueError("n_noise must be >= 0")
    rng = random.Random(seed)
    out = []
    for rec in records:
        golden = set(rec.golden_context_ids)
        pool = [d for d in corpus if d.doc_id not in golden]
        if len(pool) < n_noise:
            raise DiagnosticsError(
                f"record {rec.record_id!r}: only {len(pool)} non-golden documents, "
                f"need {n_noise}"
            )
        noise = rng.sample(pool, n_noise)
        pairs = list(zip(rec.golden_context, rec.golden_context_ids))
        pairs += [(d.text, d.doc_id) for d in noise]
        rng.shuffle(pairs)
        new = rec.copy()
        new.retrieval_context = [t for t, _ in pairs]
        new.retrieval_context_ids = [i for _, i in pairs]
        out.append(new)
    return out


_WORD = re.compile(r"[0-9a-z]+")

_STOPWORDS = frozenset(
    "a an the of in on at is was are were be been to and or for with by from "
    "it its as this that these those".split()
)


def _content_words(text: str) -> set[str]:
    return {w for w in _WORD.findall(text.lower()) if w not in _STOPWORDS}


def select_answer_absence_set(records: list[QARecord],
                              baseline_answers: dict[str, str],
                              mode: str = "auto_proxy",
                              curated_ids: list[str] | None = None) -> list[QARecord]:
    """Records whose golden-context answer misses the expected answer.

    curated_ids mode returns exactly the listed records; auto_proxy keeps the
    records whose baseline answer shares no content words with the expectation
    (a reproducible stand-in for manual screening).
    """
    if mode == "curated_ids":
        if curated_ids is None:
            raise ValueError("curated_ids mode requires an id list")
        by_id = {r.record_id: r for r in records}
        missing = [i for i in curated_ids if i not in by_id]
        if missing:
            raise DiagnosticsError(f"curated ids not found: {missing}")
        return [by_id[i] for i in curated_ids]
    if mode != "auto_proxy":
        raise ValueError(f"unknown mode {mode!r}")
    out = []
    for rec in records:
        answer = baseline_answers.get(rec.record_id, "")
        if not _content_words(answer) & _content_words(rec.expected_answer):
            out.append(rec)
    return out


def _judge_metric_row(label: str, batches: list[list[QARecord]], pipeline,
                      judge, metrics: tuple[str, ...]) -> list[str]:
    """One table row: per-metric 'mean ±std [P_sc%]' over the trial batches."""
    cells = [label]
    per_metric_trials: dict[str, list[list]] = {m: [] for m in metrics}
    for batch in batches:
        outcomes = [pipeline(rec) for rec in batch]
        for metric in metrics:
            trial_scores = []
            for outcome in outcomes:
                rec = outcome.record
                trial_scores.append(cogl_evaluate(metric, rec, judge))
            per_metric_trials[metric].append(trial_scores)
    for metric in metrics:
        agg = aggregate_cogl(per_metric_trials[metric])
        if agg.unavailable:
            cells.append(f"unavailable [P_sc {agg.p_sc_pct:.0f}%]")
        else:
            cells.append(f"{fmt_pm(agg.trial_means)} [P_sc {agg.p_sc_pct:.0f}%]")
    return cells


def run_failure_matrix(protocol: FailureProtocol, pipeline_factory,
                       corpus: list[CorpusDocument], records: list[QARecord],
                       judge=None, detector: RefusalDetector | None = None,
                       baseline_f1: list[tuple[QARecord, float]] | None = None,
                       baseline_answers: dict[str, str] | None = None,
                       answer_absence_mode: str = "auto_proxy") -> ReportTable:
    """Run one protocol's strategy grid and emit its table.

    pipeline_factory(strategy) must return a callable mapping a QARecord to a
    PipelineOutcome. Deterministic given stub providers and the protocol seed.
    """
    unknown = [s for s in protocol.strategies if pipeline_factory(s) is None]
    if unknown:
        raise DiagnosticsError(f"strategies unknown to the pipeline factory: {unknown}")

    plan = SamplingPlan(e_sp=min(protocol.e_sp, max(len(records), 1)),
                        e_no=protocol.e_no, seed=protocol.seed)

    if protocol.kind == "negative_refusal":
        wrong = build_refusal_set(records, corpus, protocol.seed)
        table = ReportTable(
            title="Evaluation of negative refusal strategies",
            columns=["Context", "Strategy", "Rejection Rate"],
        )
        for context_label, dataset in (("Wrong Context", wrong),
                                       ("Correct Context", records)):
            batches = sample_records(dataset, plan)
            for strategy in protocol.strategies:
                pipeline = pipeline_factory(strategy)
                rates = []
                for batch in batches:
                    results = [pipeline(rec).generation for rec in batch]
                    rates.append(rejection_rate(results, detector))
                table.rows.append([context_label, strategy, fmt_pm(rates, digits=3)])
        return table

    if protocol.kind == "ranking_confusion":
        if baseline_f1 is None:
            basic = pipeline_factory(protocol.strategies[0])
            baseline_f1 = []
            for rec in records:
                outcome = basic(rec)
                scores = conr_evaluate(outcome.retrieved_doc_ids or [],
                                       set(rec.golden_context_ids))
                baseline_f1.append((rec, scores.f1))
        dataset = select_ranking_confusion_set(baseline_f1, protocol.f1_threshold)
        if not dataset:
            return ReportTable(title="Results of ranking confusion strategies",
                               columns=["Strategies", *CONR_COLUMNS],
                               rows=[["(no records below threshold)"] +
                                     [""] * len(CONR_COLUMNS)])
        plan = SamplingPlan(e_sp=min(protocol.e_sp, len(dataset)),
                            e_no=protocol.e_no, seed=protocol.seed)
        batches = sample_records(dataset, plan)
        table = ReportTable(title="Results of ranking confusion strategies",
                            columns=["Strategies", *CONR_COLUMNS])
        for strategy in protocol.strategies:
            pipeline = pipeline_factory(strategy)
            trials: dict[str, list[float]] = {c: [] for c in CONR_COLUMNS}
            for batch in batches:
                per_record = []
                for rec in batch:
                    outcome = pipeline(rec)
                    per_record.append(conr_evaluate(outcome.retrieved_doc_ids or [],
                                                    set(rec.golden_context_ids)))
                n = len(per_record)
                trials["F1"].append(sum(s.f1 for s in per_record) / n)
                trials["EM"].append(sum(s.em for s in per_record) / n)
                trials["MRR"].append(sum(s.mrr for s in per_record) / n)
                trials["Hit@1"].append(sum(s.hit_at_1 for s in per_record) / n)
                trials["MAP"].append(sum(s.map for s in per_record) / n)
                trials["DCG"].append(sum(s.dcg for s in per_record) / n)
                trials["IDCG"].append(sum(s.idcg for s in per_record) / n)
                trials["NDCG"].append(sum(s.ndcg for s in per_record) / n)
            table.rows.append([strategy] + [fmt_pm(trials[c]) for c in CONR_COLUMNS])
        return table

    if protocol.kind == "answer_absence":
        dataset = select_answer_absence_set(records, baseline_answers or {},
                                            mode=answer_absence_mode,
                                            curated_ids=protocol.curated_ids)
        if not dataset:
            raise DiagnosticsError("answer-absence selection is empty")
        plan = SamplingPlan(e_sp=min(protocol.e_sp, len(dataset)),
                            e_no=protocol.e_no, seed=protocol.seed)
        batches = sample_records(dataset, plan)
        table = ReportTable(title="Evaluation of answer absence strategies",
                            columns=["Strategies", *JUDGE_METRIC_SET])
        for strategy in protocol.strategies:
            pipeline = pipeline_factory(strategy)
            table.rows.append(_judge_metric_row(strategy, batches, pipeline,
                                                judge, JUDGE_METRIC_SET))
        return table

    if protocol.kind == "noise_impact":
        table = ReportTable(title="Evaluation of noise impact strategies",
                            columns=["Noise number", "Strategies", *JUDGE_METRIC_SET])
        for n_noise in protocol.n_noise_levels:
            noisy = build_noise_set(records, corpus, n_noise, protocol.seed)
            plan = SamplingPlan(e_sp=min(protocol.e_sp, len(noisy)),
                                e_no=protocol.e_no, seed=protocol.seed)
            batches = sample_records(noisy, plan)
            for strategy in protocol.strategies:
                pipeline = pipeline_factory(strategy)
                row = _judge_metric_row(strategy, batches, pipeline, judge,
                                        JUDGE_METRIC_SET)
                table.rows.append([str(n_noise)] + row)
        return table

    # complex_reasoning
    dataset = [r for r in records if protocol.subset_tag in r.tags]
    if not dataset:
        raise DiagnosticsError(f"no records tagged {protocol.subset_tag!r}")
    plan = SamplingPlan(e_sp=min(protocol.e_sp, len(dataset)),
                        e_no=protocol.e_no, seed=protocol.seed)
    batches = sample_records(dataset, plan)
    table = ReportTable(title="Evaluation of complex reasoning strategies",
                        columns=["Strategies", *JUDGE_METRIC_SET])
    for strategy in protocol.strategies:
        pipeline = pipeline_factory(strategy)
        table.rows.append(_judge_metric_row(strategy, batches, pipeline, judge,
                                            JUDGE_METRIC_SET))
    return table
