"""Standard strategy pipelines behind the five failure protocols.

Builds the pipeline_factory consumed by run_failure_matrix from a run config.
In stub mode the generator is the golden-aware oracle (answers iff a golden id
is present in the provided context) and the reranker is the golden-aware
oracle scorer, which makes protocol outcomes exact and desk-runnable; with
real providers the same strategies run against the configured endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .config import RunConfig
from .data_model import QARecord
from .diagnostics import FailureProtocol, OracleGenerator, PipelineOutcome
from .generation import SynthesisMode, TemplateSet, synthesize, two_step_answer
from .orchestrator import ProviderSet
from .postprocess import rerank
from .providers import OracleRerankProvider
from .retrieval import (RankedList, bm25_retrieve, decompose_query, dense_retrieve,
                        rewrite_query, rrf_fuse)

NEGATIVE_REFUSAL_STRATEGIES = ("prompt_engineering", "two_step")
RANKING_CONFUSION_STRATEGIES = ("basic", "rerank", "hybrid", "hybrid_rerank")
ANSWER_ABSENCE_STRATEGIES = ("simple_summarize", "refine", "compact",
                             "compact_accumulate")
NOISE_IMPACT_STRATEGIES = ("no_rerank", "rerank")
COMPLEX_REASONING_STRATEGIES = ("basic", "rewrite", "decompose", "few_shot")

DEFAULT_STRATEGIES = {
    "negative_refusal": NEGATIVE_REFUSAL_STRATEGIES,
    "ranking_confusion": RANKING_CONFUSION_STRATEGIES,
    "answer_absence": ANSWER_ABSENCE_STRATEGIES,
    "noise_impact": NOISE_IMPACT_STRATEGIES,
    "complex_reasoning": COMPLEX_REASONING_STRATEGIES,
}


@dataclass(frozen=True)
class _CtxNode:
    """Minimal passage shim for scoring already-assembled contexts."""

    chunk_id: str
    doc_id: str
    text: str


def protocol_from_config(kind: str, cfg: RunConfig) -> FailureProtocol:
    return FailureProtocol(kind=kind, strategies=list(DEFAULT_STRATEGIES[kind]),
                           seed=cfg.seed, e_sp=cfg.e_sp, e_no=cfg.e_no)


def _refusal_aware(templates: TemplateSet) -> TemplateSet:
    body = templates.qa_template + (
        "If the context does not contain the information needed, reply exactly: "
        "I'm sorry, I do not have information on this\n"
    )
    return replace(templates, qa_template=body)


def _dedup_doc_ids(ranked: RankedList) -> list[str]:
    seen: set[str] = set()
    out = []
    for node in ranked.nodes():
        if node.doc_id not in seen:
            seen.add(node.doc_id)
            out.append(node.doc_id)
    return out


def build_pipeline_factory(kind: str, cfg: RunConfig, records: list[QARecord],
                           providers: ProviderSet, templates: TemplateSet,
                           bundle=None):
    """pipeline_factory(strategy) -> (record -> PipelineOutcome), or None if unknown."""
    oracle = OracleGenerator(
        golden_by_record={r.record_id: set(r.golden_context_ids) for r in records},
        answers={r.record_id: r.expected_answer for r in records},
    )
    use_oracle = cfg.provider == "stub"

    if kind == "negative_refusal":
        def factory(strategy: str):
            if strategy not in NEGATIVE_REFUSAL_STRATEGIES:
                return None

            def run(rec: QARecord) -> PipelineOutcome:
                filled = rec.copy()
                filled.retrieval_context = list(rec.golden_context)
                filled.retrieval_context_ids = list(rec.golden_context_ids)
                if use_oracle:
                    gen = oracle.generate(rec, filled.retrieval_context_ids)
                elif strategy == "two_step":
                    gen = two_step_answer(rec.user_query, filled.retrieval_context,
                                          providers.chat, templates,
                                          max_tokens=cfg.tokens,
                                          context_window=cfg.context_length)
                else:
                    gen = synthesize(SynthesisMode.SIMPLE_SUMMARIZE, rec.user_query,
                                     filled.retrieval_context, providers.chat,
                                     _refusal_aware(templates),
                                     max_tokens=cfg.tokens,
                                     context_window=cfg.context_length)
                filled.actual_response = gen.answer
                return PipelineOutcome(record=filled, generation=gen)

            return run
        return factory

    if kind == "ranking_confusion":
        chunk_map = bundle.chunk_map()
        pool_k = max(cfg.top_k * 2, 10)

        def factory(strategy: str):
            if strategy not in RANKING_CONFUSION_STRATEGIES:
                return None

            def run(rec: QARecord) -> PipelineOutcome:
                qvec = providers.embedder.embed([rec.user_query])[0]
                dense = dense_retrieve(bundle.vectors, qvec, pool_k, chunk_map)
                if strategy in ("hybrid", "hybrid_rerank"):
                    lexical = bm25_retrieve(bundle.bm25, rec.user_query, pool_k,
                                            chunk_map)
                    ranked = rrf_fuse([dense, lexical], k=pool_k)
                else:
                    ranked = dense
                if strategy in ("rerank", "hybrid_rerank") and ranked.entries:
                    scorer = (OracleRerankProvider(set(rec.golden_context_ids))
                              if use_oracle else providers.reranker)
                    ranked = rerank(ranked, scorer, cfg.top_k, query=rec.user_query)
                elif len(ranked.entries) > cfg.top_k:
                    ranked = RankedList(entries=list(ranked.entries[: cfg.top_k]),
                                        origin=ranked.origin)
                filled = rec.copy()
                filled.retrieval_context_ids = _dedup_doc_ids(ranked)
                filled.retrieval_context = []
                seen: set[str] = set()
                for node in ranked.nodes():
                    if node.doc_id not in seen:
                        seen.add(node.doc_id)
                        filled.retrieval_context.append(node.text)
                return PipelineOutcome(record=filled,
                                       retrieved_doc_ids=filled.retrieval_context_ids)

            return run
        return factory

    if kind == "answer_absence":
        def factory(strategy: str):
            if strategy not in ANSWER_ABSENCE_STRATEGIES:
                return None
            mode = SynthesisMode(strategy)

            def run(rec: QARecord) -> PipelineOutcome:
                filled = rec.copy()
                filled.retrieval_context = list(rec.golden_context)
                filled.retrieval_context_ids = list(rec.golden_context_ids)
                gen = synthesize(mode, rec.user_query, filled.retrieval_context,
                                 providers.chat, templates, max_tokens=cfg.tokens,
                                 context_window=cfg.context_length)
                filled.actual_response = gen.answer
                return PipelineOutcome(record=filled, generation=gen)

            return run
        return factory

    if kind == "noise_impact":
        def factory(strategy: str):
            if strategy not in NOISE_IMPACT_STRATEGIES:
                return None

            def run(rec: QARecord) -> PipelineOutcome:
                filled = rec.copy()
                if strategy == "rerank" and filled.retrieval_context:
                    nodes = [_CtxNode(chunk_id=f"{rec.record_id}:{i}", doc_id=doc_id,
                                      text=text)
                             for i, (text, doc_id)
                             in enumerate(zip(filled.retrieval_context,
                                              filled.retrieval_context_ids))]
                    scorer = (OracleRerankProvider(set(rec.golden_context_ids))
                              if use_oracle else providers.reranker)
                    scores = scorer.score_nodes(rec.user_query, nodes)
                    order = sorted(range(len(nodes)),
                                   key=lambda i: (-scores[i], i))
                    filled.retrieval_context = [nodes[i].text for i in order]
                    filled.retrieval_context_ids = [nodes[i].doc_id for i in order]
                if use_oracle:
                    gen = oracle.generate(rec, filled.retrieval_context_ids)
                else:
                    gen = synthesize(SynthesisMode.SIMPLE_SUMMARIZE, rec.user_query,
                                     filled.retrieval_context, providers.chat,
                                     templates, max_tokens=cfg.tokens,
                                     context_window=cfg.context_length)
                filled.actual_response = gen.answer
                return PipelineOutcome(record=filled, generation=gen)

            return run
        return factory

    if kind == "complex_reasoning":
        chunk_map = bundle.chunk_map() if bundle else {}

        def factory(strategy: str):
            if strategy not in COMPLEX_REASONING_STRATEGIES:
                return None

            def run(rec: QARecord) -> PipelineOutcome:
                query = rec.user_query
                queries = [query]
                if strategy == "rewrite":
                    queries = [rewrite_query(query, providers.chat,
                                             templates).effective_query]
                elif strategy == "decompose":
                    qb = decompose_query(query, providers.chat, templates)
                    queries = qb.sub_queries or [query]
                ranked_lists = []
                for q in queries:
                    qvec = providers.embedder.embed([q])[0]
                    ranked_lists.append(dense_retrieve(bundle.vectors, qvec,
                                                       cfg.top_k, chunk_map))
                ranked = (ranked_lists[0] if len(ranked_lists) == 1
                          else rrf_fuse(ranked_lists, k=cfg.top_k))
                filled = rec.copy()
                filled.retrieval_context_ids = _dedup_doc_ids(ranked)
                seen: set[str] = set()
                filled.retrieval_context = []
                for node in ranked.nodes():
                    if node.doc_id not in seen:
                        seen.add(node.doc_id)
                        filled.retrieval_context.append(node.text)
                if not filled.retrieval_context:
                    filled.retrieval_context = list(rec.golden_context)
                    filled.retrieval_context_ids = list(rec.golden_context_ids)
                gen = synthesize(SynthesisMode.SIMPLE_SUMMARIZE, rec.user_query,
                                 filled.retrieval_context, providers.chat, templates,
                                 few_shot=(strategy == "few_shot"),
                                 max_tokens=cfg.tokens,
                                 context_window=cfg.context_length)
                filled.actual_response = gen.answer
                return PipelineOutcome(record=filled, generation=gen,
                                       retrieved_doc_ids=filled.retrieval_context_ids)

            return run
        return factory

    raise ValueError(f"unknown failure kind {kind!r}")
