"""Refinement of ranked candidates before generation: rerank, filter, window swap."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .retrieval import RankedEntry, RankedList

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostprocessConfig:
    rerank_enabled: bool = True
    rerank_top_n: int = 3
    score_threshold: float | None = None
    window_substitution: bool = False

    def __post_init__(self):
        if self.rerank_enabled and self.rerank_top_n < 1:
            raise ValueError("rerank_top_n must be >= 1 when reranking is enabled")


def rerank(ranked: RankedList, scorer, top_n: int, query: str = "") -> RankedList:
    """Re-score with a cross-encoder provider, sort descending, truncate to top_n.

    Provider failure degrades to the original order, untruncated, with the
    fallback flag set: failures are accountable, not fatal.
    """
    if not ranked.entries:
        raise ValueError("rerank requires a non-empty ranked list")
    nodes = ranked.nodes()
    try:
        scores = scorer.score_nodes(query, nodes)
    except Exception as exc:  # noqa: BLE001 - degrade, never abort
        log.warning("rerank provider failed (%s); keeping original order", exc)
        return RankedList(entries=list(ranked.entries), origin="post:rerank",
                          fallback=True)
    order = sorted(range(len(nodes)), key=lambda i: (-scores[i], i))
    entries = [RankedEntry(node=nodes[i], score=float(scores[i])) for i in order[:top_n]]
    return RankedList(entries=entries, origin="post:rerank")


def filter_candidates(ranked: RankedList, cfg: PostprocessConfig) -> RankedList:
    """Threshold filtering then quantity filtering, with a keep-best floor.

    Generation always needs at least one context, so when the threshold would
    empty a non-empty list, the single best entry survives.
    """
    entries = list(ranked.entries)
    if cfg.score_threshold is not None:
        kept = [e for e in entries if e.score >= cfg.score_threshold]
        if not kept and entries:
            kept = [entries[0]]
        entries = kept
    entries = entries[: cfg.rerank_top_n]
    return RankedList(entries=entries, origin=ranked.origin, fallback=ranked.fallback)


def substitute_windows(ranked: RankedList) -> RankedList:
    """Swap each entry's text for its sentence window; order and scores unchanged."""
    entries = []
    for e in ranked.entries:
        if e.node.window_text is not None:
            entries.append(RankedEntry(node=replace(e.node, text=e.node.window_text),
                                       score=e.score))
        else:
            entries.append(e)
    return RankedList(entries=entries, origin=ranked.origin, fallback=ranked.fallback)
