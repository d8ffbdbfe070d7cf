"""Dense, lexical, fused, and sentence-window retrieval plus query transforms.

All retrievers are exact (full scan, no approximation) and fully deterministic:
ties break by ascending chunk_id so reruns are byte-identical.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .indexing import BM25_B, BM25_K1, ChunkNode, InvertedIndex, VectorIndex
from .providers import user_request
from .textproc import lexical_tokens

log = logging.getLogger(__name__)

RRF_KAPPA = 60.0


@dataclass(frozen=True)
class RankedEntry:
    node: ChunkNode
    score: float


@dataclass
class RankedList:
    """Ordered (chunk, score) entries from one retriever or post-processor."""

    entries: list[RankedEntry]
    origin: str
    fallback: bool = False

    def __post_init__(self):
        ids = [e.node.chunk_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate chunk ids in ranked list")
        for a, b in zip(self.entries, self.entries[1:]):
            if b.score > a.score + 1e-12:
                raise ValueError("ranked list scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.entries)

    def nodes(self) -> list[ChunkNode]:
        return [e.node for e in self.entries]

    def chunk_ids(self) -> list[str]:
        return [e.node.chunk_id for e in self.entries]

    def doc_ids(self) -> list[str]:
        return [e.node.doc_id for e in self.entries]

    def texts(self) -> list[str]:
        return [e.node.text for e in self.entries]


@dataclass
class QueryBundle:
    """The pre-retrieval stage's product: what actually gets embedded/matched."""

    original_query: str
    effective_query: str
    transform: str = "none"  # none | hyde | stepback | rewrite | decompose
    sub_queries: list[str] = field(default_factory=list)
    fallback: bool = False

    def __post_init__(self):
        if not self.effective_query:
            raise ValueError("effective_query must be non-empty")
        if self.sub_queries and any(not q for q in self.sub_queries):
            raise ValueError("sub_queries must be non-empty texts")


def dense_retrieve(index: VectorIndex, query_vec, k: int,
                   chunk_map: dict[str, ChunkNode]) -> RankedList:
    """Exact top-k by cosine similarity over every stored vector."""
    if k <= 0:
        raise ValueError("k must be positive")
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} does not match index dim {index.dim}")
    vectors = index.vectors.astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    qnorm = np.linalg.norm(q)
    denom = norms * qnorm
    sims = np.where(denom > 0, vectors @ q / np.where(denom == 0, 1.0, denom), 0.0)
    order = sorted(range(len(index.chunk_ids)), key=lambda i: (-sims[i], index.chunk_ids[i]))
    entries = [
        RankedEntry(node=chunk_map[index.chunk_ids[i]], score=float(sims[i]))
        for i in order[:k]
    ]
    return RankedList(entries=entries, origin="dense")


def bm25_score(index: InvertedIndex, query_terms: list[str], chunk_id: str) -> float:
    """Okapi BM25 with k1=1.2, b=0.75; summed per query-token occurrence."""
    dl = index.chunk_len[chunk_id]
    avg = index.avg_len
    score = 0.0
    for term in query_terms:
        rows = index.postings.get(term)
        if not rows:
            continue
        tf = 0
        for cid, f in rows:
            if cid == chunk_id:
                tf = f
                break
        if tf == 0:
            continue
        denom = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avg)
        score += index.idf(term) * tf * (BM25_K1 + 1.0) / denom
    return score


def bm25_retrieve(index: InvertedIndex, query_text: str, k: int,
                  chunk_map: dict[str, ChunkNode]) -> RankedList:
    """Top-k by BM25; chunks scoring zero are excluded."""
    if k <= 0:
        raise ValueError("k must be positive")
    terms = lexical_tokens(query_text)
    candidates: set[str] = set()
    for term in set(terms):
        for cid, _ in index.postings.get(term, ()):
            candidates.add(cid)
    scored = [(cid, bm25_score(index, terms, cid)) for cid in candidates]
    scored = [(cid, s) for cid, s in scored if s > 0.0]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    entries = [RankedEntry(node=chunk_map[cid], score=s) for cid, s in scored[:k]]
    return RankedList(entries=entries, origin="bm25")


def rrf_fuse(rankings: list[RankedList], kappa: float = RRF_KAPPA, k: int = 10) -> RankedList:
    """Reciprocal rank fusion: score(d) = sum over rankings of 1/(kappa + rank).

    Ranks start at 1. Ties break by the best rank the chunk achieved anywhere,
    then by chunk_id. Scores are exactly-rounded sums (math.fsum), so the
    output is bit-identical under permutation of the input rankings.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if k <= 0:
        raise ValueError("k must be positive")
    if not rankings:
        raise ValueError("rrf_fuse requires at least one ranking")
    terms: dict[str, list[float]] = {}
    best_rank: dict[str, int] = {}
    nodes: dict[str, ChunkNode] = {}
    for ranking in rankings:
        for rank, entry in enumerate(ranking.entries, start=1):
            cid = entry.node.chunk_id
            terms.setdefault(cid, []).append(1.0 / (kappa + rank))
            best_rank[cid] = min(best_rank.get(cid, rank), rank)
            nodes.setdefault(cid, entry.node)
    fused = {cid: math.fsum(sorted(vals)) for cid, vals in terms.items()}
    order = sorted(fused, key=lambda cid: (-fused[cid], best_rank[cid], cid))
    entries = [RankedEntry(node=nodes[cid], score=fused[cid]) for cid in order[:k]]
    return RankedList(entries=entries, origin="rrf")


def sentence_window_retrieve(index: VectorIndex, query_vec, k: int,
                             chunk_map: dict[str, ChunkNode]) -> RankedList:
    """Dense top-k over sentence nodes; entries keep their window_text payload."""
    ranked = dense_retrieve(index, query_vec, k, chunk_map)
    return RankedList(entries=ranked.entries, origin="sentence_window")


def _transform(query: str, llm, template: str, tag: str) -> QueryBundle:
    prompt = template.replace("{query_str}", query)
    exchange = llm.complete(user_request(prompt))
    if not exchange.success or not exchange.response_text.strip():
        log.warning("%s transform failed (%s); falling back to original query",
                    tag, exchange.error or "empty output")
        return QueryBundle(original_query=query, effective_query=query,
                           transform=tag, fallback=True)
    return QueryBundle(original_query=query,
                       effective_query=exchange.response_text.strip(),
                       transform=tag)


def hyde_transform(query: str, llm, templates) -> QueryBundle:
    """Replace the query with a hypothetical answer passage for embedding."""
    return _transform(query, llm, templates.hyde_template, "hyde")


def stepback_transform(query: str, llm, templates) -> QueryBundle:
    """Broaden the query to improve contextual grounding before retrieval."""
    return _transform(query, llm, templates.stepback_template, "stepback")


def rewrite_query(query: str, llm, templates) -> QueryBundle:
    return _transform(query, llm, templates.rewrite_template, "rewrite")


_NUMBERED = re.compile(r"^\s*\d+[.)]\s*(.+?)\s*$")


def decompose_query(query: str, llm, templates) -> QueryBundle:
    """Split a complex query into numbered sub-questions; each is retrieved separately."""
    prompt = templates.decompose_template.replace("{query_str}", query)
    exchange = llm.complete(user_request(prompt))
    subs: list[str] = []
    if exchange.success:
        for line in exchange.response_text.splitlines():
            m = _NUMBERED.match(line)
            if m and m.group(1):
                subs.append(m.group(1))
    if not subs:
        log.warning("decompose transform unparseable; falling back to original query")
        return QueryBundle(original_query=query, effective_query=query,
                           transform="decompose", sub_queries=[query], fallback=True)
    return QueryBundle(original_query=query, effective_query=query,
                       transform="decompose", sub_queries=subs)
