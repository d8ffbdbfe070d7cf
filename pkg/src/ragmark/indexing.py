"""Chunking, the BM25 inverted index, the dense vector index, and persistence.

A "token" is a whitespace-delimited unit (see textproc); the lexical index
tokenizes further into lowercase alphanumeric runs. Built indexes are immutable
and safe to share across query workers.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data_model import CorpusDocument
from .textproc import lexical_tokens, sentence_spans

INDEX_FORMAT_VERSION = 1

BM25_K1 = 1.2
BM25_B = 0.75


class IndexingError(RuntimeError):
    """Index build/persistence failure (version, checksum, provider mismatch)."""


@dataclass(frozen=True)
class ChunkNode:
    """One retrieval unit: a token-window slice, or a sentence with its window."""

    chunk_id: str
    doc_id: str
    text: str
    token_span: tuple[int, int]
    window_text: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"chunk {self.chunk_id!r}: empty text")
        if self.token_span[1] <= self.token_span[0]:
            raise ValueError(f"chunk {self.chunk_id!r}: bad token span {self.token_span}")
        if self.window_text is not None and self.text not in self.window_text:
            raise ValueError(f"chunk {self.chunk_id!r}: window does not contain text")

    def effective_text(self) -> str:
        return self.window_text if self.window_text is not None else self.text


@dataclass(frozen=True)
class ChunkingConfig:
    chunk_size: int = 128
    chunk_overlap: int = 20
    sentence_window: int = 3

    def __post_init__(self):
        if not 0 <= self.chunk_overlap < self.chunk_size:
            raise ValueError(
                f"need 0 <= overlap < size, got overlap={self.chunk_overlap} "
                f"size={self.chunk_size}"
            )
        if self.sentence_window < 0:
            raise ValueError("sentence_window must be >= 0")


def split_into_chunks(doc: CorpusDocument, cfg: ChunkingConfig) -> list[ChunkNode]:
    """Slice the document into overlapping token windows.

    The window end snaps back to a sentence boundary when one falls within the
    final 20% of the window; otherwise it is a hard token cut. Each next chunk
    starts exactly chunk_overlap tokens before the previous end, so stripping
    the overlap reconstructs the tokenized document.
    """
    tokens = doc.text.split()
    n = len(tokens)
    boundaries = sorted(end for _, end in sentence_spans(doc.text))
    chunks: list[ChunkNode] = []
    start = 0
    k = 0
    while True:
        end = min(start + cfg.chunk_size, n)
        if end < n:
            snap_from = start + int(math.ceil(cfg.chunk_size * 0.8))
            snaps = [b for b in boundaries if snap_from <= b <= end and b > start]
            if snaps:
                end = snaps[-1]
        chunks.append(
            ChunkNode(
                chunk_id=f"{doc.doc_id}#{k}",
                doc_id=doc.doc_id,
                text=" ".join(tokens[start:end]),
                token_span=(start, end),
            )
        )
        if end >= n:
            break
        start = end - cfg.chunk_overlap
        k += 1
    return chunks


def split_into_sentence_windows(doc: CorpusDocument, cfg: ChunkingConfig) -> list[ChunkNode]:
    """One node per sentence; window_text adds up to sentence_window neighbors per side."""
    tokens = doc.text.split()
    spans = sentence_spans(doc.text)
    sentences = [" ".join(tokens[a:b]) for a, b in spans]
    nodes = []
    for i, (a, b) in enumerate(spans):
        lo = max(0, i - cfg.sentence_window)
        hi = min(len(sentences), i + cfg.sentence_window + 1)
        nodes.append(
            ChunkNode(
                chunk_id=f"{doc.doc_id}#s{i}",
                doc_id=doc.doc_id,
                text=sentences[i],
                token_span=(a, b),
                window_text=" ".join(sentences[lo:hi]),
            )
        )
    return nodes


@dataclass
class InvertedIndex:
    """Term postings plus the per-chunk lengths BM25 needs."""

    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    chunk_len: dict[str, int] = field(default_factory=dict)

    @property
    def n_chunks(self) -> int:
        return len(self.chunk_len)

    @property
    def avg_len(self) -> float:
        if not self.chunk_len:
            return 0.0
        return sum(self.chunk_len.values()) / len(self.chunk_len)

    def idf(self, term: str) -> float:
        n_t = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_chunks - n_t + 0.5) / (n_t + 0.5))


def build_bm25_index(chunks: list[ChunkNode]) -> InvertedIndex:
    """Postings over lowercase alphanumeric tokens, sorted by chunk_id."""
    if not chunks:
        raise IndexingError("cannot build an index over zero chunks")
    index = InvertedIndex()
    for chunk in chunks:
        terms = lexical_tokens(chunk.text)
        index.chunk_len[chunk.chunk_id] = len(terms)
        for term, tf in Counter(terms).items():
            index.postings.setdefault(term, []).append((chunk.chunk_id, tf))
    for term in index.postings:
        index.postings[term].sort(key=lambda pair: pair[0])
    return index


@dataclass
class VectorIndex:
    """Dense vectors for exact cosine top-k; rows align with chunk_ids."""

    chunk_ids: list[str]
    vectors: np.ndarray  # (n_chunks, dim) float32
    metric: str = "cosine"

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise IndexingError("vectors must be a 2-d array")
        if len(self.chunk_ids) != self.vectors.shape[0]:
            raise IndexingError("chunk_ids and vectors disagree on count")
        if self.vectors.size and not np.isfinite(self.vectors).all():
            raise IndexingError("non-finite vector values")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.size else 0


def build_vector_index(chunks: list[ChunkNode], embedder) -> VectorIndex:
    """Embed every chunk's primary text; all vectors must share one dimension.

    Sentence-window nodes are embedded by their sentence, not the window: the
    window is substituted only after retrieval.
    """
    if not chunks:
        raise IndexingError("cannot build an index over zero chunks")
    vectors = []
    dim = None
    for chunk in chunks:
        try:
            vec = embedder.embed([chunk.text])[0]
        except Exception as exc:
            raise IndexingError(f"embedding failed for chunk {chunk.chunk_id!r}: {exc}") from exc
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise IndexingError(
                f"dimension mismatch at chunk {chunk.chunk_id!r}: got {len(vec)}, expected {dim}"
            )
        vectors.append(vec)
    return VectorIndex(
        chunk_ids=[c.chunk_id for c in chunks],
        vectors=np.asarray(vectors, dtype=np.float32),
    )


@dataclass
class IndexBundle:
    """Chunk store plus whichever indexes were built over it."""

    chunks: list[ChunkNode]
    bm25: InvertedIndex | None = None
    vectors: VectorIndex | None = None

    def chunk_map(self) -> dict[str, ChunkNode]:
        return {c.chunk_id: c for c in self.chunks}


def _chunk_store_bytes(chunks: list[ChunkNode]) -> bytes:
    lines = []
    for c in chunks:
        obj = {
            "chunk_id": c.chunk_id,
            "doc_id": c.doc_id,
            "text": c.text,
            "token_span": list(c.token_span),
            "window_text": c.window_text,
        }
        lines.append(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def _bm25_bytes(index: InvertedIndex | None) -> bytes:
    if index is None:
        return b""
    obj = {
        "postings": {t: index.postings[t] for t in sorted(index.postings)},
        "chunk_len": {c: index.chunk_len[c] for c in sorted(index.chunk_len)},
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def save_index(path, bundle: IndexBundle) -> None:
    """Write a versioned, checksummed index directory.

    Layout: manifest.json, chunks.jsonl, bm25.json (optional), vectors.f32
    (little-endian float32 rows, optional) + vector_ids.json.
    """
    os.makedirs(path, exist_ok=True)
    chunk_bytes = _chunk_store_bytes(bundle.chunks)
    bm25_bytes = _bm25_bytes(bundle.bm25)
    if bundle.vectors is not None:
        vec_bytes = np.ascontiguousarray(bundle.vectors.vectors, dtype="<f4").tobytes()
        vec_ids_bytes = json.dumps(bundle.vectors.chunk_ids).encode("utf-8")
    else:
        vec_bytes = b""
        vec_ids_bytes = b""

    digest = hashlib.sha256()
    for blob in (chunk_bytes, bm25_bytes, vec_bytes, vec_ids_bytes):
        digest.update(blob)
        digest.update(b"\x00")

    manifest = {
        "version": INDEX_FORMAT_VERSION,
        "chunk_count": len(bundle.chunks),
        "embed_dim": bundle.vectors.dim if bundle.vectors is not None else 0,
        "metric": bundle.vectors.metric if bundle.vectors is not None else "none",
        "checksum": digest.hexdigest(),
        "has_bm25": bundle.bm25 is not None,
        "has_vectors": bundle.vectors is not None,
    }
    with open(os.path.join(path, "chunks.jsonl"), "wb") as fh:
        fh.write(chunk_bytes)
    with open(os.path.join(path, "bm25.json"), "wb") as fh:
        fh.write(bm25_bytes)
    with open(os.path.join(path, "vectors.f32"), "wb") as fh:
        fh.write(vec_bytes)
    with open(os.path.join(path, "vector_ids.json"), "wb") as fh:
        fh.write(vec_ids_bytes)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_index(path) -> IndexBundle:
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != INDEX_FORMAT_VERSION:
        raise IndexingError(
            f"index format version {manifest.get('version')} != {INDEX_FORMAT_VERSION}"
        )
    blobs = {}
    for name in ("chunks.jsonl", "bm25.json", "vectors.f32", "vector_ids.json"):
        with open(os.path.join(path, name), "rb") as fh:
            blobs[name] = fh.read()
    digest = hashlib.sha256()
    for name in ("chunks.jsonl", "bm25.json", "vectors.f32", "vector_ids.json"):
        digest.update(blobs[name])
        digest.update(b"\x00")
    if digest.hexdigest() != manifest["checksum"]:
        raise IndexingError("index checksum mismatch; files are corrupted or edited")

    chunks = []
    for raw in blobs["chunks.jsonl"].split(b"\n"):
        if not raw.strip():
            continue
        obj = json.loads(raw.decode("utf-8"))
        chunks.append(
            ChunkNode(
                chunk_id=obj["chunk_id"], doc_id=obj["doc_id"], text=obj["text"],
                token_span=tuple(obj["token_span"]), window_text=obj["window_text"],
            )
        )
    if len(chunks) != manifest["chunk_count"]:
        raise IndexingError("chunk count disagrees with manifest")

    bm25 = None
    if manifest["has_bm25"]:
        obj = json.loads(blobs["bm25.json"].decode("utf-8"))
        bm25 = InvertedIndex(
            postings={t: [(cid, tf) for cid, tf in rows] for t, rows in obj["postings"].items()},
            chunk_len=dict(obj["chunk_len"]),
        )

    vectors = None
    if manifest["has_vectors"]:
        chunk_ids = json.loads(blobs["vector_ids.json"].decode("utf-8"))
        dim = manifest["embed_dim"]
        arr = np.frombuffer(blobs["vectors.f32"], dtype="<f4")
        if dim > 0:
            arr = arr.reshape(-1, dim)
        else:
            arr = arr.reshape(0, 0)
        vectors = VectorIndex(chunk_ids=chunk_ids, vectors=np.array(arr), metric=manifest["metric"])

    return IndexBundle(chunks=chunks, bm25=bm25, vectors=vectors)
