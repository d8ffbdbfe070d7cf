"""Unified benchmark records, corpus documents, and the trial sampling plan.

Datasets and corpora are newline-delimited JSON (one object per line, UTF-8).
Loaded collections are immutable by convention: a run writes a new file instead
of mutating its input.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field, replace


class DatasetError(ValueError):
    """Malformed dataset/corpus input; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


_RECORD_FIELDS = (
    "record_id",
    "user_query",
    "golden_context",
    "golden_context_ids",
    "retrieval_context",
    "retrieval_context_ids",
    "actual_response",
    "expected_answer",
    "tags",
)
_REQUIRED_FIELDS = _RECORD_FIELDS[:4]


@dataclass
class QARecord:
    """One benchmark row: query, golden context with IDs, run outputs, reference."""

    record_id: str
    user_query: str
    golden_context: list[str]
    golden_context_ids: list[str]
    retrieval_context: list[str] = field(default_factory=list)
    retrieval_context_ids: list[str] = field(default_factory=list)
    actual_response: str | None = None
    expected_answer: str = ""
    tags: set[str] = field(default_factory=set)

    def validate(self) -> None:
        if not self.record_id:
            raise DatasetError("empty record_id")
        if len(self.golden_context) != len(self.golden_context_ids):
            raise DatasetError(
                f"record {self.record_id!r}: golden_context has "
                f"{len(self.golden_context)} passages but "
                f"{len(self.golden_context_ids)} ids"
            )
        if len(self.retrieval_context) != len(self.retrieval_context_ids):
            raise DatasetError(
                f"record {self.record_id!r}: retrieval_context has "
                f"{len(self.retrieval_context)} passages but "
                f"{len(self.retrieval_context_ids)} ids"
            )
        if not self.golden_context:
            raise DatasetError(f"record {self.record_id!r}: golden_context is empty")
        if any(not gid for gid in self.golden_context_ids):
            raise DatasetError(f"record {self.record_id!r}: empty golden_context_id")
        if len(set(self.golden_context_ids)) != len(self.golden_context_ids):
            raise DatasetError(f"record {self.record_id!r}: duplicate golden_context_ids")

    def copy(self) -> "QARecord":
        return replace(
            self,
            golden_context=list(self.golden_context),
            golden_context_ids=list(self.golden_context_ids),
            retrieval_context=list(self.retrieval_context),
            retrieval_context_ids=list(self.retrieval_context_ids),
            tags=set(self.tags),
        )


@dataclass(frozen=True)
class CorpusDocument:
    doc_id: str
    text: str
    title: str | None = None
    source: str | None = None


@dataclass(frozen=True)
class SamplingPlan:
    """E_no trials of E_sp sampled records each, reproducible from the seed."""

    e_sp: int
    e_no: int
    seed: int

    def validate(self) -> None:
        if self.e_sp <= 0:
            raise ValueError(f"e_sp must be positive, got {self.e_sp}")
        if self.e_no <= 0:
            raise ValueError(f"e_no must be positive, got {self.e_no}")


def _record_from_obj(obj: dict, line: int) -> QARecord:
    if not isinstance(obj, dict):
        raise DatasetError("record is not an object", line)
    unknown = set(obj) - set(_RECORD_FIELDS)
    if unknown:
        raise DatasetError(f"unknown fields {sorted(unknown)}", line)
    for name in _REQUIRED_FIELDS:
        if name not in obj:
            raise DatasetError(f"missing required field {name!r}", line)
    rec = QARecord(
        record_id=obj["record_id"],
        user_query=obj["user_query"],
        golden_context=list(obj["golden_context"]),
        golden_context_ids=list(obj["golden_context_ids"]),
        retrieval_context=list(obj.get("retrieval_context", [])),
        retrieval_context_ids=list(obj.get("retrieval_context_ids", [])),
        actual_response=obj.get("actual_response"),
        expected_answer=obj.get("expected_answer", ""),
        tags=set(obj.get("tags", [])),
    )
    rec.validate()
    return rec


def parse_records(data: bytes) -> list[QARecord]:
    """Parse newline-delimited JSON records, in file order.

    Raises DatasetError with the offending line number on malformed input,
    and on duplicate record_ids across the stream.
    """
    records: list[QARecord] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetError(f"malformed record: {exc}", lineno) from exc
        rec = _record_from_obj(obj, lineno)
        if rec.record_id in seen:
            raise DatasetError(f"duplicate record_id {rec.record_id!r}", lineno)
        seen.add(rec.record_id)
        records.append(rec)
    return records


def serialize_records(records: list[QARecord]) -> bytes:
    """Inverse of parse_records; fixed field order, one JSON object per line."""
    lines = []
    for rec in records:
        obj = {
            "record_id": rec.record_id,
            "user_query": rec.user_query,
            "golden_context": rec.golden_context,
            "golden_context_ids": rec.golden_context_ids,
            "retrieval_context": rec.retrieval_context,
            "retrieval_context_ids": rec.retrieval_context_ids,
            "actual_response": rec.actual_response,
            "expected_answer": rec.expected_answer,
            "tags": sorted(rec.tags),
        }
        lines.append(json.dumps(obj, ensure_ascii=False, separators=(", ", ": ")))
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def load_records(path) -> list[QARecord]:
    with open(path, "rb") as fh:
        return parse_records(fh.read())


def save_records(path, records: list[QARecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_records(records))


def load_corpus_bytes(data: bytes) -> list[CorpusDocument]:
    """Parse newline-delimited corpus documents; rejects duplicates and empty text."""
    docs: list[CorpusDocument] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetError(f"malformed document: {exc}", lineno) from exc
        doc_id = obj.get("doc_id")
        text = obj.get("text")
        if not doc_id:
            raise DatasetError("missing doc_id", lineno)
        if doc_id in seen:
            raise DatasetError(f"duplicate doc_id {doc_id!r}", lineno)
        if not text:
            raise DatasetError(f"document {doc_id!r} has empty text", lineno)
        seen.add(doc_id)
        docs.append(
            CorpusDocument(doc_id=doc_id, text=text, title=obj.get("title"), source=obj.get("source"))
        )
    return docs


def load_corpus(path) -> list[CorpusDocument]:
    with open(path, "rb") as fh:
        return load_corpus_bytes(fh.read())


def serialize_corpus(docs: list[CorpusDocument]) -> bytes:
    lines = []
    for doc in docs:
        obj: dict = {"doc_id": doc.doc_id, "text": doc.text}
        if doc.title is not None:
            obj["title"] = doc.title
        if doc.source is not None:
            obj["source"] = doc.source
        lines.append(json.dumps(obj, ensure_ascii=False, separators=(", ", ": ")))
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def save_corpus(path, docs: list[CorpusDocument]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_corpus(docs))


def corpus_manifest(docs: list[CorpusDocument]) -> dict:
    """Document count plus a content checksum, for corpus provenance files."""
    digest = hashlib.sha256()
    for doc in docs:
        digest.update(doc.doc_id.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(doc.text.encode("utf-8"))
        digest.update(b"\x00")
    return {"document_count": len(docs), "checksum": digest.hexdigest()}


def cross_validate(records: list[QARecord], docs: list[CorpusDocument]) -> list[tuple[str, str]]:
    """All (record_id, golden_id) pairs whose golden id does not resolve in the corpus."""
    known = {doc.doc_id for doc in docs}
    dangling = []
    for rec in records:
        for gid in rec.golden_context_ids:
            if gid not in known:
                dangling.append((rec.record_id, gid))
    return dangling


def sample_records(dataset: list[QARecord], plan: SamplingPlan) -> list[list[QARecord]]:
    """Draw e_no batches of e_sp records, deterministic in (dataset order, plan).

    Batches are disjoint when e_sp * e_no fits in the dataset; otherwise records
    may repeat across batches but never within one batch.
    """
    plan.validate()
    n = len(dataset)
    if plan.e_sp > n:
        raise ValueError(f"e_sp={plan.e_sp} exceeds dataset size {n}")
    rng = random.Random(plan.seed)
    if plan.e_sp * plan.e_no <= n:
        order = list(range(n))
        rng.shuffle(order)
        return [
            [dataset[j] for j in order[i * plan.e_sp : (i + 1) * plan.e_sp]]
            for i in range(plan.e_no)
        ]
    return [
        [dataset[j] for j in rng.sample(range(n), plan.e_sp)]
        for _ in range(plan.e_no)
    ]
