"""Synthetic corpus/dataset generator for desk-scale, network-free runs.

Each record plants a fact sentence ("The <relation> of <entity> is <value>.")
inside one or two golden documents surrounded by filler; distractor documents
talk about other entities. Everything is a pure function of the seed.
"""

from __future__ import annotations

import random

from .data_model import CorpusDocument, QARecord

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ka ke ki ko ku "
    "la le li lo lu ma me mi mo mu na ne ni no nu pa pe pi po pu "
    "ra re ri ro ru sa se si so su ta te ti to tu va ve vi vo vu "
    "za ze zi zo zu"
).split()

_RELATIONS = (
    "capital", "founder", "emblem", "anthem", "currency", "motto",
    "guardian", "harbor", "festival", "dialect",
)


def _word(rng: random.Random, n_syllables: int) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(n_syllables))


def _entity(rng: random.Random) -> str:
    return _word(rng, rng.randint(2, 3)).capitalize()


def _filler_sentence(rng: random.Random) -> str:
    subject = _word(rng, 2)
    verb = rng.choice(("carries", "borders", "shelters", "echoes", "follows"))
    obj = _word(rng, rng.randint(2, 3))
    place = _word(rng, 2)
    return f"The {subject} {verb} the {obj} near {place.capitalize()}."


def _doc_text(rng: random.Random, fact: str | None, n_sentences: int) -> str:
    sentences = [_filler_sentence(rng) for _ in range(n_sentences)]
    if fact is not None:
        sentences.insert(rng.randrange(len(sentences) + 1), fact)
    return " ".join(sentences)


def generate_synthetic(n_docs: int = 200, n_records: int = 40,
                       seed: int = 0) -> tuple[list[CorpusDocument], list[QARecord]]:
    """Build a corpus and matching QA records; deterministic in the seed."""
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    rng = random.Random(seed)
    docs: list[CorpusDocument] = []
    records: list[QARecord] = []
    doc_counter = 0

    def next_doc_id() -> str:
        nonlocal doc_counter
        doc_id = f"doc{doc_counter:05d}"
        doc_counter += 1
        return doc_id

    for i in range(n_records):
        entity = _entity(rng)
        relation = rng.choice(_RELATIONS)
        value = _word(rng, rng.randint(2, 3)).capitalize()
        fact = f"The {relation} of {entity} is {value}."
        # A third of the records spread the fact across two golden documents.
        two_golden = rng.random() < 0.34
        golden_ids = []
        golden_texts = []
        for part in range(2 if two_golden else 1):
            doc_id = next_doc_id()
            text = _doc_text(rng, fact if part == 0 else
                             f"Records about {entity} mention {value} as its {relation}.",
                             rng.randint(3, 6))
            docs.append(CorpusDocument(doc_id=doc_id, text=text, title=entity))
            golden_ids.append(doc_id)
            golden_texts.append(text)
        tags = {"hard"} if rng.random() < 0.3 else set()
        if two_golden:
            tags.add("multi-hop")
        records.append(
            QARecord(
                record_id=f"q{i:04d}",
                user_query=f"What is the {relation} of {entity}?",
                golden_context=golden_texts,
                golden_context_ids=golden_ids,
                expected_answer=value,
                tags=tags,
            )
        )

    while len(docs) < n_docs:
        docs.append(
            CorpusDocument(
                doc_id=next_doc_id(),
                text=_doc_text(rng, None, rng.randint(3, 7)),
                title=_entity(rng),
            )
        )
    for rec in records:
        rec.validate()
    return docs, records
