"""Shared text primitives: whitespace tokens, lexical tokens, sentence splitting.

Tokens here are deliberately model-agnostic: a "token" is a whitespace-delimited
unit for counting/chunking, and a lowercase alphanumeric run for lexical matching.
No subword vocabulary is involved anywhere in the harness.
"""

from __future__ import annotations

import re

_LEXICAL = re.compile(r"[0-9a-z]+")

# Common abbreviations that end with a period but do not end a sentence.
_ABBREVIATIONS = frozenset(
    {
        "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc",
        "fig", "no", "inc", "ltd", "co", "dept", "est", "approx",
        "e.g", "i.e", "u.s", "u.k", "a.m", "p.m",
    }
)

_SENT_END = (".", "?", "!")
_CLOSERS = "\"')]}"


def ws_tokens(text: str) -> list[str]:
    return text.split()


def count_tokens(text: str) -> int:
    """Token count used for chunk sizing and context-window budgeting."""
    return len(text.split())


def lexical_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric runs; the tokenization for BM25 and word metrics."""
    return _LEXICAL.findall(text.lower())


def _ends_sentence(token: str, next_token: str | None) -> bool:
    stripped = token.rstrip(_CLOSERS)
    if not stripped or not stripped.endswith(_SENT_END):
        return False
    if stripped.endswith("."):
        word = stripped[:-1].rstrip(_CLOSERS).lstrip("\"'([{").lower()
        if word in _ABBREVIATIONS:
            return False
        # Single capital letters read as initials ("J. Smith").
        if len(word) == 1 and word.isalpha() and next_token is not None:
            return False
    if next_token is None:
        return True
    head = next_token.lstrip("\"'([{")
    return bool(head) and (head[0].isupper() or head[0].isdigit())


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Sentence boundaries as (start, end) spans over the whitespace tokens.

    Splits after '.', '?' or '!' when followed by a capitalized/numeric token or
    end of text, skipping known abbreviations. Deterministic and dependency-free;
    a stand-in for heavier segmenters, kept replaceable on purpose.
    """
    tokens = text.split()
    if not tokens:
        return []
    spans: list[tuple[int, int]] = []
    start = 0
    for i, tok in enumerate(tokens):
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if _ends_sentence(tok, nxt):
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def split_sentences(text: str) -> list[str]:
    tokens = text.split()
    return [" ".join(tokens[a:b]) for a, b in sentence_spans(text)]
