"""Rule-based retrieval metrics, rule-based generation metrics, judge metrics.

Retrieval metrics work on document-ID lists with binary relevance. Generation
metrics are pure text functions in [0,1] except WER/CER (unbounded above) and
perplexity. Judge metrics call a chat provider and honestly account for parse
and request failures via per-trial success counts.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .data_model import QARecord
from .providers import ChatRequest
from .textproc import lexical_tokens


# ---------------------------------------------------------------------------
# Retrieval metrics


@dataclass(frozen=True)
class ConRScores:
    f1: float
    em: float
    mrr: float
    hit_at_1: float
    hit_at_10: float
    map: float
    ndcg: float
    dcg: float
    idcg: float

    def __post_init__(self):
        for name in ("f1", "em", "mrr", "hit_at_1", "hit_at_10", "map", "ndcg"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")
        if self.dcg > self.idcg + 1e-12:
            raise ValueError("dcg exceeds idcg")
        if self.hit_at_1 > self.hit_at_10:
            raise ValueError("hit@1 exceeds hit@10")


def conr_evaluate(retrieved_ids: list[str], golden_ids: set[str],
                  k_hits: tuple[int, int] = (1, 10)) -> ConRScores:
    """Binary-relevance ranking metrics over retrieved document IDs.

    DCG uses gain 1 and discount log2(rank+1); IDCG places one relevant item at
    each of the first min(|golden|, |retrieved|) ranks. EM is full containment
    of the golden set. AP divides by |golden|, so AP equals RR whenever there is
    a single golden document.
    """
    if not golden_ids:
        raise ValueError("golden_ids must be non-empty")
    if len(set(retrieved_ids)) != len(retrieved_ids):
        raise ValueError("retrieved_ids must be duplicate-free")
    rel = [1 if rid in golden_ids else 0 for rid in retrieved_ids]
    hits = sum(rel)
    precision = hits / len(retrieved_ids) if retrieved_ids else 0.0
    recall = hits / len(golden_ids)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    em = 1.0 if golden_ids <= set(retrieved_ids) else 0.0

    mrr = 0.0
    for i, r in enumerate(rel, start=1):
        if r:
            mrr = 1.0 / i
            break

    def hit_at(k: int) -> float:
        return 1.0 if any(rel[:k]) else 0.0

    ap = 0.0
    seen = 0
    for i, r in enumerate(rel, start=1):
        if r:
            seen += 1
            ap += seen / i
    ap /= len(golden_ids)

    dcg = sum(r / math.log2(i + 1) for i, r in enumerate(rel, start=1))
    ideal_len = min(len(golden_ids), len(retrieved_ids))
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, ideal_len + 1))
    ndcg = dcg / idcg if idcg > 0 else 0.0

    return ConRScores(f1=f1, em=em, mrr=mrr, hit_at_1=hit_at(k_hits[0]),
                      hit_at_10=hit_at(k_hits[1]), map=ap, ndcg=ndcg, dcg=dcg, idcg=idcg)


# ---------------------------------------------------------------------------
# Generation metrics


@dataclass(frozen=True)
class ConGScores:
    chrf: float
    chrf_pp: float
    meteor: float
    rouge1: float
    rouge2: float
    rougel: float
    wer: float
    cer: float
    ppl: float | None  # None when the scoring provider lacks logprobs


_WS = re.compile(r"\s+")


def _ngram_counts(units, n: int) -> Counter:
    return Counter(tuple(units[i : i + n]) for i in range(len(units) - n + 1))


def _overlap_pr(hyp_units, ref_units, n: int) -> tuple[float, float, bool]:
    """Clipped n-gram precision/recall; third value is False when both sides are empty."""
    h = _ngram_counts(hyp_units, n)
    r = _ngram_counts(ref_units, n)
    total_h = sum(h.values())
    total_r = sum(r.values())
    if total_h == 0 and total_r == 0:
        return 0.0, 0.0, False
    match = sum(min(c, r[g]) for g, c in h.items())
    p = match / total_h if total_h else 0.0
    rec = match / total_r if total_r else 0.0
    return p, rec, True


def _f_beta(p: float, r: float, beta: float) -> float:
    denom = beta * beta * p + r
    if denom == 0:
        return 0.0
    return (1 + beta * beta) * p * r / denom


def chrf(hypothesis: str, reference: str, max_char_n: int = 6, beta: float = 2.0) -> float:
    """Character n-gram F-beta, whitespace removed, macro-averaged over orders."""
    if not reference:
        raise ValueError("reference must be non-empty")
    hyp = _WS.sub("", hypothesis)
    ref = _WS.sub("", reference)
    precisions, recalls = [], []
    for n in range(1, max_char_n + 1):
        p, r, present = _overlap_pr(list(hyp), list(ref), n)
        if present:
            precisions.append(p)
            recalls.append(r)
    if not precisions:
        return 0.0
    return _f_beta(sum(precisions) / len(precisions), sum(recalls) / len(recalls), beta)


def chrf_pp(hypothesis: str, reference: str, max_char_n: int = 6,
            max_word_n: int = 2, beta: float = 2.0) -> float:
    """chrF plus word 1- and 2-gram components, all orders weighted uniformly."""
    if not reference:
        raise ValueError("reference must be non-empty")
    hyp_chars = list(_WS.sub("", hypothesis))
    ref_chars = list(_WS.sub("", reference))
    hyp_words = hypothesis.split()
    ref_words = reference.split()
    precisions, recalls = [], []
    for n in range(1, max_char_n + 1):
        p, r, present = _overlap_pr(hyp_chars, ref_chars, n)
        if present:
            precisions.append(p)
            recalls.append(r)
    for n in range(1, max_word_n + 1):
        p, r, present = _overlap_pr(hyp_words, ref_words, n)
        if present:
            precisions.append(p)
            recalls.append(r)
    if not precisions:
        return 0.0
    return _f_beta(sum(precisions) / len(precisions), sum(recalls) / len(recalls), beta)


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for h, r in pairs:
        if prev is None or h != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (h, r)
    return chunks


def _greedy_alignment(hyp: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Maximal matching that prefers continuing the current run; used as a bound."""
    hyp_counts = Counter(hyp)
    ref_counts = Counter(ref)
    need = {w: min(hyp_counts[w], ref_counts[w]) for w in hyp_counts if w in ref_counts}
    avail: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        if w in need:
            avail.setdefault(w, []).append(j)
    pairs: list[tuple[int, int]] = []
    last_r = None
    for i, w in enumerate(hyp):
        if need.get(w, 0) <= 0:
            continue
        slots = avail[w]
        if not slots:
            continue
        j = last_r + 1 if last_r is not None and last_r + 1 in slots else slots[0]
        slots.remove(j)
        pairs.append((i, j))
        need[w] -= 1
        last_r = j
    return pairs


def _min_chunk_alignment(hyp: list[str], ref: list[str],
                         node_cap: int = 200_000) -> tuple[int, int]:
    """(matches, chunks) of a maximum matching with the fewest chunks.

    Exhaustive branch-and-bound over per-word position assignments; falls back
    to the greedy alignment's chunk count if the search exceeds node_cap.
    """
    hyp_counts = Counter(hyp)
    ref_counts = Counter(ref)
    m = sum(min(c, ref_counts[w]) for w, c in hyp_counts.items() if w in ref_counts)
    if m == 0:
        return 0, 0

    greedy_pairs = _greedy_alignment(hyp, ref)
    best = _chunk_count(sorted(greedy_pairs))

    need = {w: min(hyp_counts[w], ref_counts[w]) for w in hyp_counts if w in ref_counts}
    ref_slots: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        if w in need:
            ref_slots.setdefault(w, []).append(j)
    hyp_left = Counter(w for w in hyp if w in need)

    state = {"nodes": 0, "best": best, "capped": False}

    def dfs(i: int, remaining: int, last: tuple[int, int] | None,
            chunks: int, need_now: dict, used: set) -> None:
        if state["capped"] or chunks >= state["best"]:
            return
        state["nodes"] += 1
        if state["nodes"] > node_cap:
            state["capped"] = True
            return
        if remaining == 0:
            state["best"] = min(state["best"], chunks)
            return
        if i >= len(hyp):
            return
        w = hyp[i]
        if w in need_now:
            hyp_left[w] -= 1
            can_skip = hyp_left[w] >= need_now[w]
            if need_now[w] > 0:
                for j in ref_slots[w]:
                    if j in used:
                        continue
                    extends = last is not None and i == last[0] + 1 and j == last[1] + 1
                    used.add(j)
                    need_now[w] -= 1
                    dfs(i + 1, remaining - 1, (i, j),
                        chunks + (0 if extends else 1), need_now, used)
                    need_now[w] += 1
                    used.remove(j)
            if can_skip:
                dfs(i + 1, remaining, last, chunks, need_now, used)
            hyp_left[w] += 1
        else:
            dfs(i + 1, remaining, last, chunks, need_now, used)

    dfs(0, m, None, 0, dict(need), set())
    return m, state["best"]


def meteor(hypothesis: str, reference: str, alpha: float = 0.9,
           beta_pen: float = 3.0, gamma: float = 0.5) -> float:
    """Exact-match unigram METEOR: F-mean times a fragmentation penalty.

    Alignment is over lowercase alphanumeric tokens, maximizes matches, then
    minimizes contiguous chunk count. No stemming or synonym stage: matching is
    exact, which means short identical answers are still penalized
    (hyp == ref == "yes" scores 0.5).
    """
    if not reference:
        raise ValueError("reference must be non-empty")
    hyp = lexical_tokens(hypothesis)
    ref = lexical_tokens(reference)
    if not hyp:
        return 0.0
    m, chunks = _min_chunk_alignment(hyp, ref)
    if m == 0:
        return 0.0
    p = m / len(hyp)
    r = m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / m) ** beta_pen
    return f_mean * (1 - penalty)


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge(hypothesis: str, reference: str, variant: str) -> float:
    """ROUGE F1 over lowercase word tokens: clipped n-grams for 1/2, LCS for L."""
    if not reference:
        raise ValueError("reference must be non-empty")
    if variant not in ("1", "2", "L"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    hyp = lexical_tokens(hypothesis)
    ref = lexical_tokens(reference)
    if variant in ("1", "2"):
        p, r, present = _overlap_pr(hyp, ref, int(variant))
        if not present:
            return 0.0
        return 2 * p * r / (p + r) if p + r > 0 else 0.0
    lcs = _lcs_len(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def _levenshtein(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cost = 0 if x == y else 1
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def edit_error_rate(hypothesis: str, reference: str, unit: str) -> float:
    """Levenshtein distance over words or characters, divided by reference length."""
    if unit == "word":
        hyp, ref = hypothesis.split(), reference.split()
    elif unit == "char":
        hyp, ref = list(hypothesis), list(reference)
    else:
        raise ValueError(f"unknown unit {unit!r}")
    if not ref:
        raise ValueError("reference is empty at the chosen unit")
    return _levenshtein(hyp, ref) / len(ref)


def perplexity(logprobs: list[float]) -> float:
    """exp(-mean(logprobs)) over natural-log token probabilities."""
    if not logprobs:
        raise ValueError("logprobs must be non-empty")
    if any(lp > 0 for lp in logprobs):
        raise ValueError("logprobs must all be <= 0")
    return math.exp(-sum(logprobs) / len(logprobs))


def cong_evaluate(hypothesis: str, reference: str,
                  logprob_provider=None) -> ConGScores:
    """All generation metrics for one (response, reference) pair."""
    ppl = None
    if logprob_provider is not None and hypothesis:
        try:
            ppl = perplexity(logprob_provider.token_logprobs(hypothesis))
        except Exception:  # noqa: BLE001 - capability gaps are reported, not fatal
            ppl = None
    return ConGScores(
        chrf=chrf(hypothesis, reference),
        chrf_pp=chrf_pp(hypothesis, reference),
        meteor=meteor(hypothesis, reference),
        rouge1=rouge(hypothesis, reference, "1"),
        rouge2=rouge(hypothesis, reference, "2"),
        rougel=rouge(hypothesis, reference, "L"),
        wer=edit_error_rate(hypothesis, reference, "word"),
        cer=edit_error_rate(hypothesis, reference, "char"),
        ppl=ppl,
    )


# ---------------------------------------------------------------------------
# Judge metrics


class MissingFieldError(ValueError):
    """The record lacks a field the metric's signature requires."""


@dataclass(frozen=True)
class CogLMetricSpec:
    metric_id: str
    category: str  # retrieval | generation | combined
    params: tuple[str, ...]
    instruction: str


_Q = "question"
_RC = "retrieval_context"
_GC = "golden_context"
_AR = "actual_response"
_EA = "expected_answer"

COGL_METRICS: dict[str, CogLMetricSpec] = {
    spec.metric_id: spec
    for spec in [
        CogLMetricSpec("Up-CRel", "retrieval", (_Q, _RC),
                       "Rate whether the retrieved context contains enough "
                       "information to answer the question."),
        CogLMetricSpec("Up-CCns", "retrieval", (_Q, _GC, _RC),
                       "Rate how clear, brief, and to the point the retrieved "
                       "context is relative to the reference context."),
        CogLMetricSpec("Dp-ARel", "generation", (_Q, _AR),
                       "Rate how relevant the system response is to the question."),
        CogLMetricSpec("Up-RCmp", "generation", (_Q, _AR),
                       "Rate whether the system response answers every aspect "
                       "of the question."),
        CogLMetricSpec("Up-RCnc", "generation", (_Q, _AR),
                       "Rate whether the system response avoids information "
                       "irrelevant to the question."),
        CogLMetricSpec("Up-RRel", "generation", (_Q, _AR),
                       "Rate how well the system response stays on the "
                       "question's topic without digressions."),
        CogLMetricSpec("Up-RVal", "generation", (_Q, _AR),
                       "Rate whether the system produced a substantive answer "
                       "rather than a non-answer or refusal."),
        CogLMetricSpec("Up-RMch", "generation", (_Q, _AR, _EA),
                       "Rate how well the system response matches the "
                       "reference answer."),
        CogLMetricSpec("Dp-CPre", "combined", (_Q, _AR, _EA, _RC),
                       "Rate whether context passages relevant to the question "
                       "are ranked above irrelevant ones."),
        CogLMetricSpec("Dp-CRec", "combined", (_Q, _AR, _EA, _RC),
                       "Rate how much of the information needed for the "
                       "reference answer appears in the retrieved context."),
        CogLMetricSpec("Dp-CRel", "combined", (_Q, _AR, _RC),
                       "Rate the overall relevance of the retrieved context "
                       "to the question."),
        CogLMetricSpec("Up-RCns", "combined", (_Q, _AR, _RC),
                       "Rate how consistent the system response is with both "
                       "the question and the retrieved context."),
        CogLMetricSpec("Up-CUti", "combined", (_Q, _AR, _RC),
                       "Rate how thoroughly the system response makes use of "
                       "the retrieved context."),
        CogLMetricSpec("Up-FAcc", "combined", (_Q, _AR, _RC),
                       "Rate whether claims in the system response are "
                       "supported by the retrieved context."),
        CogLMetricSpec("Dp-Fath", "combined", (_Q, _AR, _RC),
                       "Rate whether the system response factually aligns "
                       "with the retrieved context."),
        CogLMetricSpec("Dp-Hall", "combined", (_Q, _AR, _GC),
                       "Rate whether the system response avoids statements "
                       "contradicting the reference context."),
    ]
}

_PARAM_LABELS = {
    _Q: "Question",
    _RC: "Retrieved context",
    _GC: "Reference context",
    _AR: "System response",
    _EA: "Reference answer",
}

_SCORE_LINE = re.compile(r"^\s*SCORE:\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*$",
                         re.MULTILINE)


@dataclass
class CogLScore:
    metric_id: str
    value: float | None
    raw_text: str
    success: bool

    def __post_init__(self):
        if self.success != (self.value is not None):
            raise ValueError("value must be present exactly when parse succeeded")


def _param_values(spec: CogLMetricSpec, record: QARecord) -> dict[str, str]:
    values: dict[str, str] = {}
    for param in spec.params:
        if param == _Q:
            text = record.user_query
        elif param == _RC:
            text = "\n\n".join(record.retrieval_context)
        elif param == _GC:
            text = "\n\n".join(record.golden_context)
        elif param == _AR:
            text = record.actual_response or ""
        elif param == _EA:
            text = record.expected_answer
        else:  # pragma: no cover
            raise ValueError(f"unknown param {param!r}")
        if not text:
            raise MissingFieldError(
                f"{spec.metric_id} requires {param} but record "
                f"{record.record_id!r} does not carry it"
            )
        values[param] = text
    return values


def build_judge_prompt(metric_id: str, record: QARecord,
                       judge_templates: dict[str, str] | None = None) -> str:
    """The judge prompt for one metric: exactly its signature parameters."""
    spec = COGL_METRICS.get(metric_id)
    if spec is None:
        raise ValueError(f"unknown judge metric {metric_id!r}")
    values = _param_values(spec, record)
    override = (judge_templates or {}).get(metric_id)
    if override is not None:
        prompt = override
        for param, text in values.items():
            prompt = prompt.replace("{" + param + "}", text)
        return prompt
    lines = [
        "You are grading one aspect of a retrieval-augmented question answering system.",
        spec.instruction,
        "",
    ]
    for param in spec.params:
        lines.append(f"{_PARAM_LABELS[param]}:")
        lines.append(values[param])
        lines.append("")
    lines.append("Give a score between 0 and 1. Answer with a single line of the form")
    lines.append("SCORE: <value>")
    return "\n".join(lines)


def cogl_evaluate(metric_id: str, record: QARecord, judge,
                  judge_templates: dict[str, str] | None = None,
                  max_tokens: int = 64, context_window: int = 4096) -> CogLScore:
    """Run one judge metric on one record; parse or request failure counts against P_sc."""
    prompt = build_judge_prompt(metric_id, record, judge_templates)
    tokens = prompt.split()
    budget = context_window - max_tokens
    if len(tokens) > budget:
        prompt = " ".join(tokens[:budget])
    exchange = judge.complete(
        ChatRequest(messages=(("user", prompt),), max_tokens=max_tokens,
                    context_window=context_window)
    )
    if not exchange.success:
        return CogLScore(metric_id=metric_id, value=None,
                         raw_text=exchange.error, success=False)
    m = _SCORE_LINE.search(exchange.response_text)
    if not m:
        return CogLScore(metric_id=metric_id, value=None,
                         raw_text=exchange.response_text, success=False)
    value = float(m.group(1))
    if not 0.0 <= value <= 1.0:
        return CogLScore(metric_id=metric_id, value=None,
                         raw_text=exchange.response_text, success=False)
    return CogLScore(metric_id=metric_id, value=value,
                     raw_text=exchange.response_text, success=True)


@dataclass
class CogLAggregate:
    """Trial-averaged judge metric with request-success accounting."""

    value: float | None
    p_sc_pct: float
    unavailable: bool
    trial_means: list[float] = field(default_factory=list)
    per_trial_p_sc: list[int] = field(default_factory=list)


def aggregate_cogl(per_trial_scores: list[list[CogLScore]]) -> CogLAggregate:
    """Mean of per-trial means, each trial averaged over its successful requests.

    A trial with zero successes is flagged and excluded, never counted as zero;
    the metric is unavailable only if every trial failed entirely.
    """
    if not per_trial_scores:
        raise ValueError("need at least one trial")
    trial_means: list[float] = []
    per_trial_p_sc: list[int] = []
    pct_sum = 0.0
    for trial in per_trial_scores:
        successes = [s.value for s in trial if s.success]
        p_sc = len(successes)
        per_trial_p_sc.append(p_sc)
        e_sp = len(trial)
        pct_sum += 100.0 * p_sc / e_sp if e_sp else 0.0
        if p_sc > 0:
            trial_means.append(sum(successes) / p_sc)
    unavailable = not trial_means
    value = sum(trial_means) / len(trial_means) if trial_means else None
    return CogLAggregate(value=value, p_sc_pct=pct_sum / len(per_trial_scores),
                         unavailable=unavailable, trial_means=trial_means,
                         per_trial_p_sc=per_trial_p_sc)
