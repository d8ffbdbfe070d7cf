"""Independent oracle implementations for cross-checking the library.

Everything here is written against the metric definitions directly, using
naive loops and full-matrix algorithms, on purpose sharing no code with the
package under test.
"""

from __future__ import annotations

import math
import re


# --- retrieval ranking metrics ---------------------------------------------

def conr_oracle(retrieved: list[str], golden: set[str]) -> dict:
    hits = [d for d in retrieved if d in golden]
    precision = len(hits) / len(retrieved) if retrieved else 0.0
    recall = len(hits) / len(golden)
    f1 = 0.0
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    em = 1.0 if all(g in retrieved for g in golden) else 0.0
    mrr = 0.0
    for rank, d in enumerate(retrieved, start=1):
        if d in golden:
            mrr = 1.0 / rank
            break
    hit1 = 1.0 if any(d in golden for d in retrieved[:1]) else 0.0
    hit10 = 1.0 if any(d in golden for d in retrieved[:10]) else 0.0
    ap = 0.0
    for rank, d in enumerate(retrieved, start=1):
        if d in golden:
            rel_so_far = sum(1 for x in retrieved[:rank] if x in golden)
            ap += rel_so_far / rank
    ap /= len(golden)
    dcg = 0.0
    for rank, d in enumerate(retrieved, start=1):
        if d in golden:
            dcg += 1.0 / math.log2(rank + 1)
    idcg = 0.0
    for rank in range(1, min(len(golden), len(retrieved)) + 1):
        idcg += 1.0 / math.log2(rank + 1)
    ndcg = dcg / idcg if idcg > 0 else 0.0
    return {"f1": f1, "em": em, "mrr": mrr, "hit_at_1": hit1, "hit_at_10": hit10,
            "map": ap, "dcg": dcg, "idcg": idcg, "ndcg": ndcg}


# --- text metrics -----------------------------------------------------------

def _grams(seq, n):
    out = {}
    for i in range(len(seq) - n + 1):
        g = tuple(seq[i : i + n])
        out[g] = out.get(g, 0) + 1
    return out


def _order_pr(hyp_seq, ref_seq, n):
    h = _grams(hyp_seq, n)
    r = _grams(ref_seq, n)
    th = sum(h.values())
    tr = sum(r.values())
    if th == 0 and tr == 0:
        return None
    match = 0
    for g, c in h.items():
        match += min(c, r.get(g, 0))
    return (match / th if th else 0.0, match / tr if tr else 0.0)


def chrf_oracle(hyp: str, ref: str, max_n: int = 6, beta: float = 2.0,
                word_n: int = 0) -> float:
    hyp_chars = list(re.sub(r"\s+", "", hyp))
    ref_chars = list(re.sub(r"\s+", "", ref))
    ps, rs = [], []
    for n in range(1, max_n + 1):
        pr = _order_pr(hyp_chars, ref_chars, n)
        if pr is not None:
            ps.append(pr[0])
            rs.append(pr[1])
    for n in range(1, word_n + 1):
        pr = _order_pr(hyp.split(), ref.split(), n)
        if pr is not None:
            ps.append(pr[0])
            rs.append(pr[1])
    if not ps:
        return 0.0
    p = sum(ps) / len(ps)
    r = sum(rs) / len(rs)
    if beta * beta * p + r == 0:
        return 0.0
    return (1 + beta * beta) * p * r / (beta * beta * p + r)


def _words(text: str) -> list[str]:
    return re.findall(r"[0-9a-z]+", text.lower())


def rouge_n_oracle(hyp: str, ref: str, n: int) -> float:
    pr = _order_pr(_words(hyp), _words(ref), n)
    if pr is None:
        return 0.0
    p, r = pr
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def lcs_oracle(a: list[str], b: list[str]) -> int:
    # Full-matrix DP, deliberately different from the two-row version.
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_l_oracle(hyp: str, ref: str) -> float:
    h = _words(hyp)
    r = _words(ref)
    lcs = lcs_oracle(h, r)
    if lcs == 0:
        return 0.0
    p = lcs / len(h)
    rec = lcs / len(r)
    return 2 * p * rec / (p + rec)


def edit_distance_oracle(a, b) -> int:
    # Full-matrix Wagner-Fischer.
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + cost)
    return table[-1][-1]


# --- fusion and retrieval ---------------------------------------------------

def rrf_oracle(rankings: list[list[str]], kappa: float) -> list[tuple[str, float]]:
    """Fused (id, score) sorted by (-score, best rank anywhere, id)."""
    score: dict[str, float] = {}
    best: dict[str, int] = {}
    for ranking in rankings:
        for rank, d in enumerate(ranking, start=1):
            score[d] = score.get(d, 0.0) + 1.0 / (kappa + rank)
            best[d] = min(best.get(d, rank), rank)
    order = sorted(score, key=lambda d: (-score[d], best[d], d))
    return [(d, score[d]) for d in order]


def cosine_topk_oracle(ids: list[str], vectors: list[list[float]],
                       query: list[float], k: int) -> list[tuple[str, float]]:
    qn = math.sqrt(sum(x * x for x in query))
    scored = []
    for cid, vec in zip(ids, vectors):
        vn = math.sqrt(sum(x * x for x in vec))
        if qn == 0 or vn == 0:
            sim = 0.0
        else:
            sim = sum(a * b for a, b in zip(vec, query)) / (qn * vn)
        scored.append((cid, sim))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def bm25_oracle(chunk_texts: dict[str, str], query: str,
                k1: float = 1.2, b: float = 0.75) -> dict[str, float]:
    """Direct-formula BM25 recomputed from raw texts."""
    tokens = {cid: _words(text) for cid, text in chunk_texts.items()}
    n_chunks = len(tokens)
    avg = sum(len(t) for t in tokens.values()) / n_chunks
    df: dict[str, int] = {}
    for toks in tokens.values():
        for term in set(toks):
            df[term] = df.get(term, 0) + 1
    scores = {}
    q_terms = _words(query)
    for cid, toks in tokens.items():
        dl = len(toks)
        s = 0.0
        for term in q_terms:
            tf = toks.count(term)
            if tf == 0:
                continue
            n_t = df.get(term, 0)
            idf = math.log(1.0 + (n_chunks - n_t + 0.5) / (n_t + 0.5))
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avg))
        scores[cid] = s
    return scores
