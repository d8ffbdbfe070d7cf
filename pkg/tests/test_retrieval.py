import random

import numpy as np
import pytest

from oracles import bm25_oracle, cosine_topk_oracle, rrf_oracle
from ragmark.generation import TemplateSet
from ragmark.indexing import ChunkNode, VectorIndex, build_bm25_index
from ragmark.providers import StubChatProvider
from ragmark.retrieval import (QueryBundle, RankedEntry, RankedList, bm25_retrieve,
                               decompose_query, dense_retrieve, hyde_transform,
                               rewrite_query, rrf_fuse, sentence_window_retrieve,
                               stepback_transform)

TEMPLATES = TemplateSet()


def chunk(cid, text="x", window=None):
    return ChunkNode(chunk_id=cid, doc_id=cid.split("#")[0], text=text,
                     token_span=(0, max(len(text.split()), 1)), window_text=window)


def make_vector_index(vectors):
    ids = [f"c{i:03d}" for i in range(len(vectors))]
    index = VectorIndex(chunk_ids=ids, vectors=np.asarray(vectors, dtype=np.float32))
    cmap = {cid: chunk(cid, text=f"text {cid}") for cid in ids}
    return index, cmap


def test_dense_self_similarity_first():
    vectors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    index, cmap = make_vector_index(vectors)
    ranked = dense_retrieve(index, [0.0, 1.0, 0.0], 2, cmap)
    assert ranked.chunk_ids()[0] == "c001"
    assert ranked.entries[0].score == pytest.approx(1.0)


def test_dense_orthogonal_scores_zero_id_order():
    vectors = [[1.0, 0.0], [0.0, 0.0], [2.0, 0.0]]
    index, cmap = make_vector_index(vectors)
    ranked = dense_retrieve(index, [0.0, 3.0], 3, cmap)
    assert all(e.score == pytest.approx(0.0) for e in ranked.entries)
    assert ranked.chunk_ids() == ["c000", "c001", "c002"]


def test_dense_matches_brute_force_scan():
    rng = random.Random(42)
    for _ in range(60):
        n = rng.randint(2, 40)
        dim = rng.randint(2, 8)
        vectors = [[rng.uniform(-1, 1) for _ in range(dim)] for _ in range(n)]
        query = [rng.uniform(-1, 1) for _ in range(dim)]
        k = rng.randint(1, n)
        index, cmap = make_vector_index(vectors)
        ranked = dense_retrieve(index, query, k, cmap)
        expected = cosine_topk_oracle(index.chunk_ids, vectors, query, k)
        assert ranked.chunk_ids() == [cid for cid, _ in expected]
        for entry, (_, sim) in zip(ranked.entries, expected):
            assert entry.score == pytest.approx(sim, abs=1e-6)


def test_dense_k_validation():
    index, cmap = make_vector_index([[1.0, 0.0]])
    with pytest.raises(ValueError):
        dense_retrieve(index, [1.0, 0.0], 0, cmap)
    with pytest.raises(ValueError):
        dense_retrieve(index, [1.0, 0.0, 0.0], 1, cmap)


def test_monotone_truncation_dense():
    rng = random.Random(7)
    vectors = [[rng.uniform(-1, 1) for _ in range(4)] for _ in range(20)]
    index, cmap = make_vector_index(vectors)
    query = [rng.uniform(-1, 1) for _ in range(4)]
    top10 = dense_retrieve(index, query, 10, cmap).chunk_ids()
    for j in (1, 3, 7):
        assert dense_retrieve(index, query, j, cmap).chunk_ids() == top10[:j]


def test_bm25_absent_term_empty():
    index = build_bm25_index([chunk("c1", "alpha beta")])
    cmap = {"c1": chunk("c1", "alpha beta")}
    assert len(bm25_retrieve(index, "zeta", 5, cmap)) == 0


def test_bm25_present_term_positive():
    c = chunk("c1", "alpha beta")
    index = build_bm25_index([c])
    ranked = bm25_retrieve(index, "beta", 5, {"c1": c})
    assert ranked.chunk_ids() == ["c1"]
    assert ranked.entries[0].score > 0


def test_bm25_matches_formula_oracle():
    rng = random.Random(11)
    vocab = [f"term{i}" for i in range(30)]
    chunks = []
    for i in range(50):
        words = [rng.choice(vocab) for _ in range(rng.randint(3, 25))]
        chunks.append(chunk(f"c{i:03d}", " ".join(words)))
    index = build_bm25_index(chunks)
    cmap = {c.chunk_id: c for c in chunks}
    texts = {c.chunk_id: c.text for c in chunks}
    for _ in range(20):
        query = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 5)))
        expected = bm25_oracle(texts, query)
        ranked = bm25_retrieve(index, query, 50, cmap)
        for entry in ranked.entries:
            assert abs(entry.score - expected[entry.node.chunk_id]) <= 1e-12
        positives = sorted((cid for cid, s in expected.items() if s > 0),
                           key=lambda cid: (-expected[cid], cid))
        assert ranked.chunk_ids() == positives


def _ranked(ids, origin="dense"):
    entries = [RankedEntry(node=chunk(cid), score=float(len(ids) - i))
               for i, cid in enumerate(ids)]
    return RankedList(entries=entries, origin=origin)


def test_rrf_worked_example():
    fused = rrf_fuse([_ranked(["d1", "d2"]), _ranked(["d2", "d3"])], kappa=60, k=10)
    assert fused.chunk_ids() == ["d2", "d1", "d3"]
    scores = [e.score for e in fused.entries]
    assert scores[0] == pytest.approx(1 / 62 + 1 / 61, abs=1e-12)
    assert scores[1] == pytest.approx(1 / 61, abs=1e-12)
    assert scores[2] == pytest.approx(1 / 62, abs=1e-12)


def test_rrf_single_input_keeps_order():
    fused = rrf_fuse([_ranked(["a", "b", "c"])], k=10)
    assert fused.chunk_ids() == ["a", "b", "c"]


def test_rrf_empty_inputs():
    fused = rrf_fuse([_ranked([]), _ranked([])], k=5)
    assert len(fused) == 0


def test_rrf_matches_oracle_and_permutation_invariant():
    rng = random.Random(3)
    universe = [f"d{i}" for i in range(12)]
    for _ in range(100):
        n_rankings = rng.randint(1, 4)
        rankings = []
        for _ in range(n_rankings):
            ids = rng.sample(universe, rng.randint(0, 8))
            rankings.append(_ranked(ids))
        k = rng.randint(1, 12)
        fused = rrf_fuse(rankings, kappa=60, k=k)
        expected = rrf_oracle([r.chunk_ids() for r in rankings], kappa=60)[:k]
        assert fused.chunk_ids() == [d for d, _ in expected]
        for entry, (_, score) in zip(fused.entries, expected):
            assert entry.score == pytest.approx(score, abs=1e-12)
        shuffled = list(rankings)
        rng.shuffle(shuffled)
        assert rrf_fuse(shuffled, kappa=60, k=k).chunk_ids() == fused.chunk_ids()


def test_rrf_kappa_validation():
    with pytest.raises(ValueError):
        rrf_fuse([_ranked(["a"])], kappa=0, k=1)


def test_sentence_window_carries_window_text():
    nodes = [ChunkNode(chunk_id=f"d#s{i}", doc_id="d", text=f"sentence {i}.",
                       token_span=(i * 2, i * 2 + 2),
                       window_text=f"around sentence {i}. more")
             for i in range(4)]
    index = VectorIndex(chunk_ids=[n.chunk_id for n in nodes],
                        vectors=np.eye(4, dtype=np.float32))
    cmap = {n.chunk_id: n for n in nodes}
    ranked = sentence_window_retrieve(index, [0, 0, 1, 0], 2, cmap)
    assert ranked.origin == "sentence_window"
    top = ranked.entries[0].node
    assert top.chunk_id == "d#s2"
    assert top.text in top.window_text


def test_sentence_window_k_exceeds_count():
    nodes = [ChunkNode(chunk_id="d#s0", doc_id="d", text="only.",
                       token_span=(0, 1), window_text="only.")]
    index = VectorIndex(chunk_ids=["d#s0"], vectors=np.asarray([[1.0]], dtype=np.float32))
    ranked = sentence_window_retrieve(index, [1.0], 10, {"d#s0": nodes[0]})
    assert len(ranked) == 1


def test_hyde_uses_llm_output():
    qb = hyde_transform("who founded it?", StubChatProvider(reply="HYPO"), TEMPLATES)
    assert qb.effective_query == "HYPO"
    assert qb.original_query == "who founded it?"
    assert qb.transform == "hyde" and not qb.fallback


def test_hyde_fallback_on_failure():
    qb = hyde_transform("who?", StubChatProvider(fail_always=True), TEMPLATES)
    assert qb.effective_query == "who?"
    assert qb.transform == "hyde" and qb.fallback


def test_stepback_template_contains_query():
    captured = {}

    def reply(messages):
        captured["prompt"] = messages[-1]["content"]
        return "broadened Q"

    qb = stepback_transform("why is the sky blue?", StubChatProvider(reply=reply),
                            TEMPLATES)
    assert qb.effective_query == "broadened Q"
    assert "why is the sky blue?" in captured["prompt"]


def test_rewrite_identity_stub_and_fallback():
    qb = rewrite_query("original", StubChatProvider(reply="original"), TEMPLATES)
    assert qb.effective_query == "original" and qb.transform == "rewrite"
    qb = rewrite_query("original", StubChatProvider(fail_always=True), TEMPLATES)
    assert qb.fallback and qb.effective_query == "original"


def test_decompose_parses_numbered_list():
    qb = decompose_query("complex?", StubChatProvider(reply="1. A\n2. B"), TEMPLATES)
    assert qb.sub_queries == ["A", "B"]


def test_decompose_garbage_falls_back():
    qb = decompose_query("complex?", StubChatProvider(reply="no numbers here"),
                         TEMPLATES)
    assert qb.sub_queries == ["complex?"] and qb.fallback


def test_decompose_merged_pool_bound():
    # 2 sub-queries retrieved at K=3 each fuse into at most 6 distinct chunks.
    a = _ranked(["x1", "x2", "x3"])
    b = _ranked(["x3", "y1", "y2"])
    fused = rrf_fuse([a, b], k=100)
    assert len(fused) <= 6
    assert set(fused.chunk_ids()) == {"x1", "x2", "x3", "y1", "y2"}


def test_transform_fallback_never_empty():
    qb = hyde_transform("q", StubChatProvider(reply="   "), TEMPLATES)
    assert qb.effective_query == "q"
    with pytest.raises(ValueError):
        QueryBundle(original_query="q", effective_query="")
