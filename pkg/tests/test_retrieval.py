import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqvpr.formats import save_global_store, save_local_grid
from cqvpr.retrieval import (
    DescriptorIndex,
    DuplicateIdError,
    MissingLocalStoreError,
    RankedList,
    build_index,
    ranked_to_csv,
    read_ranked_csv,
    rerank,
    search,
    search_batch,
    write_ranked_csv,
)
from oracles import mnn_pairs


def _unit(rng, *shape):
    x = rng.standard_normal(shape).astype(np.float32)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _full_sort(matrix, query, k):
    scores = matrix.astype(np.float32) @ np.asarray(query, np.float32)
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def test_empty_store_gives_empty_results(tmp_path):
    save_global_store(tmp_path / "e.cqvd", [], np.zeros((0, 8)))
    index = build_index(tmp_path / "e.cqvd")
    assert index.count == 0
    result = search(index, np.ones(8), 5)
    assert result.ids == [] and result.truncated


def test_store_of_three_keeps_order(tmp_path):
    rng = np.random.default_rng(0)
    save_global_store(tmp_path / "s.cqvd", ["c", "a", "b"], _unit(rng, 3, 4))
    index = build_index(tmp_path / "s.cqvd", tmp_path / "local")
    assert index.count == 3 and index.dim == 4 and index.ids == ["c", "a", "b"]
    assert index.local_paths["a"] == tmp_path / "local" / "a.cqvl"


def test_duplicate_ids_rejected():
    with pytest.raises(DuplicateIdError, match="'x'"):
        DescriptorIndex(np.eye(3), ["x", "y", "x"])


def test_self_retrieval_and_k1():
    rng = np.random.default_rng(1)
    m = _unit(rng, 50, 16)
    index = DescriptorIndex(m, [f"i{k}" for k in range(50)])
    r = search(index, m[17], 3)
    assert r.ids[0] == "i17" and abs(r.scores[0] - 1) <= 1e-6
    two = DescriptorIndex(np.array([[0.9, np.sqrt(0.19)], [0.1, np.sqrt(0.99)]]), ["hi", "lo"])
    assert search(two, np.array([1.0, 0.0]), 1).ids == ["hi"]


def test_k_beyond_size_returns_all_flagged():
    index = DescriptorIndex(np.eye(3), ["a", "b", "c"])
    r = search(index, np.array([0.0, 1.0, 0.0]), 10)
    assert r.truncated and r.ids == ["b", "a", "c"]
    assert not search(index, np.ones(3), 3).truncated
    with pytest.raises(ValueError):
        search(index, np.ones(3), 0)
    with pytest.raises(ValueError):
        search(index, np.ones(4), 1)


def test_matches_full_sort_oracle_1000x64():
    rng = np.random.default_rng(2)
    m = _unit(rng, 1000, 64)
    index = DescriptorIndex(m, [str(i) for i in range(1000)])
    queries = _unit(rng, 10, 64)
    batch = search_batch(index, queries, 100)
    for q, b in zip(queries, batch):
        single = search(index, q, 100)
        assert [int(i) for i in single.ids] == _full_sort(m, q, 100)
        assert single.ids == b.ids
        assert all(x >= y for x, y in zip(single.scores, single.scores[1:]))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40), k=st.integers(1, 45))
def test_ties_follow_insertion_order(seed, n, k):
    rng = np.random.default_rng(seed)
    # few distinct rows so equal scores are common
    m = np.eye(4, dtype=np.float32)[rng.integers(0, 4, size=n)]
    q = rng.integers(0, 3, size=4).astype(np.float32)
    index = DescriptorIndex(m, [str(i) for i in range(n)])
    assert [int(i) for i in search(index, q, k).ids] == _full_sort(m, q, k)


# --- re-ranking -------------------------------------------------------------

def _fixture_grids(counts, u=4, d=64):
    """Query grid of orthonormal vectors; candidate c shares its first counts[c] vectors."""
    basis = np.eye(d, dtype=np.float32)
    query = basis[: u * u]
    grids = []
    for c in counts:
        filler = basis[u * u + np.arange(u * u - c) % (d - u * u)]
        grids.append(np.concatenate([query[:c], filler]).reshape(u, u, d))
    return query.reshape(u, u, d), grids


def test_rerank_constructed_counts():
    query, grids = _fixture_grids((3, 9, 1, 9, 0))
    for grid, expected in zip(grids, (3, 9, 1, 9, 0)):
        s = query.reshape(16, -1) @ grid.reshape(16, -1).T
        assert sum(1 for i, j in mnn_pairs(s) if s[i, j] >= 0.5) == expected
    cands = RankedList([f"c{i}" for i in range(5)], [0.5, 0.4, 0.3, 0.2, 0.1])
    stores = {f"c{i}": g for i, g in enumerate(grids)}
    out = rerank(query, cands, stores, min_sim=0.5)
    assert out.ids == ["c1", "c3", "c0", "c2", "c4"]
    assert out.scores == [9, 9, 3, 1, 0] and out.stage == "reranked"
    assert rerank(query, cands, stores, workers=4, min_sim=0.5).ids == out.ids


def test_rerank_self_match_first_and_stable_ties():
    rng = np.random.default_rng(3)
    query = _unit(rng, 4, 4, 8)
    others = [_unit(rng, 4, 4, 8) for _ in range(3)]
    cands = RankedList(["a", "b", "self", "c"], [0.9, 0.8, 0.7, 0.6])
    out = rerank(query, cands, {"a": others[0], "b": others[1], "self": query, "c": others[2]})
    assert out.ids[0] == "self" and out.scores[0] == 16
    assert sorted(out.ids) == sorted(cands.ids)
    zeros = RankedList(["x", "y", "z"], [0.3, 0.2, 0.1])
    orth = np.eye(64, dtype=np.float32)[32:48].reshape(4, 4, 64)
    q = np.eye(64, dtype=np.float32)[:16].reshape(4, 4, 64)
    assert rerank(q, zeros, dict.fromkeys("xyz", orth), min_sim=0.5).ids == ["x", "y", "z"]


def test_rerank_missing_store_names_id(tmp_path):
    grid = np.ones((2, 2, 3), np.float32)
    save_local_grid(tmp_path / "a.cqvl", grid)
    stores = {"a": tmp_path / "a.cqvl", "b": tmp_path / "b.cqvl"}
    with pytest.raises(MissingLocalStoreError, match="'b'"):
        rerank(grid, RankedList(["a", "b"], [1.0, 0.5]), stores)
    with pytest.raises(MissingLocalStoreError, match="'q'"):
        rerank(grid, RankedList(["q"], [1.0]), {})


def test_ranked_csv_round_trip(tmp_path):
    results = [
        ("q1", RankedList(["a", "b"], [0.5, 0.25])),
        ("q1", RankedList(["b", "a"], [7, 2], "reranked")),
        ("q2", RankedList(["c"], [1.0])),
    ]
    text = ranked_to_csv(results)
    assert text.splitlines()[0] == "query_id,rank,image_id,score,stage"
    assert "q1,1,b,7,reranked" in text and "q1,1,a,0.5000000,global" in text
    write_ranked_csv(tmp_path / "r.csv", results)
    assert read_ranked_csv(tmp_path / "r.csv", "global") == {"q1": ["a", "b"], "q2": ["c"]}
    assert read_ranked_csv(tmp_path / "r.csv", "reranked") == {"q1": ["b", "a"]}
