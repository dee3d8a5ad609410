import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nerannot.embeddings import EmbeddingVector
from nerannot.errors import DegenerateVectorError, IndexBuildError, IntegrityError
from nerannot.vectorstore import VectorIndex, build_index, query_top_k


def brute_force_top_k(items, query, k):
    """Score every entry in pure Python and sort by (score desc, id asc)."""
    qn = math.sqrt(math.fsum(x * x for x in query))
    scored = []
    for sid, vec in items:
        dot = math.fsum(a * b for a, b in zip(vec, query))
        scored.append((-(dot / (math.sqrt(math.fsum(x * x for x in vec)) * qn)), sid))
    scored.sort()
    return [(sid, -neg) for neg, sid in scored[:k]]


def random_items(rng, n, dim, dup_rate=0.0):
    items = []
    for sid in rng.sample(range(10 * n), n):
        if items and rng.random() < dup_rate:
            vec = list(rng.choice(items)[1])  # exact duplicate -> exact score tie
        else:
            vec = [rng.gauss(0, 1) for _ in range(dim)]
        items.append((sid, vec))
    return items


def test_small_index():
    idx = build_index([(i, np.eye(4)[i] + 0.1) for i in range(3)])
    assert len(idx) == 3 and idx.dim == 4


def test_duplicate_id_rejected():
    with pytest.raises(IndexBuildError):
        build_index([(1, [1.0, 0.0]), (1, [0.0, 1.0])])


def test_mixed_dimensions_rejected():
    with pytest.raises(IndexBuildError):
        build_index([(1, np.ones(4)), (2, np.ones(8))])


def test_empty_and_zero_vectors_rejected():
    with pytest.raises(IndexBuildError):
        build_index([])
    with pytest.raises(DegenerateVectorError):
        build_index([(1, [0.0, 0.0])])
    idx = build_index([(1, [1.0, 0.0])])
    with pytest.raises(DegenerateVectorError):
        query_top_k(idx, np.zeros(2), 1)


def test_self_query_ranks_first():
    rng = random.Random(0)
    items = random_items(rng, 50, 16)
    idx = build_index(items)
    sid, vec = items[17]
    top = query_top_k(idx, np.array(vec), 3)
    assert top[0].sentence_id == sid and top[0].rank == 1
    assert abs(top[0].score - 1.0) <= 1e-12


def test_k_is_clamped():
    idx = build_index([(i, [1.0, float(i)]) for i in range(5)])
    hits = query_top_k(idx, np.array([1.0, 1.0]), 50)
    assert len(hits) == 5 and [h.rank for h in hits] == [1, 2, 3, 4, 5]


def test_ties_go_to_smaller_id():
    idx = build_index([(9, [1.0, 0.0]), (3, [2.0, 0.0]), (5, [0.0, 1.0]), (1, [0.5, 0.0])])
    assert [h.sentence_id for h in query_top_k(idx, np.array([1.0, 0.0]), 3)] == [1, 3, 9]


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = random.Random(seed)
    items = random_items(rng, 200, 64, dup_rate=0.1)
    idx = build_index(items)
    for _ in range(20):
        q = [rng.gauss(0, 1) for _ in range(64)]
        hits = query_top_k(idx, np.array(q), 10)
        oracle = brute_force_top_k(items, q, 10)
        assert [h.sentence_id for h in hits] == [sid for sid, _ in oracle]
        for h, (_, score) in zip(hits, oracle):
            assert abs(h.score - score) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, 8.0, 1024.0]))
def test_power_of_two_scaling_changes_nothing(seed, c):
    rng = random.Random(seed)
    items = random_items(rng, 30, 8, dup_rate=0.2)
    q = np.array([rng.gauss(0, 1) for _ in range(8)])
    base = query_top_k(build_index(items), q, 10)
    j = rng.randrange(len(items))
    scaled = [(sid, [c * x for x in v]) if i == j else (sid, v) for i, (sid, v) in enumerate(items)]
    assert query_top_k(build_index(scaled), q, 10) == base


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_positive_scaling_keeps_order(seed, c):
    rng = random.Random(seed)
    items = random_items(rng, 30, 8)
    q = np.array([rng.gauss(0, 1) for _ in range(8)])
    base = query_top_k(build_index(items), q, 10)
    scaled = [(sid, [c * x for x in v]) for sid, v in items]
    again = query_top_k(build_index(scaled), q, 10)
    assert [h.sentence_id for h in again] == [h.sentence_id for h in base]
    assert all(abs(a.score - b.score) <= 1e-12 for a, b in zip(again, base))


def test_determinism():
    rng = random.Random(3)
    items = random_items(rng, 100, 16)
    q = np.array([rng.gauss(0, 1) for _ in range(16)])
    a = query_top_k(build_index(items), q, 7)
    b = query_top_k(build_index(items), q, 7)
    assert [(h.sentence_id, h.score.hex(), h.rank) for h in a] == [(h.sentence_id, h.score.hex(), h.rank) for h in b]


def test_persistence_round_trip(tmp_path):
    vecs = [(i, EmbeddingVector(tuple(float(i + j + 1) for j in range(4)), "local-test", "hashed-bow-4")) for i in range(6)]
    idx = build_index(vecs)
    path = tmp_path / "x.navx"
    idx.save(path)
    loaded = VectorIndex.load(path, expected=("local-test", "hashed-bow-4"))
    assert loaded.ids == idx.ids and loaded.fingerprint == idx.fingerprint
    assert np.array_equal(loaded.vector(3), idx.vector(3))
    with pytest.raises(IntegrityError):
        VectorIndex.load(path, expected=("remote:x", "other"))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(IntegrityError):
        VectorIndex.load(path)


def test_mixed_fingerprints_rejected():
    with pytest.raises(IndexBuildError):
        build_index([(1, EmbeddingVector((1.0,), "a", "m")), (2, EmbeddingVector((1.0,), "b", "m"))])


def test_index_is_read_only():
    idx = build_index([(1, [1.0, 2.0])])
    idx.vector(1)[0] = 5.0
    assert idx.vector(1).tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        idx._matrix[0, 0] = 5.0
