import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvann.core import (
    ConfigError,
    Counters,
    IdSet,
    IndexConfig,
    LabelFilter,
    Metric,
    VectorRecord,
    distance,
    distances,
    prepare_embedding,
    rank_order,
    user_distance,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def test_euclidean_identity_is_zero():
    assert distance([1, 2, 3], [1, 2, 3]) == 0.0


def test_euclidean_is_squared():
    assert distance([0, 0], [3, 4]) == 25.0
    assert user_distance(25.0, "euclidean") == 5.0


def test_inner_product_matches_scalar_loop():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((1000, 24)).astype(np.float32)
    B = rng.standard_normal((1000, 24)).astype(np.float32)
    for a, b in zip(A, B):
        acc = 0.0
        for x, y in zip(a.tolist(), b.tolist()):
            acc += x * y
        got = distance(a, b, "inner_product")
        assert got == pytest.approx(-acc, rel=1e-4, abs=1e-5)


def test_cosine_distance_of_parallel_vectors():
    assert distance([1, 0], [5, 0], "cosine") == pytest.approx(0.0, abs=1e-7)
    assert distance([1, 0], [0, 2], "cosine") == pytest.approx(1.0)


def test_dimension_mismatch_is_a_config_error():
    with pytest.raises(ConfigError):
        distance([1, 2], [1, 2, 3])
    with pytest.raises(ConfigError):
        distances(np.zeros(3), np.zeros((4, 2)))


def test_vectorized_matches_pairwise():
    rng = np.random.default_rng(1)
    q = rng.standard_normal(16).astype(np.float32)
    X = rng.standard_normal((50, 16)).astype(np.float32)
    for metric in ("euclidean", "inner_product"):
        vec = distances(q, X, metric)
        one = [distance(q, x, metric) for x in X]
        np.testing.assert_allclose(vec, one, rtol=1e-5, atol=1e-5)


def test_cosine_ingest_normalizes():
    v = prepare_embedding([3.0, 4.0], 2, Metric.COSINE)
    assert abs(float(np.linalg.norm(v)) - 1.0) < 1e-6


@pytest.mark.parametrize("bad", [[np.nan, 1.0], [np.inf, 0.0]])
def test_non_finite_embeddings_rejected(bad):
    with pytest.raises(ConfigError):
        prepare_embedding(bad, 2, Metric.EUCLIDEAN)


def test_zero_vector_rejected_for_cosine():
    with pytest.raises(ConfigError):
        prepare_embedding([0.0, 0.0], 2, Metric.COSINE)


def test_index_config_defaults_and_validation():
    cfg = IndexConfig(dimension=8)
    assert (cfg.degree_bound, cfg.build_list_size, cfg.alpha, cfg.replace_closest) == (32, 100, 1.2, 3)
    assert cfg.max_degree == 42  # ceil(1.3 * 32)
    for kwargs in ({"dimension": 0}, {"dimension": 4, "build_list_size": 8},
                   {"dimension": 4, "alpha": 0.9}, {"dimension": 4, "degree_slack": 0.5},
                   {"dimension": 4, "prune_rule": "other"}):
        with pytest.raises(ConfigError):
            IndexConfig(**kwargs)


def test_vector_record_id_range():
    with pytest.raises(ConfigError):
        VectorRecord(-1, np.zeros(2))
    with pytest.raises(ConfigError):
        VectorRecord(2**64, np.zeros(2))
    assert VectorRecord(2**64 - 1, np.zeros(2)).id == 2**64 - 1


def test_label_filter_modes():
    assert LabelFilter(0b0110, "any").matches(0b0100)
    assert not LabelFilter(0b0110, "all").matches(0b0100)
    assert LabelFilter(0b0110, "all").matches(0b1110)
    assert LabelFilter(0b0110, "equal").matches(0b0110)
    assert not LabelFilter(0b0110, "equal").matches(0b1110)


def test_id_set_membership():
    s = IdSet([5, 1, 9, 5])
    assert len(s) == 3
    assert 9 in s and 4 not in s
    assert s.contains([0, 1, 2, 9, 10]).tolist() == [False, True, False, True, False]
    assert IdSet().contains([1]).tolist() == [False]


def test_rank_order_breaks_ties_by_lower_id():
    ids = np.array([9, 3, 7], dtype=np.uint64)
    d = np.array([1.0, 1.0, 0.5], dtype=np.float32)
    assert ids[rank_order(ids, d)].tolist() == [7, 3, 9]


def test_counters_add():
    a = Counters(quant_reads=2, pages=1)
    a.add(Counters(quant_reads=3, adj_reads=4))
    assert a.as_dict()["quant_reads"] == 5 and a.adj_reads == 4 and a.pages == 1


@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 40), st.just(5)), elements=finite),
       hnp.arrays(np.float32, 5, elements=finite))
def test_squared_and_true_euclidean_share_argmin(X, q):
    sq = distances(q, X)
    true = np.sqrt(sq.astype(np.float64))
    assert np.argmin(sq) == np.argmin(true)


@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 40), st.just(4)), elements=finite),
       hnp.arrays(np.float32, 4, elements=finite),
       st.floats(0.01, 100.0))
def test_positive_scaling_preserves_argmin(X, q, c):
    d = distances(q, X).astype(np.float64)
    ids = np.arange(len(X), dtype=np.uint64)
    assert rank_order(ids, d)[0] == rank_order(ids, d * c)[0]


@given(hnp.arrays(np.float32, 6, elements=finite), hnp.arrays(np.float32, 6, elements=finite))
def test_euclidean_symmetric_and_non_negative(a, b):
    assert distance(a, b) == distance(b, a)
    assert distance(a, b) >= 0.0
    assert math.isfinite(user_distance(distance(a, b), "euclidean"))
