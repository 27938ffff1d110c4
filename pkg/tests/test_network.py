import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkpca.data import ArraySource, SyntheticSource, make_covariance
from dkpca.errors import (
    DimensionMismatchError,
    EndOfStream,
    IndexRangeError,
    SampleCountError,
)
from dkpca.estimator import EigenEstimate, krasulina_step, random_unit_init
from dkpca.network import (
    NodeState,
    Splitter,
    SystemModel,
    classify_and_mu,
    distributed_vector_sum,
    reindex_dk,
    reindex_dmk,
    run_dk_iteration,
    run_dmk_iteration,
)


def test_classify_resourceful_and_constrained():
    # threshold R_s/R_p + R_s/(b R_c) = 2 + 1 = 3
    assert classify_and_mu(SystemModel(N=3, b=1, R_s=10, R_p=5, R_c=10)) == ("resourceful", 0)
    assert classify_and_mu(SystemModel(N=4, b=1, R_s=10, R_p=5, R_c=10)) == ("resourceful", 0)
    scenario, mu = classify_and_mu(SystemModel(N=2, b=1, R_s=10, R_p=5, R_c=10))
    # mu = ceil(b R_s/R_p + R_s/R_c - B) = ceil(2 + 1 - 2) = 1
    assert scenario == "constrained" and mu == 1
    scenario, mu = classify_and_mu(SystemModel(N=10, b=10, R_s=1e6, R_p=1e4, R_c=1e3))
    # threshold 100 + 100 = 200 > 10; mu = ceil(1000 + 1000 - 100)
    assert scenario == "constrained" and mu == 1900


def test_classify_override_and_errors():
    assert classify_and_mu(SystemModel(N=10, b=10, mu_override=200)) == ("constrained", 200)
    assert classify_and_mu(SystemModel(N=10, b=10, mu_override=0)) == ("resourceful", 0)
    assert classify_and_mu(SystemModel(N=3, R_s=10, R_p=5, R_c=10, mu_override=4)) == ("resourceful", 4)
    with pytest.raises(ValueError):
        classify_and_mu(SystemModel(N=2))
    with pytest.raises(ValueError):
        classify_and_mu(SystemModel(N=2, R_s=0, R_p=1, R_c=1))
    with pytest.raises(ValueError):
        SystemModel(N=0)
    # below the threshold the discard count is always positive
    scenario, mu = classify_and_mu(SystemModel(N=4, b=3, R_s=1.0, R_p=1.0, R_c=0.1))
    assert scenario == "constrained" and mu == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 30))
def test_reindex_is_a_bijection_onto_processed_indices(N, b, t_max):
    B = N * b
    seen = {reindex_dmk(i, j, t, b, B) for t in range(1, t_max + 1) for i in range(1, N + 1)
            for j in range(1, b + 1)} if B * t_max <= 5000 else None
    if seen is not None:
        assert seen == set(range(1, B * t_max + 1))
    assert reindex_dmk(N, b, t_max, b, B) == B * t_max
    assert reindex_dk(N, t_max, N) == N * t_max


def test_reindex_examples_and_errors():
    assert reindex_dk(1, 1, 10) == 1
    assert reindex_dk(3, 2, 10) == 13
    assert reindex_dmk(1, 1, 1, 2, 10) == 1
    assert reindex_dmk(2, 1, 1, 2, 10) == 3
    assert reindex_dmk(5, 2, 3, 2, 10) == 30
    for args in ((0, 1, 10), (11, 1, 10), (1, 0, 10)):
        with pytest.raises(IndexRangeError):
            reindex_dk(*args)
    with pytest.raises(IndexRangeError):
        reindex_dmk(1, 3, 1, 2, 10)
    with pytest.raises(IndexRangeError):
        reindex_dmk(1, 1, 1, 3, 10)


def test_distributed_vector_sum():
    parts = [np.array([1.0, 2.0]), np.array([3.0, -1.0]), np.array([0.5, 0.5])]
    np.testing.assert_array_equal(distributed_vector_sum(parts), [4.5, 1.5])
    np.testing.assert_array_equal(distributed_vector_sum([np.array([1.0, 2.0])]), [1.0, 2.0])
    with pytest.raises(DimensionMismatchError):
        distributed_vector_sum([np.ones(2), np.ones(3)])
    with pytest.raises(SampleCountError):
        distributed_vector_sum([])
    rng = np.random.default_rng(0)
    stack = rng.standard_normal((40, 3)) * 1e8
    one = distributed_vector_sum([stack])
    split = distributed_vector_sum([stack[:13], stack[13:29], stack[29:]])
    np.testing.assert_array_equal(one, split)


def test_node_state():
    node = NodeState(1, 3)
    np.testing.assert_array_equal(node.xi, np.zeros(3))
    v = np.array([1.0, 0.0, 0.0])
    node.accumulate(v, np.array([1.0, 1.0, 0.0]))
    node.accumulate(v, np.array([[2.0, 0.0, 1.0]]))
    # per-sample directions: (0, 1, 0) and (0, 0, 2)
    np.testing.assert_allclose(node.xi, [0.0, 1.0, 2.0])
    node.reset()
    np.testing.assert_array_equal(node.xi, np.zeros(3))


def test_dk_single_node_is_plain_krasulina_step():
    rng = np.random.default_rng(1)
    est = random_unit_init(4, rng)
    x = rng.standard_normal((1, 4))
    a = run_dk_iteration(est, x, 0.2)
    b = krasulina_step(est, x, 0.2)
    np.testing.assert_array_equal(a.v, b.v)


def test_distributed_equals_centralized_bitwise():
    rng = np.random.default_rng(2)
    d, B = 6, 12
    for seed in range(5):
        r = np.random.default_rng(seed)
        init = random_unit_init(d, r)
        cen, dk, dmk = init, init, init
        for t in range(1, 300):
            X = r.standard_normal((B, d)) * rng.uniform(0.5, 2)
            g = 3.0 / (t + 10)
            cen = krasulina_step(cen, X, g)
            dk = run_dk_iteration(dk, X, g, n_nodes=B)
            dmk, _ = run_dmk_iteration(dmk, X, g, mu=5, n_nodes=4, b=3)
            assert np.array_equal(cen.v, dk.v) and np.array_equal(cen.v, dmk.v)
        assert cen.samples_processed == dk.samples_processed == dmk.samples_processed == 299 * B


def test_iteration_errors():
    est = EigenEstimate(np.array([1.0, 0.0]))
    with pytest.raises(SampleCountError):
        run_dk_iteration(est, np.ones((3, 2)), 0.1, n_nodes=2)
    with pytest.raises(DimensionMismatchError):
        run_dk_iteration(est, np.ones((2, 3)), 0.1)
    with pytest.raises(SampleCountError):
        run_dmk_iteration(est, np.ones((5, 2)), 0.1, mu=0, n_nodes=2, b=2)
    with pytest.raises(ValueError):
        run_dmk_iteration(est, np.ones((4, 2)), 0.1, mu=-1, n_nodes=2, b=2)


def test_splitter_accounting_and_order():
    X = np.arange(40, dtype=float).reshape(20, 2)
    sp = Splitter(ArraySource(X), B=3, mu=2)
    first = sp.next_block()
    np.testing.assert_array_equal(first[:, 0], [0, 2, 4])
    second = sp.next_block()
    # samples 4 and 5 (1-based) were dropped
    np.testing.assert_array_equal(second[:, 0], [10, 12, 14])
    cur = sp.cursor
    assert (cur.received, cur.processed, cur.discarded, cur.iteration) == (10, 6, 4, 2)
    sp.next_block()
    sp.next_block()
    assert sp.cursor.received == 20
    with pytest.raises(EndOfStream) as info:
        sp.next_block()
    assert info.value.received == 20 and info.value.processed == 12 and info.value.discarded == 8


def test_splitter_partial_block_is_discarded():
    X = np.zeros((11, 2))
    sp = Splitter(ArraySource(X), B=4, mu=0)
    sp.next_block()
    sp.next_block()
    with pytest.raises(EndOfStream):
        sp.next_block()
    cur = sp.cursor
    assert cur.received == 11 and cur.processed == 8 and cur.discarded == 3
    assert cur.received == cur.processed + cur.discarded


def test_splitter_limit_and_synthetic_alignment():
    spec = make_covariance(3, 1.0, 0.3, seed=0)
    a = Splitter(SyntheticSource(spec, np.random.default_rng(5)), B=2, mu=3, limit=12)
    b = SyntheticSource(spec, np.random.default_rng(5)).take(12)
    blocks = [a.next_block(), a.next_block()]
    np.testing.assert_array_equal(blocks[0], b[0:2])
    np.testing.assert_array_equal(blocks[1], b[5:7])
    # 10 received; the third block fits, its trailing drop is cut by the limit
    np.testing.assert_array_equal(a.next_block(), b[10:12])
    with pytest.raises(EndOfStream):
        a.next_block()
    assert a.cursor.received == 12 and a.cursor.processed == 6 and a.cursor.discarded == 6
    with pytest.raises(ValueError):
        Splitter(ArraySource(np.zeros((3, 2))), B=0)
