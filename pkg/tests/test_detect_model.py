import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from neurodetect import channels as chn
from neurodetect import detect_model as dm


def random_table(rng, t, l, m=2):
    return rng.uniform(0, 5, size=(t, m**l))


def table_cost(table):
    return lambda y: table


# -- state encoding ------------------------------------------------------------


def test_state_encoding_current_symbol_least_significant():
    windows = dm.state_windows(3, 2)
    assert list(windows[1]) == [1, 0, 0] and list(windows[4]) == [0, 0, 1]
    assert np.array_equal(dm.encode_windows(windows, 2), np.arange(8))


@pytest.mark.parametrize("l,m", [(1, 2), (2, 2), (3, 2), (2, 3)])
def test_predecessors_are_exactly_the_shift_consistent_states(l, m):
    pred = dm.predecessors(l, m)
    for s in range(m**l):
        expect = sorted(p for p in range(m**l) if dm.shift_consistent(s, p, l, m))
        assert sorted(pred[s]) == expect


# -- exact likelihoods ----------------------------------------------------------


def test_awgn_cost_at_the_mean():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(0.5, 2), 3.0)
    mu = dm.state_means(ch)
    costs = dm.exact_cost(ch)(mu)
    np.testing.assert_allclose(np.diag(costs), 0.918939, atol=1e-6)


def test_poisson_cost_at_zero_is_the_rate():
    ch = chn.FiniteMemoryChannel("poisson", np.ones(2), 4.0)
    np.testing.assert_allclose(dm.exact_cost(ch)(np.zeros(1))[0], dm.state_means(ch) + 1)


def test_poisson_cost_matches_log_pmf():
    ch = chn.FiniteMemoryChannel("poisson", chn.make_decay_vector(1, 3), 9.0)
    lam = dm.state_means(ch) + 1
    for y in (0.0, 3.0, 17.0):
        expect = -(y * np.log(lam) - lam - gammaln(y + 1))
        np.testing.assert_allclose(dm.exact_cost(ch)(np.array([y]))[0], expect, rtol=1e-12)


@given(st.floats(-10, 10))
def test_awgn_cost_symmetry(y):
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(0.3, 2), 2.0)
    cost = dm.exact_cost(ch)
    # negating the window maps state index s to (m**l - 1) - s for BPSK
    np.testing.assert_allclose(cost(np.array([y]))[0], cost(np.array([-y]))[0][::-1], atol=1e-12)


def test_function_node_values():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(1, 2), 1.0)
    node = dm.exact_function_node(ch)
    assert node(0.3, state=0b01, prev=0b01) == 0.0  # needs prev's current symbol to become oldest
    expect = 0.5 * np.exp(-dm.exact_cost(ch)(np.array([0.3]))[0, 0b01])
    assert node(0.3, state=0b01, prev=0b00) == pytest.approx(expect, rel=1e-12)


def test_poisson_function_node_normalizes():
    ch = chn.FiniteMemoryChannel("poisson", chn.make_decay_vector(0.5, 2), 4.0)
    node = dm.exact_function_node(ch)
    ys = np.arange(200.0)
    for prev in range(4):
        total = sum(node(y, s, prev) for s in range(4) for y in ys if dm.shift_consistent(s, prev, 2, 2))
        assert total == pytest.approx(1.0, abs=1e-9)


# -- Viterbi --------------------------------------------------------------------


def test_viterbi_memoryless_is_nearest_point():
    y = np.array([0.2, -1.3, 0.9, -0.1, 2.0])
    pts = chn.BPSK.values
    cost = lambda yy: (yy[:, None] - pts) ** 2
    expect = np.argmin(cost(y), axis=1)
    for mode in ("traceback", "sequential"):
        assert np.array_equal(dm.viterbi(y, cost, 1, 2, mode), expect)


def test_viterbi_rejects_short_blocks_and_bad_mode():
    with pytest.raises(ValueError):
        dm.viterbi(np.zeros(2), table_cost(np.zeros((2, 4))), 2, 2)
    with pytest.raises(ValueError):
        dm.viterbi(np.zeros(5), table_cost(np.zeros((5, 4))), 2, 2, mode="fast")


def _sequence_cost(table, seq, l, m):
    return sum(table[k, dm.encode_window(seq[k + l - 1 :: -1][:l], m)] for k in range(len(seq) - l + 1))


@pytest.mark.parametrize("l", [1, 2, 3])
def test_viterbi_traceback_matches_exhaustive(l):
    rng = np.random.default_rng(l)
    for _ in range(30):
        table = random_table(rng, 6, l)
        got = dm.viterbi(np.zeros(6), table_cost(table), l, 2)
        assert np.array_equal(got, dm.exhaustive_sequence(table, l, 2))


def test_exhaustive_sequence_against_a_double_loop():
    # independent reference: enumerate prefix + block explicitly
    rng = np.random.default_rng(10)
    l, t = 2, 5
    table = random_table(rng, t, l)
    best, best_cost = None, np.inf
    for full in itertools.product(range(2), repeat=t + l - 1):
        c = _sequence_cost(table, full, l, 2)
        if c < best_cost - 1e-15:
            best, best_cost = full, c
    assert list(dm.exhaustive_sequence(table, l, 2)) == list(best[l - 1 :])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(4, 8))
def test_viterbi_path_cost_is_minimal(seed, l, t):
    if t <= l:
        return
    rng = np.random.default_rng(seed)
    table = random_table(rng, t, l)
    got = dm.viterbi(np.zeros(t), table_cost(table), l, 2)
    ref = dm.exhaustive_sequence(table, l, 2)
    # compare costs minimized over the unobserved prefix
    def best_cost(block):
        return min(
            _sequence_cost(table, (*pre, *block), l, 2) for pre in itertools.product(range(2), repeat=l - 1)
        )
    assert best_cost(got) == pytest.approx(best_cost(ref), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["traceback", "sequential"]))
def test_viterbi_per_time_shift_invariance(seed, mode):
    rng = np.random.default_rng(seed)
    table = random_table(rng, 8, 2)
    shifted = table + rng.uniform(-3, 3, size=(8, 1))
    a = dm.viterbi(np.zeros(8), table_cost(table), 2, 2, mode)
    b = dm.viterbi(np.zeros(8), table_cost(shifted), 2, 2, mode)
    assert np.array_equal(a, b)


def test_sequential_mode_agrees_on_a_clean_channel():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(1, 3), 10**2)
    d = chn.generate_dataset(ch, 2000, 0)
    cost = dm.exact_cost(ch)
    a = dm.viterbi(d.observations, cost, 3, 2, "traceback")
    b = dm.viterbi(d.observations, cost, 3, 2, "sequential")
    assert np.array_equal(a, d.labels[:, 0]) and np.array_equal(a, b)


# -- BCJR -----------------------------------------------------------------------


@pytest.mark.parametrize("l", [1, 2, 3])
def test_bcjr_matches_brute_marginals(l):
    rng = np.random.default_rng(20 + l)
    for _ in range(30):
        table = rng.normal(0, 2, size=(6, 2**l))
        post = dm.bcjr(np.zeros(6), dm.FunctionNode(lambda y, tb=table: tb, l, 2), l, 2)
        assert np.abs(post - dm.exhaustive_marginals(table, l, 2)).max() <= 1e-9
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-9)


def test_bcjr_memoryless_is_per_symbol_posterior():
    table = np.log(np.array([[0.2, 0.6], [0.9, 0.1], [0.5, 0.5]]))
    post = dm.bcjr(np.zeros(3), dm.FunctionNode(lambda y: table, 1, 2), 1, 2)
    np.testing.assert_allclose(post, [[0.25, 0.75], [0.9, 0.1], [0.5, 0.5]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 7), st.floats(-30, 30))
def test_bcjr_per_time_scaling_invariance(seed, k, log_c):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(8, 4))
    scaled = table.copy()
    scaled[k] += log_c
    a = dm.bcjr(np.zeros(8), dm.FunctionNode(lambda y: table, 2, 2), 2, 2)
    b = dm.bcjr(np.zeros(8), dm.FunctionNode(lambda y: scaled, 2, 2), 2, 2)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_bcjr_degenerate_evidence():
    table = np.zeros((4, 4))
    table[2] = -np.inf
    with pytest.raises(dm.DegenerateEvidenceError):
        dm.bcjr(np.zeros(4), dm.FunctionNode(lambda y: table, 2, 2), 2, 2)


def test_bcjr_never_worse_than_viterbi_in_expectation():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(0.3, 4), 10 ** 0.2)
    n_err_v = n_err_b = n = 0
    for b in range(100):
        d = chn.generate_dataset(ch, 1000, chn.RngStream(99, b))
        truth = d.labels[:, 0]
        n_err_v += np.sum(dm.viterbi(d.observations, dm.exact_cost(ch), 4, 2) != truth)
        post = dm.bcjr(d.observations, dm.exact_function_node(ch), 4, 2)
        n_err_b += np.sum(np.argmax(post, axis=1) != truth)
        n += len(truth)
    pv, pb = n_err_v / n, n_err_b / n
    se = np.sqrt(pv * (1 - pv) / n + pb * (1 - pb) / n)
    assert pb <= pv + 3 * se


# -- MIMO -----------------------------------------------------------------------


def awgn_score(H, s2):
    return lambda s, y: -np.sum((y - H @ s) ** 2) / (2 * s2)


def test_map_brute_scalar_and_identity():
    H = np.array([[2.0]])
    assert list(dm.map_mimo_brute(np.array([0.3]), awgn_score(H, 1.0), 1, 2, chn.BPSK)) == [1]
    assert list(dm.map_mimo_brute(np.array([-0.3]), awgn_score(H, 1.0), 1, 2, chn.BPSK)) == [0]
    s = np.array([1, 0, 1, 1])
    y = chn.BPSK.values[s]
    assert np.array_equal(dm.map_mimo_brute(y, awgn_score(np.eye(4), 0.1), 4, 2, chn.BPSK), s)


def test_map_brute_guard():
    with pytest.raises(dm.InstanceTooLargeError):
        dm.map_mimo_brute(np.zeros(21), lambda s, y: 0.0, 21, 2)


def test_map_brute_agrees_with_double_loop_and_batched_map():
    rng = np.random.default_rng(3)
    ch = chn.MimoChannel("awgn", rng.normal(size=(2, 2)), 0.5)
    score = awgn_score(ch.H, ch.sigma_w2)
    vals = chn.BPSK.values
    Y = np.array([chn.mimo_emit(ch, vals[rng.integers(0, 2, 2)], rng) for _ in range(1000)])
    batched = dm.map_mimo(ch, Y)
    for y, got in zip(Y, batched):
        best, bs = None, -np.inf
        for a in range(2):
            for b in range(2):
                sc = score(np.array([vals[a], vals[b]]), y)
                if sc > bs:
                    best, bs = (a, b), sc
        assert tuple(dm.map_mimo_brute(y, score, 2, 2, chn.BPSK)) == best == tuple(got)


def test_poisson_map_prefers_the_likely_input():
    ch = chn.MimoChannel("poisson", np.eye(2), 0.01)
    assert list(dm.map_mimo(ch, np.array([[25.0, 0.0]]))[0]) == [1, 0]


# -- SIC ------------------------------------------------------------------------


def test_sic_single_user_is_the_scalar_posterior():
    h = np.array([[0.8], [0.3]])
    y = np.array([0.4, -0.1])
    s2 = 0.7
    out = dm.sic_iterate(y, h, s2, np.full((1, 2), 0.5), chn.BPSK)
    ll = np.array([-np.sum((y - h[:, 0] * a) ** 2) / (2 * s2) for a in (-1, 1)])
    expect = np.exp(ll - ll.max()) / np.exp(ll - ll.max()).sum()
    np.testing.assert_allclose(out[0], expect, atol=1e-12)


def test_sic_perfect_cancellation_limit():
    s = np.array([1, 0, 1])
    vals = chn.BPSK.values
    priors = np.eye(2)[s].astype(float)
    out = dm.sic_iterate(vals[s], np.eye(3), 1e-6, priors, chn.BPSK)
    assert np.all(out[np.arange(3), s] > 1 - 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sic_outputs_are_soft_estimates(seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(4, 3))
    P = rng.dirichlet(np.ones(2), size=3)
    out = dm.sic_iterate(rng.normal(size=4), H, rng.uniform(0.01, 3), P, chn.BPSK)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_sic_zero_noise_corner_is_regularized():
    out = dm.sic_iterate(np.array([1.0, -1.0]), np.eye(2), 0.0, np.eye(2), chn.BPSK)
    assert np.all(np.isfinite(out))


def test_iterative_sic_single_user_equals_map():
    rng = np.random.default_rng(6)
    ch = chn.MimoChannel("awgn", np.array([[1.0], [0.5]]), 0.8)
    Y = np.array([chn.mimo_emit(ch, [chn.BPSK.values[rng.integers(2)]], rng) for _ in range(500)])
    for Q in (1, 3):
        assert np.array_equal(dm.iterative_sic(Y, ch.H, ch.sigma_w2, Q, chn.BPSK), dm.map_mimo(ch, Y))


def test_iterative_sic_identity_channel_decouples():
    ch = chn.MimoChannel("awgn", np.eye(2), 0.6)
    d = chn.generate_dataset(ch, 10_000, 1)
    sic = dm.iterative_sic(d.observations, np.eye(2), 0.6, 5, chn.BPSK)
    scalar = (d.observations > 0).astype(int)
    assert np.array_equal(sic, scalar)


def test_iterative_sic_fixed_point():
    ch = chn.MimoChannel("awgn", chn.spatial_decay_matrix(4, 4), 10 ** -0.8)
    d = chn.generate_dataset(ch, 2000, 2)
    a, Pa = dm.iterative_sic(d.observations, ch.H, ch.sigma_w2, 20, chn.BPSK, return_soft=True)
    b, Pb = dm.iterative_sic(d.observations, ch.H, ch.sigma_w2, 21, chn.BPSK, return_soft=True)
    converged = np.all(np.abs(Pa - Pb) < 1e-12, axis=(1, 2))
    assert converged.mean() > 0.9
    assert np.array_equal(a[converged], b[converged])
