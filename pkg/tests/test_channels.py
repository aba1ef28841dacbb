import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurodetect import channels as chn


def test_constellation_rejects_duplicates_and_singletons():
    with pytest.raises(ValueError):
        chn.Constellation((1.0, 1.0))
    with pytest.raises(ValueError):
        chn.Constellation((0.0,))
    assert chn.BPSK.m == 2 and list(chn.OOK.values) == [0.0, 1.0]


def test_decay_vector_examples():
    assert np.array_equal(chn.make_decay_vector(0, 4), np.ones(4))
    assert np.array_equal(chn.make_decay_vector(2, 1), [1.0])
    np.testing.assert_allclose(chn.make_decay_vector(1, 4), [1, 0.367879, 0.135335, 0.049787], atol=5e-7)
    with pytest.raises(ValueError):
        chn.make_decay_vector(1, 0)


def test_isi_mean_examples():
    assert chn.isi_mean([1, 1, 1, 1], np.ones(4), 1.0) == 4.0
    assert chn.isi_mean([1, 1, 1, 1], chn.make_decay_vector(1, 4), 4.0) == pytest.approx(3.106003, abs=1e-6)
    with pytest.raises(ValueError):
        chn.isi_mean([1, 1], np.ones(3), 1.0)


@given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=4, max_size=4), st.floats(0.01, 100))
def test_isi_mean_is_odd(window, rho):
    h = chn.make_decay_vector(0.7, 4)
    assert chn.isi_mean(np.negative(window), h, rho) == pytest.approx(-chn.isi_mean(window, h, rho))


def test_poisson_rates():
    assert float(chn.poisson_rate(chn.isi_mean([0, 0, 0, 0], np.ones(4), 4.0))) == 1.0
    assert float(chn.poisson_rate(chn.isi_mean([1, 1, 1, 1], np.ones(4), 4.0))) == 9.0
    with pytest.raises(ValueError):
        chn.poisson_rate(-2.0)


def test_finite_emit_forced_noise_equals_mean_and_is_sign_equivariant():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(0.3, 3), 2.0)
    w = np.array([1.0, -1.0, 1.0])
    assert chn.finite_memory_emit(ch, w, 0, noise=0.0) == pytest.approx(chn.isi_mean(w, ch.h, ch.rho))
    assert chn.finite_memory_emit(ch, -w, 0, noise=-0.4) == pytest.approx(-chn.finite_memory_emit(ch, w, 0, noise=0.4))


def test_finite_emit_depends_only_on_window_and_stream():
    ch = chn.FiniteMemoryChannel("poisson", np.ones(2), 9.0)
    a = chn.finite_memory_emit(ch, [1, 0], chn.RngStream(3, 7))
    b = chn.finite_memory_emit(ch, [1, 0], chn.RngStream(3, 7))
    assert a == b


def test_mimo_emit_examples():
    eye = chn.MimoChannel("awgn", np.eye(3), 1.0)
    s = np.array([1.0, -1.0, 1.0])
    assert np.array_equal(chn.mimo_emit(eye, s, 0, noise=np.zeros(3)), s)
    ch = chn.MimoChannel("awgn", chn.spatial_decay_matrix(2, 2), 1.0)
    np.testing.assert_allclose(chn.mimo_emit(ch, [1, 1], 0, noise=np.zeros(2)), [1.367879, 1.367879], atol=5e-7)
    with pytest.raises(ValueError):
        chn.mimo_emit(ch, [1, 1, 1], 0)


def test_mimo_poisson_zero_input_has_unit_rate():
    ch = chn.MimoChannel("poisson", chn.spatial_decay_matrix(4, 4), 0.1)
    ys = np.array([chn.mimo_emit(ch, np.zeros(4), g) for g in range(4000)])
    # mean of Poisson(1) over 16000 draws
    assert abs(ys.mean() - 1.0) < 4 * np.sqrt(1 / ys.size)


def test_perturb_csi_finite_statistics():
    h = chn.make_decay_vector(0.5, 4)
    assert np.array_equal(chn.perturb_csi_finite(h, 0.0, 1), h)
    gen = np.random.default_rng(11)
    draws = np.array([chn.perturb_csi_finite(h, 0.1, gen) for _ in range(100_000)])
    n = len(draws)
    assert np.all(np.abs(draws.mean(axis=0) - h) < 4 * np.sqrt(0.1 / n))
    assert np.all(np.abs(draws.var(axis=0) / 0.1 - 1) < 0.05)


def test_perturb_csi_mimo_statistics():
    H = np.array([[1.0, 0.0], [0.5, 1.0]])
    assert np.array_equal(chn.perturb_csi_mimo(H, 0.0, 1), H)
    gen = np.random.default_rng(5)
    draws = np.array([chn.perturb_csi_mimo(H, 0.1, gen) for _ in range(100_000)])
    assert np.all(draws[:, 0, 1] == 0.0)
    assert abs(draws[:, 0, 0].var() / 0.1 - 1) < 0.05
    assert abs(draws[:, 1, 0].var() / 0.05 - 1) < 0.05


def test_generate_dataset_empty_and_deterministic():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(1, 4), 1.0)
    assert len(chn.generate_dataset(ch, 0, 0)) == 0
    a = chn.generate_dataset(ch, 50, chn.RngStream(1, 2))
    b = chn.generate_dataset(ch, 50, chn.RngStream(1, 2))
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.observations, b.observations)
    c = chn.generate_dataset(ch, 50, chn.RngStream(1, 3))
    assert not np.array_equal(a.observations, c.observations)


@pytest.mark.parametrize("kind", ["awgn", "poisson"])
def test_label_frequencies_are_uniform(kind):
    n = 10_000
    ch = chn.FiniteMemoryChannel(kind, chn.make_decay_vector(1, 4), 4.0)
    d = chn.generate_dataset(ch, n, chn.RngStream(0, 9))
    freq = np.bincount(d.labels[:, 0], minlength=2) / n
    assert np.all(np.abs(freq - 0.5) <= 3 * np.sqrt(0.25 / n))


def test_dataset_windows_are_a_contiguous_stream():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(1, 3), 1.0)
    d = chn.generate_dataset(ch, 200, 4)
    # the window at i+1 is the window at i shifted by one
    assert np.array_equal(d.labels[1:, 1:], d.labels[:-1, :-1])


def test_noiseless_like_outputs_track_the_mean():
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(0.2, 2), 1e8)
    d = chn.generate_dataset(ch, 100, 0)
    mean = chn.isi_mean(chn.BPSK.values[d.labels], ch.h, ch.rho)
    assert np.max(np.abs(d.observations - mean)) < 10


def test_mimo_dataset_with_per_sample_matrices():
    ch = chn.MimoChannel("awgn", np.eye(2), 1e-12)
    sampler = lambda gen, n: np.broadcast_to(2 * np.eye(2), (n, 2, 2))
    d = chn.generate_dataset(ch, 20, 0, taps_sampler=sampler)
    np.testing.assert_allclose(d.observations, 2 * chn.BPSK.values[d.labels], atol=1e-4)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_rng_stream_is_reproducible(seed, stream):
    a = chn.RngStream(seed, stream).generator().random(4)
    b = chn.RngStream(seed, stream).generator().random(4)
    assert np.array_equal(a, b)
