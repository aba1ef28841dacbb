"""Channel models, labelled datasets and CSI perturbation.

Window convention used across the package: ``window[0]`` is the current
symbol ``s[i]``, ``window[tau]`` is ``s[i - tau]``, matching the tap order of
``h``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Constellation:
    points: tuple[float, ...]

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ValueError("a constellation needs at least 2 points")
        if len(set(pts)) != len(pts):
            raise ValueError("constellation points must be distinct")

    @property
    def m(self) -> int:
        return len(self.points)

    @property
    def values(self) -> np.ndarray:
        return np.array(self.points)

    def __getitem__(self, idx):
        return self.values[idx]


BPSK = Constellation((-1.0, 1.0))
OOK = Constellation((0.0, 1.0))

_DEFAULT_CONSTELLATION = {"awgn": BPSK, "poisson": OOK}


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(master_seed, stream_id)``.

    The stream is derived with numpy's ``SeedSequence`` (entropy =
    ``master_seed``, spawn key = ``stream_id``) feeding a PCG64 generator.
    ``stream_id`` may be an int or a tuple of ints, which is how the harness
    names per-task streams. Every call to :meth:`generator` restarts the same
    sequence.
    """

    master_seed: int
    stream_id: int | tuple[int, ...] = 0

    def generator(self) -> np.random.Generator:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys: int) -> RngStream:
        base = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return RngStream(self.master_seed, (*base, *keys))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class FiniteMemoryChannel:
    kind: str
    h: np.ndarray
    rho: float
    constellation: Constellation | None = None

    def __post_init__(self):
        if self.kind not in ("awgn", "poisson"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).copy()
        if h.ndim != 1 or h.size < 1:
            raise ValueError("h must be a non-empty vector")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.constellation is None:
            object.__setattr__(self, "constellation", _DEFAULT_CONSTELLATION[self.kind])

    @property
    def l(self) -> int:
        return self.h.size

    @property
    def m(self) -> int:
        return self.constellation.m

    def with_taps(self, h) -> FiniteMemoryChannel:
        return FiniteMemoryChannel(self.kind, h, self.rho, self.constellation)


@dataclass(frozen=True)
class MimoChannel:
    kind: str
    H: np.ndarray
    sigma_w2: float
    constellation: Constellation | None = None

    def __post_init__(self):
        if self.kind not in ("awgn", "poisson"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        H = np.asarray(self.H, dtype=float).copy()
        if H.ndim != 2:
            raise ValueError("H must be a matrix of shape (n_r, K)")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)
        if not self.sigma_w2 > 0:
            raise ValueError("sigma_w2 must be > 0")
        if self.constellation is None:
            object.__setattr__(self, "constellation", _DEFAULT_CONSTELLATION[self.kind])

    @property
    def n_r(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.constellation.m

    def with_matrix(self, H) -> MimoChannel:
        return MimoChannel(self.kind, H, self.sigma_w2, self.constellation)


@dataclass
class Dataset:
    """Labelled channel samples.

    ``labels`` holds constellation indices: shape ``(n, l)`` of state windows
    (current symbol first) for finite-memory channels, ``(n, K)`` for MIMO.
    ``observations`` has shape ``(n,)`` or ``(n, n_r)``.
    """

    labels: np.ndarray
    observations: np.ndarray

    @property
    def n_t(self) -> int:
        return len(self.labels)

    def __len__(self):
        return self.n_t


def make_decay_vector(gamma: float, l: int) -> np.ndarray:
    """Exponentially decaying taps ``exp(-gamma * tau)`` for ``tau = 0..l-1``."""
    if l < 1:
        raise ValueError("memory length l must be >= 1")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return np.exp(-gamma * np.arange(l))


def spatial_decay_matrix(n_r: int, K: int) -> np.ndarray:
    """``H[i, k] = exp(-|i - k|)``."""
    i, k = np.indices((n_r, K))
    return np.exp(-np.abs(i - k).astype(float))


def isi_mean(window, h, rho: float) -> float | np.ndarray:
    """Noiseless output ``sqrt(rho) * sum_tau h[tau] * window[tau]``.

    ``window`` holds symbol values; a trailing axis of length ``l`` is
    contracted so batches of windows work too.
    """
    window = np.asarray(window, dtype=float)
    h = np.asarray(h, dtype=float)
    if window.shape[-1] != h.size:
        raise ValueError(f"window length {window.shape[-1]} != memory {h.size}")
    out = np.sqrt(rho) * (window @ h)
    return float(out) if out.ndim == 0 else out


def poisson_rate(mean):
    rate = np.asarray(mean, dtype=float) + 1.0
    if np.any(rate <= 0):
        raise ValueError("Poisson rate must be > 0")
    return rate


def finite_memory_emit(ch: FiniteMemoryChannel, window, rng, noise: float | None = None) -> float:
    """One channel output for a window of symbol values.

    ``noise`` overrides the Gaussian draw of the AWGN channel.
    """
    mu = isi_mean(window, ch.h, ch.rho)
    if ch.kind == "awgn":
        w = as_generator(rng).standard_normal() if noise is None else noise
        return mu + w
    return float(as_generator(rng).poisson(poisson_rate(mu)))


def mimo_emit(ch: MimoChannel, s, rng, noise=None) -> np.ndarray:
    """Output vector for a symbol-value vector ``s`` of length K."""
    s = np.asarray(s, dtype=float)
    if s.shape != (ch.K,):
        raise ValueError(f"expected {ch.K} symbols, got shape {s.shape}")
    mean = ch.H @ s
    if ch.kind == "awgn":
        if noise is None:
            noise = np.sqrt(ch.sigma_w2) * as_generator(rng).standard_normal(ch.n_r)
        return mean + noise
    return as_generator(rng).poisson(poisson_rate(mean / np.sqrt(ch.sigma_w2))).astype(float)


def perturb_csi_finite(h, sigma_e2: float, rng) -> np.ndarray:
    """``h`` plus i.i.d. N(0, sigma_e2) noise on every tap."""
    h = np.asarray(h, dtype=float)
    if sigma_e2 < 0:
        raise ValueError("sigma_e2 must be >= 0")
    if sigma_e2 == 0:
        return h.copy()
    return h + np.sqrt(sigma_e2) * as_generator(rng).standard_normal(h.shape)


def perturb_csi_mimo(H, sigma_e2: float, rng) -> np.ndarray:
    """Entry (i, k) gets N(0, sigma_e2 * |H[i, k]|) noise."""
    H = np.asarray(H, dtype=float)
    if sigma_e2 < 0:
        raise ValueError("sigma_e2 must be >= 0")
    if sigma_e2 == 0:
        return H.copy()
    return H + np.sqrt(sigma_e2 * np.abs(H)) * as_generator(rng).standard_normal(H.shape)


def sliding_windows(symbols: np.ndarray, l: int) -> np.ndarray:
    """Windows ``(s[i], s[i-1], ..., s[i-l+1])`` for every ``i >= l-1`` of a stream."""
    view = np.lib.stride_tricks.sliding_window_view(symbols, l)
    return view[:, ::-1].copy()


def _finite_outputs(ch: FiniteMemoryChannel, windows_idx: np.ndarray, gen, taps=None) -> np.ndarray:
    values = ch.constellation.values[windows_idx]
    if taps is None:
        mean = np.sqrt(ch.rho) * (values @ ch.h)
    else:
        mean = np.sqrt(ch.rho) * np.einsum("nl,nl->n", values, taps)
    if ch.kind == "awgn":
        return mean + gen.standard_normal(len(mean))
    return gen.poisson(poisson_rate(mean)).astype(float)


def generate_dataset(channel, n: int, rng, taps_sampler=None) -> Dataset:
    """``n`` i.i.d.-uniform labelled samples pushed through ``channel``.

    Finite-memory channels transmit one contiguous stream preceded by ``l-1``
    uniformly drawn phantom symbols, so every sample has a full window.
    ``taps_sampler(gen, n)`` may return per-sample tap vectors (shape
    ``(n, l)``) or per-sample matrices (``(n, n_r, K)``) to emulate training
    under varying channel conditions.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    gen = as_generator(rng)
    if isinstance(channel, FiniteMemoryChannel):
        l = channel.l
        if n == 0:
            return Dataset(np.zeros((0, l), dtype=np.int64), np.zeros(0))
        stream = gen.integers(0, channel.m, size=n + l - 1)
        windows = sliding_windows(stream, l)
        taps = taps_sampler(gen, n) if taps_sampler is not None else None
        return Dataset(windows, _finite_outputs(channel, windows, gen, taps))
    if isinstance(channel, MimoChannel):
        if n == 0:
            return Dataset(np.zeros((0, channel.K), dtype=np.int64), np.zeros((0, channel.n_r)))
        labels = gen.integers(0, channel.m, size=(n, channel.K))
        values = channel.constellation.values[labels]
        if taps_sampler is None:
            mean = values @ channel.H.T
        else:
            mean = np.einsum("nrk,nk->nr", taps_sampler(gen, n), values)
        if channel.kind == "awgn":
            obs = mean + np.sqrt(channel.sigma_w2) * gen.standard_normal(mean.shape)
        else:
            obs = gen.poisson(poisson_rate(mean / np.sqrt(channel.sigma_w2))).astype(float)
        return Dataset(labels, obs)
    raise TypeError(f"unsupported channel type {type(channel).__name__}")
