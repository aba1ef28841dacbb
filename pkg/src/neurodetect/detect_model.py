"""Channel-model-based detectors.

Trellis states encode a window ``(s[i], s[i-1], ..., s[i-l+1])`` of
constellation indices as ``sum_tau idx[tau] * m**tau`` (current symbol is the
least significant digit). A cost function maps a block of observations of
shape ``(t,)`` to a ``(t, m**l)`` table of negative log-likelihoods.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln, softmax

from .channels import Constellation, FiniteMemoryChannel, MimoChannel

CostFn = Callable[[np.ndarray], np.ndarray]

MAX_MAP_CANDIDATES = 2**20
_RATE_FLOOR = 1e-12


class DegenerateEvidenceError(ValueError):
    """Every trellis path has zero probability under the supplied function node."""


class InstanceTooLargeError(ValueError):
    pass


# -- trellis bookkeeping -----------------------------------------------------


def state_windows(l: int, m: int) -> np.ndarray:
    """Constellation-index window of every state, shape ``(m**l, l)``."""
    states = np.arange(m**l)
    return (states[:, None] // m ** np.arange(l)) % m


def encode_window(window, m: int) -> int:
    return int(sum(int(a) * m**tau for tau, a in enumerate(window)))


def encode_windows(windows: np.ndarray, m: int) -> np.ndarray:
    windows = np.asarray(windows)
    return windows @ (m ** np.arange(windows.shape[-1]))


def predecessors(l: int, m: int) -> np.ndarray:
    """``pred[s, b]``: the b-th state that can precede ``s`` (ascending index)."""
    s = np.arange(m**l)
    return (s // m)[:, None] + m ** (l - 1) * np.arange(m)[None, :]


def shift_consistent(state: int, prev: int, l: int, m: int) -> bool:
    """True when ``state`` is ``prev`` shifted by one new symbol."""
    return state // m == prev % m ** (l - 1)


def _check_block(y_block, l):
    y = np.asarray(y_block, dtype=float)
    if y.ndim != 1:
        raise ValueError("observation block must be one-dimensional")
    if y.size <= l:
        raise ValueError(f"block length {y.size} must exceed the memory l={l}")
    return y


# -- exact likelihoods -------------------------------------------------------


def state_means(ch: FiniteMemoryChannel) -> np.ndarray:
    values = ch.constellation.values[state_windows(ch.l, ch.m)]
    return np.sqrt(ch.rho) * (values @ ch.h)


def exact_cost(ch: FiniteMemoryChannel) -> CostFn:
    """Negative log-likelihood ``-log p(y | state)`` under ``ch``.

    Poisson rates are floored at 1e-12 so perturbed (possibly negative) taps
    still give finite costs.
    """
    mu = state_means(ch)
    if ch.kind == "awgn":
        half_log_2pi = 0.5 * np.log(2 * np.pi)

        def cost(y):
            y = np.asarray(y, dtype=float)
            return half_log_2pi + 0.5 * (y[..., None] - mu) ** 2

    else:
        lam = np.maximum(mu + 1.0, _RATE_FLOOR)
        log_lam = np.log(lam)

        def cost(y):
            y = np.asarray(y, dtype=float)[..., None]
            return lam - y * log_lam + gammaln(y + 1.0)

    return cost


@dataclass(frozen=True)
class FunctionNode:
    """Factor ``f(y, s, s_prev) = p(y|s)/m`` on shift-consistent pairs, 0 otherwise.

    ``log_likelihood`` maps observations ``(t,)`` to ``log p(y|s)`` of shape
    ``(t, m**l)``.
    """

    log_likelihood: Callable[[np.ndarray], np.ndarray]
    l: int
    m: int

    def __call__(self, y: float, state: int, prev: int) -> float:
        if not shift_consistent(state, prev, self.l, self.m):
            return 0.0
        return float(np.exp(self.log_likelihood(np.array([y]))[0, state])) / self.m


def exact_function_node(ch: FiniteMemoryChannel) -> FunctionNode:
    cost = exact_cost(ch)
    return FunctionNode(lambda y: -cost(y), ch.l, ch.m)


# -- Viterbi -----------------------------------------------------------------


def viterbi(y_block, cost: CostFn, l: int, m: int, mode: str = "traceback") -> np.ndarray:
    """Minimum-cost symbol sequence through the trellis.

    ``traceback`` keeps back-pointers and returns the globally optimal
    sequence. ``sequential`` decides symbol ``k-l+1`` at step ``k`` from the
    cheapest state (its oldest symbol), and the last ``l`` symbols from the
    final cheapest state, without any traceback.
    """
    y = _check_block(y_block, l)
    if mode not in ("traceback", "sequential"):
        raise ValueError(f"unknown viterbi mode {mode!r}")
    costs = np.asarray(cost(y), dtype=float)
    t, n_states = costs.shape
    if n_states != m**l:
        raise ValueError(f"cost table has {n_states} states, expected {m**l}")
    pred = predecessors(l, m)
    path = np.zeros(n_states)
    decided = np.empty(t, dtype=np.int64)
    back = np.empty((t, n_states), dtype=np.int64) if mode == "traceback" else None
    oldest = m ** (l - 1)
    for k in range(t):
        cand = path[pred]
        choice = np.argmin(cand, axis=1)
        path = cand[np.arange(n_states), choice] + costs[k]
        if back is not None:
            back[k] = pred[np.arange(n_states), choice]
        elif k >= l - 1:
            decided[k - l + 1] = np.argmin(path) // oldest
    best = int(np.argmin(path))
    if back is None:
        decided[t - l :] = state_windows(l, m)[best][::-1]
        return decided
    state = best
    for k in range(t - 1, -1, -1):
        decided[k] = state % m
        state = back[k, state]
    return decided


# -- BCJR --------------------------------------------------------------------


def bcjr(y_block, node: FunctionNode, l: int, m: int) -> np.ndarray:
    """Per-symbol posteriors ``P(S[k] = alpha_j | y)``, shape ``(t, m)``.

    Forward messages start uniform over states, backward messages at all
    ones. Node values are rescaled per time index (which cancels in the
    posterior) and messages are renormalized each step.
    """
    y = _check_block(y_block, l)
    if node.l != l or node.m != m:
        raise ValueError("function node dimensions do not match (l, m)")
    loglik = np.asarray(node.log_likelihood(y), dtype=float)
    t, n_states = loglik.shape
    peak = loglik.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise DegenerateEvidenceError("observation has zero likelihood under every state")
    lik = np.exp(loglik - peak)
    pred = predecessors(l, m)
    # successors[u] are the states reachable from u, i.e. a + m * (u mod m**(l-1))
    succ = np.arange(m)[None, :] + m * (np.arange(n_states) % m ** (l - 1))[:, None]

    current = np.arange(n_states) % m
    alpha = np.empty((t, n_states))
    a = np.full(n_states, 1.0 / n_states)
    for k in range(t):
        a = a[pred].sum(axis=1) * lik[k]
        total = a.sum()
        if not total > 0:
            raise DegenerateEvidenceError(f"forward message vanished at time {k}")
        a /= total
        alpha[k] = a
    beta = np.ones(n_states) / n_states
    post = np.empty((t, m))
    for k in range(t - 1, -1, -1):
        joint = alpha[k] * beta
        total = joint.sum()
        if not total > 0:
            raise DegenerateEvidenceError(f"backward message vanished at time {k}")
        post[k] = np.bincount(current, weights=joint, minlength=m) / total
        b = (lik[k] * beta)[succ].sum(axis=1)
        s = b.sum()
        if not s > 0:
            raise DegenerateEvidenceError(f"backward message vanished at time {k}")
        beta = b / s
    return post


# -- brute-force references -----------------------------------------------------


def _all_sequences(length: int, m: int):
    return np.array(list(itertools.product(range(m), repeat=length)), dtype=np.int64).reshape(-1, length)


def _sequence_states(seqs: np.ndarray, l: int, m: int) -> np.ndarray:
    """State index at each time for prefix-extended sequences (oldest first)."""
    t = seqs.shape[1] - (l - 1)
    cols = [encode_windows(seqs[:, i : i + l][:, ::-1], m) for i in range(t)]
    return np.stack(cols, axis=1)


def exhaustive_sequence(cost_table: np.ndarray, l: int, m: int) -> np.ndarray:
    """Exhaustive minimizer of the summed cost over every block and prefix."""
    t = cost_table.shape[0]
    seqs = _all_sequences(t + l - 1, m)
    states = _sequence_states(seqs, l, m)
    totals = cost_table[np.arange(t), states].sum(axis=1)
    return seqs[int(np.argmin(totals)), l - 1 :]


def exhaustive_marginals(loglik_table: np.ndarray, l: int, m: int) -> np.ndarray:
    """Per-symbol posteriors by summing the joint over every sequence."""
    t = loglik_table.shape[0]
    seqs = _all_sequences(t + l - 1, m)
    states = _sequence_states(seqs, l, m)
    logjoint = loglik_table[np.arange(t), states].sum(axis=1)
    w = np.exp(logjoint - logjoint.max())
    post = np.zeros((t, m))
    for k in range(t):
        post[k] = np.bincount(seqs[:, l - 1 + k], weights=w, minlength=m)
    return post / post.sum(axis=1, keepdims=True)


# -- MIMO ----------------------------------------------------------------------


def candidate_indices(K: int, m: int) -> np.ndarray:
    """Every symbol-index vector, row ``c`` encoding ``sum_k idx[k] * m**k``."""
    return state_windows(K, m)


def map_mimo_brute(y, posterior_fn, K: int, m: int, constellation: Constellation | None = None) -> np.ndarray:
    """Exhaustive argmax of ``posterior_fn(s_values, y)`` over all ``m**K`` inputs.

    Ties go to the smallest encoded index. ``s_values`` are constellation
    values when a constellation is given, otherwise indices.
    """
    if m**K > MAX_MAP_CANDIDATES:
        raise InstanceTooLargeError(f"m**K = {m**K} exceeds {MAX_MAP_CANDIDATES}")
    cands = candidate_indices(K, m)
    values = constellation.values[cands] if constellation is not None else cands
    best, best_score = 0, -np.inf
    for c, s in enumerate(values):
        score = posterior_fn(s, y)
        if score > best_score:
            best, best_score = c, score
    return cands[best].copy()


def mimo_log_likelihood(ch: MimoChannel, Y, H=None) -> np.ndarray:
    """``log p(y | s)`` for every row of ``Y`` and every candidate, ``(n, m**K)``."""
    H = ch.H if H is None else np.asarray(H, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    cands = ch.constellation.values[candidate_indices(ch.K, ch.m)]
    means = cands @ H.T
    if ch.kind == "awgn":
        d2 = ((Y[:, None, :] - means[None]) ** 2).sum(axis=-1)
        return -0.5 * d2 / ch.sigma_w2 - 0.5 * ch.n_r * np.log(2 * np.pi * ch.sigma_w2)
    lam = np.maximum(means / np.sqrt(ch.sigma_w2) + 1.0, _RATE_FLOOR)
    return (Y[:, None, :] * np.log(lam)[None] - lam[None] - gammaln(Y + 1.0)[:, None, :]).sum(axis=-1)


def map_mimo(ch: MimoChannel, Y, H=None) -> np.ndarray:
    """Batched exact MAP decisions for observations ``Y`` of shape ``(n, n_r)``."""
    if ch.m**ch.K > MAX_MAP_CANDIDATES:
        raise InstanceTooLargeError(f"m**K = {ch.m**ch.K} exceeds {MAX_MAP_CANDIDATES}")
    best = np.argmax(mimo_log_likelihood(ch, Y, H), axis=1)
    return candidate_indices(ch.K, ch.m)[best]


def _sic_step(Y, H, sigma_w2, P, alphas):
    """One interference-cancellation + soft-decoding pass, batched over rows of Y."""
    n, n_r = Y.shape
    e = P @ alphas
    v = P @ alphas**2 - e**2
    v = np.maximum(v, 0.0)
    # z_k = y - sum_{l != k} h_l e_l
    total = e @ H.T
    Z = Y[:, None, :] - total[:, None, :] + e[:, :, None] * H.T[None]
    outer = np.einsum("ik,jk->kij", H, H)
    full = np.einsum("nk,kij->nij", v, outer)
    cov = sigma_w2 * np.eye(n_r) + full[:, None] - np.einsum("nk,kij->nkij", v, outer)
    diff = Z[:, :, None, :] - alphas[None, None, :, None] * H.T[None, :, None, :]
    try:
        sol = np.linalg.solve(cov[:, :, None], diff[..., None])[..., 0]
    except np.linalg.LinAlgError:
        tr = np.trace(cov, axis1=-2, axis2=-1)
        ridge = np.maximum(1e-10 * tr, 1e-300)[..., None, None] * np.eye(n_r)
        sol = np.linalg.solve((cov + ridge)[:, :, None], diff[..., None])[..., 0]
    quad = (diff * sol).sum(axis=-1)
    return softmax(-0.5 * quad, axis=-1)


def sic_iterate(y, H, sigma_w2: float, priors, constellation: Constellation) -> np.ndarray:
    """One round of soft interference cancellation for every user.

    ``y`` is ``(n_r,)`` or a batch ``(n, n_r)``; ``priors`` is ``(K, m)`` or
    ``(n, K, m)``. Returns posteriors with the same layout as ``priors``.
    """
    Y = np.asarray(y, dtype=float)
    P = np.asarray(priors, dtype=float)
    H = np.asarray(H, dtype=float)
    single = Y.ndim == 1
    if single:
        Y, P = Y[None], P[None]
    if H.shape[0] != Y.shape[1] or P.shape[1:] != (H.shape[1], constellation.m):
        raise ValueError("inconsistent shapes for y, H and priors")
    out = _sic_step(Y, H, float(sigma_w2), P, constellation.values)
    return out[0] if single else out


def iterative_sic(y, H, sigma_w2: float, Q: int, constellation: Constellation, return_soft: bool = False):
    """Q rounds of SIC from uniform priors, then per-user argmax."""
    if Q < 1:
        raise ValueError("Q must be >= 1")
    Y = np.asarray(y, dtype=float)
    K, m = np.shape(H)[1], constellation.m
    P = np.full((*Y.shape[:-1], K, m), 1.0 / m)
    for _ in range(Q):
        P = sic_iterate(Y, H, sigma_w2, P, constellation)
    decisions = np.argmax(P, axis=-1)
    return (decisions, P) if return_soft else decisions
