"""One-dimensional Gaussian mixture fitted by EM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class Gmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: tuple[float, ...] = ()
    """Mean per-sample log-likelihood after initialization and after each EM step."""

    @property
    def k(self) -> int:
        return len(self.weights)


def _component_logpdf(y, means, variances):
    y = np.asarray(y, dtype=float)[..., None]
    return -0.5 * (np.log(2 * np.pi * variances) + (y - means) ** 2 / variances)


def gmm_logpdf(g: Gmm, y):
    out = logsumexp(np.log(g.weights) + _component_logpdf(y, g.means, g.variances), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def gmm_pdf(g: Gmm, y):
    """``sum_j w_j N(y; mu_j, var_j)``, vectorized over ``y``."""
    return np.exp(gmm_logpdf(g, y))


def fit_gmm(samples, k: int, max_iters: int = 200, tol: float = 1e-7, seed: int = 0) -> Gmm:
    """EM fit of a ``k``-component mixture.

    Initialization: means at the k-quantile midpoints, uniform weights and the
    global sample variance for every component. Quantile means that coincide
    (e.g. integer-valued data) are separated by a tiny seeded jitter, which is
    the only use of ``seed``. Stops after ``max_iters`` steps or once the mean
    log-likelihood gains less than ``tol``.
    """
    y = np.asarray(samples, dtype=float).ravel()
    if k < 1:
        raise ValueError("k must be >= 1")
    if y.size < k:
        raise ValueError(f"need at least k={k} samples, got {y.size}")

    means = np.quantile(y, (np.arange(k) + 0.5) / k)
    spread = max(y.std(), 1.0)
    _, first = np.unique(means, return_index=True)
    dup = np.ones(k, dtype=bool)
    dup[first] = False
    if dup.any():
        jitter = np.random.default_rng(seed).uniform(-1e-3, 1e-3, size=dup.sum())
        means[dup] += spread * jitter
    variances = np.full(k, max(y.var(), VARIANCE_FLOOR))
    weights = np.full(k, 1.0 / k)

    def e_step(weights, means, variances):
        joint = np.log(weights) + _component_logpdf(y, means, variances)
        norm = logsumexp(joint, axis=1)
        return np.exp(joint - norm[:, None]), float(norm.mean())

    resp, ll = e_step(weights, means, variances)
    history = [ll]
    for _ in range(max_iters):
        nk = resp.sum(axis=0)
        # components with no responsibility keep their previous parameters
        alive = nk > 1e-300
        weights = nk / y.size
        safe = np.where(alive, nk, 1.0)
        new_means = (resp.T @ y) / safe
        means = np.where(alive, new_means, means)
        new_var = (resp * (y[:, None] - means) ** 2).sum(axis=0) / safe
        variances = np.where(alive, np.maximum(new_var, VARIANCE_FLOOR), variances)
        weights = np.maximum(weights, 1e-300)
        weights = weights / weights.sum()
        resp, ll = e_step(weights, means, variances)
        gain = ll - history[-1]
        history.append(ll)
        if gain < tol:
            break
    return Gmm(weights, means, variances, tuple(history))
