"""Data-driven detectors: ViterbiNet, BCJRNet and DeepSIC.

ViterbiNet and BCJRNet keep their trellis recursions and only replace the
channel likelihood ``p(y | s)`` with a learned one, obtained by Bayes
inversion of a classifier ``p(s | y)`` and a mixture estimate of ``p(y)``:
``p(y|s) = m**l * p(s|y) * p(y)`` for equiprobable states.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from . import nn
from .channels import Dataset, FiniteMemoryChannel
from .density import Gmm, fit_gmm, gmm_logpdf
from .detect_model import (
    CostFn,
    FunctionNode,
    bcjr,
    encode_windows,
    exact_cost,
    viterbi,
)

# log-probabilities are floored here before entering costs
LOG_PROB_FLOOR = -700.0


def likelihood_spec(l: int, m: int) -> nn.MlpSpec:
    return nn.MlpSpec((1, 100, 50, m**l), ("sigmoid", "relu"))


@dataclass
class LikelihoodModel:
    """Learned ``p(s | y)`` classifier plus ``p(y)`` mixture for one channel.

    The classifier sees the standardized observation ``(y - y_mean) / y_scale``.
    """

    spec: nn.MlpSpec
    params: nn.MlpParams
    marginal: Gmm
    l: int
    m: int
    y_mean: float = 0.0
    y_scale: float = 1.0

    def log_state_posteriors(self, y) -> np.ndarray:
        x = (np.asarray(y, dtype=float).reshape(-1, 1) - self.y_mean) / self.y_scale
        return nn.log_forward(self.spec, self.params, x)

    def log_marginal(self, y) -> np.ndarray:
        return np.atleast_1d(gmm_logpdf(self.marginal, np.asarray(y, dtype=float).ravel()))


@dataclass
class AnalyticLikelihoodModel:
    """Exact posterior and marginal of a known channel, in the learned model's interface.

    Used to verify that the learned-likelihood plumbing reproduces the
    model-based detectors exactly.
    """

    channel: FiniteMemoryChannel

    @property
    def l(self) -> int:
        return self.channel.l

    @property
    def m(self) -> int:
        return self.channel.m

    def _loglik(self, y):
        return -exact_cost(self.channel)(np.asarray(y, dtype=float).ravel())

    def log_state_posteriors(self, y) -> np.ndarray:
        ll = self._loglik(y)
        return ll - logsumexp(ll, axis=1, keepdims=True)

    def log_marginal(self, y) -> np.ndarray:
        return logsumexp(self._loglik(y), axis=1) - self.l * np.log(self.m)


def train_likelihood_model(
    dataset: Dataset,
    l: int,
    m: int,
    cfg: nn.TrainConfig = nn.TrainConfig(),
    spec: nn.MlpSpec | None = None,
    n_components: int | None = None,
    history: list[float] | None = None,
) -> LikelihoodModel:
    if dataset.n_t == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = np.asarray(dataset.labels)
    if labels.shape[1] != l:
        raise ValueError(f"dataset windows have length {labels.shape[1]}, expected l={l}")
    spec = spec or likelihood_spec(l, m)
    y = np.asarray(dataset.observations, dtype=float).ravel()
    y_mean, y_scale = float(y.mean()), float(y.std()) or 1.0
    states = encode_windows(labels, m)
    params = nn.train(spec, ((y - y_mean) / y_scale)[:, None], states, cfg, history=history)
    gmm = fit_gmm(y, n_components or m**l, seed=cfg.seed)
    return LikelihoodModel(spec, params, gmm, l, m, y_mean, y_scale)


def _learned_loglik(model):
    log_ml = model.l * np.log(model.m)

    def loglik(y):
        y = np.asarray(y, dtype=float).ravel()
        logpost = np.maximum(model.log_state_posteriors(y), LOG_PROB_FLOOR)
        return log_ml + logpost + np.maximum(model.log_marginal(y), LOG_PROB_FLOOR)[:, None]

    return loglik


def learned_cost(model) -> CostFn:
    """Cost table ``-log(m**l * p(s|y) * p(y))`` for the Viterbi recursion."""
    loglik = _learned_loglik(model)
    return lambda y: -loglik(y)


def learned_function_node(model) -> FunctionNode:
    return FunctionNode(_learned_loglik(model), model.l, model.m)


def viterbinet_detect(model, y_block, mode: str = "traceback") -> np.ndarray:
    return viterbi(y_block, learned_cost(model), model.l, model.m, mode)


def bcjrnet_detect(model, y_block) -> np.ndarray:
    return np.argmax(bcjr(y_block, learned_function_node(model), model.l, model.m), axis=1)


# -- DeepSIC -------------------------------------------------------------------


def deepsic_e2e_spec(n_r: int, K: int, m: int) -> nn.MlpSpec:
    return nn.MlpSpec((n_r + (K - 1) * m, 60, m), ("relu",))


def deepsic_seq_spec(n_r: int, K: int, m: int) -> nn.MlpSpec:
    return nn.MlpSpec((n_r + (K - 1) * m, 100, 50, m), ("sigmoid", "relu"))


@dataclass
class DeepSicNet:
    """K x Q grid of classifier blocks.

    ``columns[q]`` holds the parameters of the K blocks of iteration ``q + 1``
    stacked along a leading axis of length K. Block ``(k, q)`` consumes the
    observation followed by the previous iteration's soft estimates of every
    other user in ascending order.
    """

    spec: nn.MlpSpec
    columns: list[nn.MlpParams]
    K: int
    Q: int
    m: int
    n_r: int

    def __post_init__(self):
        if len(self.columns) != self.Q:
            raise ValueError(f"need {self.Q} columns, got {len(self.columns)}")
        if self.spec.n_in != self.n_r + (self.K - 1) * self.m or self.spec.n_classes != self.m:
            raise ValueError("block architecture does not match (n_r, K, m)")
        for col in self.columns:
            if col.group_shape != (self.K,):
                raise ValueError("every column must stack exactly K blocks")


def init_deepsic(spec: nn.MlpSpec, K: int, Q: int, m: int, n_r: int, seed: int = 0) -> DeepSicNet:
    rng = np.random.default_rng(seed)
    return DeepSicNet(spec, [nn.init_params(spec, rng, group=(K,)) for _ in range(Q)], K, Q, m, n_r)


def _other_users(K: int) -> np.ndarray:
    """``others[k]`` lists users ``!= k`` in ascending order, shape ``(K, K-1)``."""
    return np.array([[j for j in range(K) if j != k] for k in range(K)], dtype=np.int64).reshape(K, K - 1)


def block_inputs(Y: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Stacked block inputs ``(K, n, n_r + (K-1)m)`` from ``Y (n, n_r)`` and ``P (n, K, m)``."""
    n, K, m = P.shape
    others = P[:, _other_users(K), :].reshape(n, K, (K - 1) * m)
    y_rep = np.broadcast_to(Y[:, None, :], (n, K, Y.shape[1]))
    return np.concatenate([y_rep, others], axis=2).transpose(1, 0, 2)


def _uniform_priors(n, K, m):
    return np.full((n, K, m), 1.0 / m)


def deepsic_column_forward(spec, params, Y, P):
    """One iteration: ``(n, K, m)`` soft estimates from the previous ones."""
    probs = nn.forward(spec, params, block_inputs(Y, P))
    return probs.transpose(1, 0, 2)


def deepsic_forward(net: DeepSicNet, y, return_all: bool = False):
    """Soft estimates of the last iteration, ``(K, m)`` or ``(n, K, m)`` for a batch.

    With ``return_all`` the list of every iteration's estimates, starting
    with the uniform initialization, is returned instead.
    """
    Y = np.asarray(y, dtype=float)
    single = Y.ndim == 1
    if single:
        Y = Y[None]
    if Y.shape[1] != net.n_r:
        raise ValueError(f"observation has {Y.shape[1]} entries, expected n_r={net.n_r}")
    P = _uniform_priors(len(Y), net.K, net.m)
    trail = [P]
    for params in net.columns:
        P = deepsic_column_forward(net.spec, params, Y, P)
        trail.append(P)
    if return_all:
        return [p[0] for p in trail] if single else trail
    return P[0] if single else P


def deepsic_detect(net: DeepSicNet, y) -> np.ndarray:
    return np.argmax(deepsic_forward(net, y), axis=-1)


def _e2e_loss_and_grad(net: DeepSicNet, columns, Y, S, stop_gradient=False):
    """Mean-over-batch sum-over-users cross-entropy at the last iteration and its gradient."""
    n, K, m = len(Y), net.K, net.m
    n_r = net.n_r
    P = _uniform_priors(n, K, m)
    caches = []
    for params in columns:
        z, cache = nn._forward_logits(net.spec, params, block_inputs(Y, P))
        caches.append((cache, P))
        P = softmax(z, axis=-1).transpose(1, 0, 2)
    logp = log_softmax(z, axis=-1).transpose(1, 0, 2)
    loss = float(-np.take_along_axis(logp, S[:, :, None], axis=2).sum() / n)

    grads = [None] * len(columns)
    # dL/dz for softmax + cross-entropy at the output column
    dz = P.copy()
    np.put_along_axis(dz, S[:, :, None], np.take_along_axis(dz, S[:, :, None], axis=2) - 1.0, axis=2)
    dz = dz.transpose(1, 0, 2) / n
    others = _other_users(K)
    for q in reversed(range(len(columns))):
        cache, P_in = caches[q]
        g, dx = nn.backward(net.spec, columns[q], cache, dz)
        grads[q] = g
        if q == 0 or stop_gradient:
            if stop_gradient:
                for j in range(q):
                    grads[j] = nn.zero_params(net.spec, (K,))
            break
        # route input gradients back onto the previous iteration's estimates
        d_prior = dx[:, :, n_r:].reshape(K, n, K - 1, m)
        dP = np.zeros((n, K, m))
        for k in range(K):
            dP[:, others[k]] += d_prior[k]
        # softmax Jacobian of the previous column
        dz_prev = P_in * (dP - (dP * P_in).sum(axis=2, keepdims=True))
        dz = dz_prev.transpose(1, 0, 2)
    return loss, grads


def deepsic_e2e_gradient_check(net: DeepSicNet, Y, S, step=1e-5) -> float:
    """Max relative error of the end-to-end gradient against finite differences."""
    Y = np.asarray(Y, dtype=float)
    S = np.asarray(S, dtype=np.int64)
    _, grads = _e2e_loss_and_grad(net, net.columns, Y, S)
    analytic = np.concatenate([nn.flat_params(g) for g in grads])
    base = np.concatenate([nn.flat_params(c) for c in net.columns])
    sizes = [nn.flat_params(c).size for c in net.columns]

    def unpack(vec):
        out, pos = [], 0
        for col, size in zip(net.columns, sizes):
            out.append(nn._unflatten(col, vec[pos : pos + size]))
            pos += size
        return out

    numeric = np.empty_like(base)
    for j in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[j] += step
        minus[j] -= step
        lp = _e2e_loss_and_grad(net, unpack(plus), Y, S)[0]
        lm = _e2e_loss_and_grad(net, unpack(minus), Y, S)[0]
        numeric[j] = (lp - lm) / (2 * step)
    return nn.relative_error(analytic, numeric)


def _check_mimo_dataset(net, dataset):
    if dataset.n_t == 0:
        raise ValueError("cannot train on an empty dataset")
    Y = np.asarray(dataset.observations, dtype=float)
    S = np.asarray(dataset.labels, dtype=np.int64)
    if Y.shape[1] != net.n_r or S.shape[1] != net.K:
        raise ValueError("dataset shape does not match the network")
    return Y, S


def deepsic_train_e2e(
    net: DeepSicNet,
    dataset: Dataset,
    cfg: nn.TrainConfig = nn.TrainConfig(),
    stop_gradient: bool = False,
    history: list[float] | None = None,
) -> DeepSicNet:
    """Joint Adam training of all K*Q blocks on the summed cross-entropy.

    Gradients flow through the soft estimates passed between iterations
    unless ``stop_gradient`` is set, in which case only the last column
    trains.
    """
    Y, S = _check_mimo_dataset(net, dataset)
    columns = [c.copy() for c in net.columns]
    opt = nn.Adam.from_config([a for c in columns for a in c.arrays()], cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(Y)
    for _ in range(cfg.max_epochs):
        total = 0.0
        for idx in nn.iterate_minibatches(n, cfg.batch_size, rng):
            loss, grads = _e2e_loss_and_grad(net, columns, Y[idx], S[idx], stop_gradient)
            opt.step([a for g in grads for a in g.arrays()])
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
    return DeepSicNet(net.spec, columns, net.K, net.Q, net.m, net.n_r)


def deepsic_train_seq(
    net: DeepSicNet,
    dataset: Dataset,
    cfg: nn.TrainConfig = nn.TrainConfig(),
    history: list[list[float]] | None = None,
    column_inputs: list[np.ndarray] | None = None,
) -> DeepSicNet:
    """Iteration-by-iteration training.

    Column ``q`` is trained on the observations plus the soft estimates that
    the already-trained columns produce on the same ``n_t`` samples (uniform
    for the first column). The K blocks of a column are independent and are
    trained side by side with a shared shuffling order. Trained columns are
    frozen. ``column_inputs``, when given, collects each column's training
    inputs.
    """
    Y, S = _check_mimo_dataset(net, dataset)
    P = _uniform_priors(len(Y), net.K, net.m)
    labels = S.T
    columns = []
    for q, init in enumerate(net.columns):
        x = block_inputs(Y, P)
        if column_inputs is not None:
            column_inputs.append(x)
        hist = [] if history is not None else None
        col_cfg = nn.TrainConfig(
            cfg.learning_rate, cfg.max_epochs, cfg.batch_size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.seed + q
        )
        params = nn.train(net.spec, x, labels, col_cfg, params=init, history=hist)
        if history is not None:
            history.append(hist)
        columns.append(params)
        P = deepsic_column_forward(net.spec, params, Y, P)
    return DeepSicNet(net.spec, columns, net.K, net.Q, net.m, net.n_r)


# -- serialization -------------------------------------------------------------
#
# Likelihood model file:
#   neurodetect-likelihood 1
#   l <l> m <m>
#   standardize <y_mean> <y_scale>
#   gmm <k>
#   <k lines: weight mean variance>
#   <serialized MLP, see nn.dump_mlp>
#
# DeepSIC file (grid manifest):
#   neurodetect-deepsic 1
#   K <K> Q <Q> m <m> n_r <n_r>
#   <Q serialized MLPs with group (K,), column 1 first>


def save_likelihood_model(path, model: LikelihoodModel):
    g = model.marginal
    lines = [
        "neurodetect-likelihood 1",
        f"l {model.l} m {model.m}",
        f"standardize {model.y_mean!r} {model.y_scale!r}",
        f"gmm {g.k}",
        *(f"{float(w)!r} {float(mu)!r} {float(v)!r}" for w, mu, v in zip(g.weights, g.means, g.variances)),
        *nn.dump_mlp(model.spec, model.params),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def save_deepsic(path, net: DeepSicNet):
    lines = ["neurodetect-deepsic 1", f"K {net.K} Q {net.Q} m {net.m} n_r {net.n_r}"]
    for col in net.columns:
        lines.extend(nn.dump_mlp(net.spec, col))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path):
    """Load either a :class:`LikelihoodModel` or a :class:`DeepSicNet` file."""
    lines = Path(path).read_text().splitlines()
    magic = lines[0].strip()
    if magic == "neurodetect-likelihood 1":
        _, l, _, m = lines[1].split()
        _, y_mean, y_scale = lines[2].split()
        k = int(lines[3].split()[1])
        rows = np.array([[float(v) for v in line.split()] for line in lines[4 : 4 + k]]).reshape(k, 3)
        gmm = Gmm(rows[:, 0], rows[:, 1], rows[:, 2])
        spec, params, _ = nn.parse_mlp(lines, 4 + k)
        return LikelihoodModel(spec, params, gmm, int(l), int(m), float(y_mean), float(y_scale))
    if magic == "neurodetect-deepsic 1":
        f = lines[1].split()
        K, Q, m, n_r = int(f[1]), int(f[3]), int(f[5]), int(f[7])
        pos, columns, spec = 2, [], None
        for _ in range(Q):
            spec, params, pos = nn.parse_mlp(lines, pos)
            columns.append(params)
        return DeepSicNet(spec, columns, K, Q, m, n_r)
    raise ValueError(f"unrecognized model file {path}")


def save_model(path, model):
    if isinstance(model, LikelihoodModel):
        save_likelihood_model(path, model)
    elif isinstance(model, DeepSicNet):
        save_deepsic(path, model)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
