"""Small dense-network engine: MLPs with softmax heads, cross-entropy and Adam.

Parameters may carry a leading *group* axis (shape ``(G, fan_in, fan_out)``)
so that several independent networks of one architecture run as a single
batched computation. A plain network simply has no group axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

LOG_FLOOR = 1e-12

_ACTIVATIONS = ("sigmoid", "relu")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected classifier.

    ``layer_dims`` lists every width including input and class count, e.g.
    ``(1, 100, 50, 16)``; ``activations`` holds one entry per hidden layer.
    """

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    head: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"layer_dims must hold >= 2 positive ints, got {self.layer_dims}")
        if len(self.activations) != len(self.layer_dims) - 2:
            raise ValueError(
                f"{len(self.layer_dims) - 2} hidden layers need as many activations, "
                f"got {len(self.activations)}"
            )
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.head != "softmax":
            raise ValueError(f"unsupported head {self.head!r}")

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def group_shape(self) -> tuple[int, ...]:
        return self.weights[0].shape[:-2]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 100
    batch_size: int = 27
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


def init_params(spec: MlpSpec, rng: np.random.Generator, group: tuple[int, ...] = ()) -> MlpParams:
    """Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(*group, fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=(*group, fan_out)))
    return MlpParams(weights, biases)


def zero_params(spec: MlpSpec, group: tuple[int, ...] = ()) -> MlpParams:
    dims = spec.layer_dims
    return MlpParams(
        [np.zeros((*group, a, b)) for a, b in zip(dims[:-1], dims[1:])],
        [np.zeros((*group, b)) for b in dims[1:]],
    )


def _sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_input(spec: MlpSpec, x: np.ndarray):
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {spec.n_in}")


def _forward_logits(spec, params, x):
    """Return logits and the per-layer cache needed by backprop."""
    cache = []
    h = x
    for i in range(spec.n_layers):
        pre = np.matmul(h, params.weights[i]) + params.biases[i][..., None, :]
        cache.append((h, pre))
        if i < spec.n_layers - 1:
            h = _sigmoid(pre) if spec.activations[i] == "sigmoid" else np.maximum(pre, 0.0)
        else:
            h = pre
    return h, cache


def logits(spec: MlpSpec, params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_input(spec, x)
    single = x.ndim == 1
    out, _ = _forward_logits(spec, params, x[None, :] if single else x)
    return out[0] if single else out


def forward(spec: MlpSpec, params: MlpParams, x) -> np.ndarray:
    """Class probabilities for input ``x`` of shape ``(n_in,)`` or ``(..., n, n_in)``."""
    return softmax(logits(spec, params, x), axis=-1)


def log_forward(spec: MlpSpec, params: MlpParams, x) -> np.ndarray:
    return log_softmax(logits(spec, params, x), axis=-1)


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=float)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} outside 0..{probs.shape[-1] - 1}")
    return float(-np.log(max(probs[label], LOG_FLOOR)))


def backward(spec: MlpSpec, params: MlpParams, cache, dlogits: np.ndarray):
    """Back-propagate ``dL/dlogits`` through the network.

    Returns ``(grads, dx)`` where ``grads`` mirrors ``params`` and ``dx`` is the
    gradient with respect to the network input.
    """
    gw = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    delta = dlogits
    for i in reversed(range(spec.n_layers)):
        h_in, pre = cache[i]
        if i < spec.n_layers - 1:
            if spec.activations[i] == "sigmoid":
                s = _sigmoid(pre)
                delta = delta * s * (1.0 - s)
            else:
                delta = delta * (pre > 0)
        gw[i] = np.matmul(np.swapaxes(h_in, -1, -2), delta)
        gb[i] = delta.sum(axis=-2)
        delta = np.matmul(delta, np.swapaxes(params.weights[i], -1, -2))
    return MlpParams(gw, gb), delta


def loss_and_grad(spec: MlpSpec, params: MlpParams, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch axis and its parameter gradient.

    With grouped parameters, each group's loss is averaged over its own batch
    and the returned loss is the sum over groups (so group gradients stay
    independent).
    """
    z, cache = _forward_logits(spec, params, x)
    logp = log_softmax(z, axis=-1)
    n = x.shape[-2]
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = float(-picked.sum() / n)
    dz = np.exp(logp)
    np.put_along_axis(dz, labels[..., None], np.take_along_axis(dz, labels[..., None], axis=-1) - 1.0, axis=-1)
    grads, _ = backward(spec, params, cache, dz / n)
    return loss, grads


class Adam:
    """Adam optimizer acting in place on a list of arrays."""

    def __init__(self, arrays: list[np.ndarray], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    @classmethod
    def from_config(cls, arrays, cfg: TrainConfig) -> Adam:
        return cls(arrays, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        eps_t = self.eps * np.sqrt(1.0 - b2**self.t)
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            a -= lr_t * m / (np.sqrt(v) + eps_t)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(
    spec: MlpSpec,
    x,
    labels,
    cfg: TrainConfig = TrainConfig(),
    params: MlpParams | None = None,
    history: list[float] | None = None,
) -> MlpParams:
    """Mini-batch Adam on the mean cross-entropy, for the full epoch budget.

    ``x`` has shape ``(n, n_in)`` (or ``(G, n, n_in)`` for grouped training
    with shared shuffling); ``labels`` holds class indices. Epoch-mean losses
    are appended to ``history`` when given.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    _check_input(spec, x)
    n = x.shape[-2]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= spec.n_classes:
        raise ValueError("labels outside the class range")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(spec, rng, group=x.shape[:-2])
    else:
        params = params.copy()
    opt = Adam.from_config(params.arrays(), cfg)
    for _ in range(cfg.max_epochs):
        total = 0.0
        for idx in iterate_minibatches(n, cfg.batch_size, rng):
            loss, grads = loss_and_grad(spec, params, x[..., idx, :], labels[..., idx])
            opt.step(grads.arrays())
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
    return params


def flat_params(params: MlpParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def _unflatten(params: MlpParams, vec: np.ndarray) -> MlpParams:
    out, pos = [], 0
    for a in params.arrays():
        out.append(vec[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    k = len(params.weights)
    return MlpParams(out[:k], out[k:])


def numeric_gradient(loss_fn, params: MlpParams, step=1e-5, dtype=np.float64) -> np.ndarray:
    """Central finite differences of ``loss_fn(params)`` over every parameter.

    The perturbed parameters are handed to ``loss_fn`` in ``dtype``; passing
    ``np.longdouble`` (with a loss that keeps that precision) pushes the
    rounding floor of the difference quotient well below float64's.
    """
    base = flat_params(params).astype(dtype)
    h = dtype(step)
    grad = np.empty(base.size)
    for j in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[j] += h
        minus[j] -= h
        grad[j] = float((loss_fn(_unflatten(params, plus)) - loss_fn(_unflatten(params, minus))) / (2 * h))
    return grad


def mean_cross_entropy(spec: MlpSpec, params: MlpParams, x, labels):
    """Batch-mean cross-entropy evaluated in the dtype of ``params`` (no float64 cast)."""
    z, _ = _forward_logits(spec, params, x)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    return -picked.sum() / x.shape[-2]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(|a| + |n|, 1e-8); 0 for identical vectors."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(spec: MlpSpec, params: MlpParams, x, label, step=1e-5) -> float:
    """Max elementwise relative error between backprop and finite differences.

    The finite-difference side runs in extended precision so that tiny
    gradient entries are not swamped by float64 rounding in the quotient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    _, grads = loss_and_grad(spec, params, x, labels)
    x_ext = x.astype(np.longdouble)
    numeric = numeric_gradient(
        lambda p: mean_cross_entropy(spec, p, x_ext, labels), params, step, dtype=np.longdouble
    )
    return relative_error(flat_params(grads), numeric)


# -- serialization ---------------------------------------------------------
#
# Text format, one token group per line:
#   neurodetect-mlp 1
#   dims <d0> <d1> ... <dL>
#   activations <a1> ... <a_{L-1}>        (empty list allowed)
#   group <g1> ...                        (empty for an ungrouped network)
# followed by, for every layer in order, the weight matrix then the bias
# vector, flattened row-major, one float per line in repr() form (exact
# round trip).

MLP_MAGIC = "neurodetect-mlp 1"


def dump_mlp(spec: MlpSpec, params: MlpParams) -> list[str]:
    lines = [
        MLP_MAGIC,
        "dims " + " ".join(map(str, spec.layer_dims)),
        " ".join(["activations", *spec.activations]),
        " ".join(["group", *map(str, params.group_shape)]),
    ]
    for w, b in zip(params.weights, params.biases):
        lines.extend(repr(float(v)) for v in w.ravel())
        lines.extend(repr(float(v)) for v in b.ravel())
    return lines


def parse_mlp(lines: list[str], pos: int = 0) -> tuple[MlpSpec, MlpParams, int]:
    """Parse one serialized network starting at ``lines[pos]``; return the next position."""
    if lines[pos].strip() != MLP_MAGIC:
        raise ValueError(f"expected {MLP_MAGIC!r} at line {pos + 1}")
    dims = tuple(int(v) for v in lines[pos + 1].split()[1:])
    acts = tuple(lines[pos + 2].split()[1:])
    group = tuple(int(v) for v in lines[pos + 3].split()[1:])
    spec = MlpSpec(dims, acts)
    pos += 4
    template = zero_params(spec, group)
    for arr in [*zip(template.weights, template.biases)]:
        for a in arr:
            a[...] = np.array([float(v) for v in lines[pos : pos + a.size]]).reshape(a.shape)
            pos += a.size
    return spec, template, pos


def save_mlp(path, spec: MlpSpec, params: MlpParams):
    Path(path).write_text("\n".join(dump_mlp(spec, params)) + "\n")


def load_mlp(path) -> tuple[MlpSpec, MlpParams]:
    spec, params, _ = parse_mlp(Path(path).read_text().splitlines())
    return spec, params
