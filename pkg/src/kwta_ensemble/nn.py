"""One-hidden-layer MLPs with hand-written backpropagation.

Everything is batch-major: inputs are ``(batch, in_dim)`` and outputs are
``(batch, out_dim)``. Weights follow the ``(out, in)`` layout so a layer
computes ``x @ w.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, as_matrix

__all__ = [
    "TraceError",
    "Params",
    "MlpParams",
    "CombinerParams",
    "ForwardTrace",
    "kaiming_uniform_init",
    "init_mlp",
    "init_combiner",
    "relu_forward",
    "softmax_row",
    "softmax_backward",
    "n_winners",
    "kwta_forward",
    "kwta_backward",
    "cross_entropy",
    "cross_entropy_per_sample",
    "cross_entropy_grad",
    "cross_entropy_logit_grad",
    "mlp_forward",
    "mlp_backward",
]

PROB_FLOOR = 1e-12


class TraceError(RuntimeError):
    """A backward pass was handed a trace that does not match its parameters."""


class Params:
    """Named float64 arrays plus gradient and momentum buffers of equal shape.

    ``version`` increases every time the values change through the
    optimizer, which lets backward passes reject traces recorded against
    older weights.
    """

    def __init__(self, **arrays):
        self.values = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.values.items()}
        self.velocity = {k: np.zeros_like(v) for k, v in self.values.items()}
        self.version = 0

    def __getattr__(self, name):
        values = self.__dict__.get("values")
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.values.items())
        return f"{type(self).__name__}({shapes})"

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def snapshot(self) -> dict:
        return {
            "values": {k: v.copy() for k, v in self.values.items()},
            "velocity": {k: v.copy() for k, v in self.velocity.items()},
        }

    def restore(self, snap: dict):
        for k in self.values:
            self.values[k][...] = snap["values"][k]
            self.velocity[k][...] = snap["velocity"][k]
        self.version += 1

    def set_values(self, **arrays):
        for k, v in arrays.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.values[k].shape:
                raise ShapeError(f"{k}: expected shape {self.values[k].shape}, got {v.shape}")
            self.values[k][...] = v
        self.version += 1


class MlpParams(Params):
    def __init__(self, w1, b1, w2, b2):
        super().__init__(w1=w1, b1=b1, w2=w2, b2=b2)
        hidden, in_dim = self.values["w1"].shape
        out_dim = self.values["w2"].shape[0]
        expected = {"b1": (hidden,), "w2": (out_dim, hidden), "b2": (out_dim,)}
        for k, shape in expected.items():
            if self.values[k].shape != shape:
                raise ShapeError(f"{k}: expected shape {shape}, got {self.values[k].shape}")

    @property
    def in_dim(self) -> int:
        return self.values["w1"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.values["w1"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.values["w2"].shape[0]


class CombinerParams(Params):
    """Affine layer mapping concatenated sub-network outputs to class scores."""

    def __init__(self, wz, bz):
        super().__init__(wz=wz, bz=bz)
        if self.values["bz"].shape != (self.values["wz"].shape[0],):
            raise ShapeError(f"bz: expected shape ({self.values['wz'].shape[0]},), got {self.values['bz'].shape}")

    @property
    def out_dim(self) -> int:
        return self.values["wz"].shape[0]

    @property
    def in_dim(self) -> int:
        return self.values["wz"].shape[1]


@dataclass
class ForwardTrace:
    """Cached activations of one mlp_forward call."""

    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    owner: int
    version: int


def kaiming_uniform_init(rng: np.random.Generator, fan_in: int, rows: int, cols: int) -> np.ndarray:
    """Uniform on ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_mlp(rng: np.random.Generator, in_dim: int, hidden_dim: int, out_dim: int) -> MlpParams:
    # Biases start at zero; only the weights are Kaiming-initialised.
    w1 = kaiming_uniform_init(rng, in_dim, hidden_dim, in_dim)
    w2 = kaiming_uniform_init(rng, hidden_dim, out_dim, hidden_dim)
    return MlpParams(w1, np.zeros(hidden_dim), w2, np.zeros(out_dim))


def init_combiner(rng: np.random.Generator, n_subnets: int, n_classes: int) -> CombinerParams:
    fan_in = n_subnets * n_classes
    return CombinerParams(kaiming_uniform_init(rng, fan_in, n_classes, fan_in), np.zeros(n_classes))


def relu_forward(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax_row(z: np.ndarray) -> np.ndarray:
    z = as_matrix(z)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the row softmax."""
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def n_winners(k_frac: float, n: int) -> int:
    """Number of kept units: ``floor(k_frac * n)`` clamped to ``[1, n]``."""
    if not 0.0 < k_frac <= 1.0:
        raise ValueError(f"k_frac must lie in (0, 1], got {k_frac}")
    return min(max(int(math.floor(k_frac * n)), 1), n)


def kwta_forward(z: np.ndarray, k_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Keep the top ``n_winners(k_frac, cols)`` entries of each row, zero the rest.

    Ties at the cut-off go to the lower column index. Returns the output and
    a boolean winner mask of the same shape.
    """
    z = as_matrix(z)
    if z.shape[1] < 1:
        raise ShapeError("kwta_forward needs at least one column")
    k = n_winners(k_frac, z.shape[1])
    # Stable sort on the negated values: descending, equal values keep column order.
    order = np.argsort(-z, axis=1, kind="stable")
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return np.where(mask, z, 0.0), mask


def kwta_backward(upstream_grad: np.ndarray, mask: np.ndarray) -> np.ndarray:
    upstream_grad = as_matrix(upstream_grad)
    if upstream_grad.shape != mask.shape:
        raise ShapeError(f"gradient shape {upstream_grad.shape} does not match mask shape {mask.shape}")
    return np.where(mask, upstream_grad, 0.0)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp, copy=False)


def cross_entropy_per_sample(probs: np.ndarray, labels) -> np.ndarray:
    probs = as_matrix(probs)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    picked = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class (probabilities floored at 1e-12)."""
    return float(np.mean(cross_entropy_per_sample(probs, labels)))


def cross_entropy_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to ``probs``.

    Zero where the floor is active, since the clamped loss is flat there.
    """
    probs = as_matrix(probs)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    rows = np.arange(probs.shape[0])
    picked = probs[rows, labels]
    grad = np.zeros_like(probs)
    live = picked >= PROB_FLOOR
    grad[rows[live], labels[live]] = -1.0 / (picked[live] * probs.shape[0])
    return grad


def cross_entropy_logit_grad(probs: np.ndarray, labels, weights=None) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the softmax logits.

    Equals ``(probs - onehot) / batch``, scaled per row by ``weights`` when
    given. Rows where the probability floor is active get zero.
    """
    probs = as_matrix(probs)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    rows = np.arange(probs.shape[0])
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad[probs[rows, labels] < PROB_FLOOR] = 0.0
    grad /= probs.shape[0]
    if weights is not None:
        grad *= np.asarray(weights, dtype=np.float64)[:, np.newaxis]
    return grad


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = as_matrix(x)
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[1]} features, network expects {params.in_dim}")
    pre = x @ params.w1.T + params.b1
    hidden = relu_forward(pre)
    logits = hidden @ params.w2.T + params.b2
    probs = softmax_row(logits)
    trace = ForwardTrace(x, pre, hidden, logits, probs, owner=id(params), version=params.version)
    return probs, trace


def mlp_backward(params: MlpParams, trace: ForwardTrace, grad_out: np.ndarray, wrt: str = "probs") -> np.ndarray:
    """Accumulate parameter gradients into ``params.grads``; return the input gradient.

    ``grad_out`` is the upstream gradient with respect to the softmax
    probabilities (``wrt="probs"``) or, when the caller already folded the
    softmax in, with respect to the logits (``wrt="logits"``).
    """
    if trace.owner != id(params) or trace.version != params.version:
        raise TraceError("trace was recorded for different or since-updated parameters")
    grad_out = as_matrix(grad_out)
    if grad_out.shape != trace.probs.shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} does not match output {trace.probs.shape}")
    if wrt == "probs":
        d_logits = softmax_backward(trace.probs, grad_out)
    elif wrt == "logits":
        d_logits = grad_out
    else:
        raise ValueError(f"wrt must be 'probs' or 'logits', got {wrt!r}")

    g = params.grads
    g["w2"] += d_logits.T @ trace.hidden
    g["b2"] += d_logits.sum(axis=0)
    d_pre = (d_logits @ params.w2) * (trace.pre > 0)
    g["w1"] += d_pre.T @ trace.x
    g["b1"] += d_pre.sum(axis=0)
    return d_pre @ params.w1
