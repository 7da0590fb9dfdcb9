"""Dense-array arithmetic, differentiable primitives and gradient checking.

Tensors are plain :class:`numpy.ndarray` objects of rank 1 to 3. Every
differentiable primitive comes as a ``*_forward`` / ``*_backward`` pair: the
forward returns ``(output, cache)`` and the backward maps an upstream gradient
plus the cache to gradients of the inputs and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

MAX_RANK = 3


class DimensionError(ValueError):
    """Raised when tensor shapes do not fit together."""


class CapacityError(ValueError):
    """Raised when more items are requested than are available."""


class EvaluationError(RuntimeError):
    """Raised when a loss evaluation yields a non-finite value."""


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise DimensionError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction."""
    x = np.asarray(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p, eps: float = 1e-5):
    p = np.clip(np.asarray(p), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# primitives


def linear_forward(x, w, b=None):
    """``y = x @ w.T + b`` with ``w`` stored as (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-dim {w.shape[1]}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_bias = cache
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_forward(x):
    # tanh approximation; smooth everywhere, which keeps finite differences honest
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def attention_forward(xq, xkv, wq, wk, wv, wo):
    """Single-head scaled dot-product attention of ``xq`` over ``xkv``."""
    if xq.shape[-1] != wq.shape[1] or xkv.shape[-1] != wk.shape[1]:
        raise DimensionError("attention: feature width does not match projection weights")
    q = xq @ wq.T
    k = xkv @ wk.T
    v = xkv @ wv.T
    scale = 1.0 / np.sqrt(q.shape[-1])
    a = softmax_rows((q @ k.T) * scale)
    o = a @ v
    y = o @ wo.T
    return y, (xq, xkv, q, k, v, a, o, scale, wq, wk, wv, wo)


def attention_backward(dy, cache):
    """Returns ``(dxq, dxkv, {"wq", "wk", "wv", "wo"})``."""
    xq, xkv, q, k, v, a, o, scale, wq, wk, wv, wo = cache
    dwo = dy.T @ o
    do = dy @ wo
    da = do @ v.T
    dv = a.T @ do
    ds = softmax_backward(da, a) * scale
    dq = ds @ k
    dk = ds.T @ q
    dxq = dq @ wq
    dxkv = dk @ wk + dv @ wv
    grads = {"wq": dq.T @ xq, "wk": dk.T @ xkv, "wv": dv.T @ xkv, "wo": dwo}
    return dxq, dxkv, grads


# ---------------------------------------------------------------------------
# parameter storage


@dataclass
class _Entry:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named parameters with gradient accumulators and trainable flags.

    Iteration is always in lexicographic name order.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, _Entry] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        if value.ndim == 0 or value.ndim > MAX_RANK:
            raise DimensionError(f"{name}: rank must be 1..{MAX_RANK}")
        self._entries[name] = _Entry(value, np.zeros_like(value), trainable)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __setitem__(self, name: str, value) -> None:
        entry = self._entries[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != entry.value.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {entry.value.shape}")
        entry.value = value.copy()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._entries if n.startswith(prefix))

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def accumulate(self, name: str, g) -> None:
        entry = self._entries[name]
        entry.grad += np.asarray(g, dtype=self.dtype).reshape(entry.grad.shape)

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            entry.grad[...] = 0.0

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def set_trainable(self, names, flag: bool = True) -> None:
        for n in names:
            self._entries[n].trainable = flag

    def freeze_all(self) -> None:
        for entry in self._entries.values():
            entry.trainable = False

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._entries[n].trainable]

    def values(self) -> dict[str, np.ndarray]:
        return {n: self._entries[n].value for n in self.names()}

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for n in self.names():
            e = self._entries[n]
            out.add(n, e.value, e.trainable)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    step: float
    tolerance: float
    worst: tuple[str, tuple] | None = field(default=None)

    @property
    def overall_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_difference_check(
    loss_fn: Callable[[ParamStore], tuple[float, dict[str, np.ndarray]] | float],
    params: ParamStore,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    analytic: dict[str, np.ndarray] | None = None,
    oracle_dtype=np.longdouble,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(store)`` must compute from the store it is given and return
    either ``(loss, grads)`` or just ``loss`` (then ``analytic`` is required).
    Analytic gradients come from the float64 ``params``. The difference
    quotients ``(L(t+h) - L(t-h)) / 2h`` are evaluated on a copy cast to
    ``oracle_dtype``; extended precision keeps their roundoff (~eps*|L|/h)
    far below the tolerance. Pass ``oracle_dtype=None`` to difference in
    float64 on ``params`` itself.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if params.dtype != np.float64:
        raise TypeError("gradient checks require a float64 ParamStore")

    def evaluate(store):
        out = loss_fn(store)
        loss = out[0] if isinstance(out, tuple) else out
        if not np.isfinite(float(loss)):
            raise EvaluationError(f"loss is not finite: {float(loss)}")
        return out

    if analytic is None:
        out = evaluate(params)
        if not isinstance(out, tuple):
            raise ValueError("loss_fn returned no gradients and none were supplied")
        analytic = out[1]
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}

    store = params if oracle_dtype is None else params.astype(oracle_dtype)
    wide = store.dtype

    def scalar(out):
        loss = out[0] if isinstance(out, tuple) else out
        return np.asarray(loss, dtype=wide)[()]

    h = wide.type(step)
    errors: dict[str, float] = {}
    worst, worst_err = None, -1.0
    for name in store.trainable_names():
        value = store[name]
        ga = analytic.get(name, np.zeros(value.shape))
        max_err = 0.0
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            lp = scalar(evaluate(store))
            value[idx] = orig - h
            lm = scalar(evaluate(store))
            value[idx] = orig
            num = float((lp - lm) / (2 * h))
            a = float(ga[idx])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > max_err:
                max_err = err
            if err > worst_err:
                worst, worst_err = (name, idx), err
        errors[name] = max_err
    passed = all(e <= tolerance for e in errors.values())
    return GradCheckReport(errors, passed, step, tolerance, worst)


@dataclass
class FeedForward:
    """Two linear transforms with a GELU in between; weights stored (out, in)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def ffn_forward(ffn: FeedForward, x):
    h_pre, c1 = linear_forward(x, ffn.w1, ffn.b1)
    h, cg = gelu_forward(h_pre)
    y, c2 = linear_forward(h, ffn.w2, ffn.b2)
    return y, (c1, cg, c2)


def ffn_backward(dy, cache):
    c1, cg, c2 = cache
    dh, dw2, db2 = linear_backward(dy, c2)
    dx, dw1, db1 = linear_backward(gelu_backward(dh, cg), c1)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
