"""Mixture-of-LoRA-experts plugin for feed-forward blocks.

One router per layer picks a single expert per token (Top-1). Each of the two
linear transforms of the host feed-forward block owns its own set of LoRA
experts, and the router's choice applies to both sets. The expert output is
added unweighted; the router is trained only through the load-balancing loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DimensionError,
    FeedForward,
    gelu_backward,
    gelu_forward,
    linear_backward,
    linear_forward,
    softmax_backward,
    softmax_rows,
)


@dataclass
class Router:
    weight: np.ndarray  # (K_e, d); row j scores expert j

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]


@dataclass
class LoraExpert:
    A: np.ndarray  # (r, d_in)
    B: np.ndarray  # (d_out, r)
    lora_alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.lora_alpha / self.rank

    @classmethod
    def init(cls, d_in, d_out, rank, lora_alpha, rng, dtype=np.float64):
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min({d_in}, {d_out})")
        # B starts at zero so the adapter is a no-op when attached
        A = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in)).astype(dtype)
        return cls(A, np.zeros((d_out, rank), dtype=dtype), float(lora_alpha))


@dataclass
class RoutingStats:
    """Per-expert token counts and summed gate probabilities for one batch."""

    n_experts: int
    counts: np.ndarray = None
    prob_sum: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.n_experts, dtype=np.int64)
        if self.prob_sum is None:
            self.prob_sum = np.zeros(self.n_experts, dtype=np.float64)

    @property
    def tokens(self) -> int:
        return int(self.counts.sum())

    def update(self, choice: np.ndarray, probs: np.ndarray) -> None:
        self.counts += np.bincount(choice, minlength=self.n_experts)
        self.prob_sum += probs.sum(axis=0)

    def reset(self) -> None:
        self.counts[:] = 0
        self.prob_sum[:] = 0.0

    def fractions(self) -> np.ndarray:
        t = self.tokens
        return self.counts / t if t else np.zeros(self.n_experts)

    def mean_probs(self) -> np.ndarray:
        t = self.tokens
        return self.prob_sum / t if t else np.zeros(self.n_experts)

    def merge(self, other: "RoutingStats") -> None:
        self.counts += other.counts
        self.prob_sum += other.prob_sum

    def to_dict(self) -> dict:
        return {
            "counts": [int(c) for c in self.counts],
            "mean_probs": [float(p) for p in self.mean_probs()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class MoleLayer:
    router: Router
    experts_in: list[LoraExpert]  # attached to the first linear transform
    experts_out: list[LoraExpert]  # attached to the second
    stats: RoutingStats = field(default=None)

    def __post_init__(self):
        if len(self.experts_in) != self.router.n_experts or len(self.experts_out) != self.router.n_experts:
            raise DimensionError("each expert set needs one expert per router row")
        if self.stats is None:
            self.stats = RoutingStats(self.router.n_experts)

    @property
    def n_experts(self) -> int:
        return self.router.n_experts

    @classmethod
    def init(cls, d, hidden, n_experts, rank, lora_alpha, rng, dtype=np.float64):
        router = Router(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_experts, d)).astype(dtype))
        e_in = [LoraExpert.init(d, hidden, rank, lora_alpha, rng, dtype) for _ in range(n_experts)]
        e_out = [LoraExpert.init(hidden, d, rank, lora_alpha, rng, dtype) for _ in range(n_experts)]
        return cls(router, e_in, e_out)


def route(router: Router, q: np.ndarray):
    """Top-1 routing. Returns ``(k_star, probs)``; works on one token or a batch."""
    scores = q @ router.weight.T
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return np.argmax(scores, axis=-1), softmax_rows(scores)


def expert_apply(e: LoraExpert, q: np.ndarray) -> np.ndarray:
    if q.shape[-1] != e.A.shape[1]:
        raise DimensionError(f"expert expects width {e.A.shape[1]}, got {q.shape[-1]}")
    return e.scale * ((q @ e.A.T) @ e.B.T)


def _experts_forward(experts, x, choice):
    out = np.zeros((x.shape[0], experts[0].B.shape[0]), dtype=x.dtype)
    for j, e in enumerate(experts):
        m = choice == j
        if m.any():
            out[m] = expert_apply(e, x[m])
    return out


def _experts_backward(experts, x, choice, dy):
    dx = np.zeros_like(x)
    grads = []
    for j, e in enumerate(experts):
        m = choice == j
        if not m.any():
            grads.append((np.zeros_like(e.A), np.zeros_like(e.B)))
            continue
        xm, dym = x[m], dy[m]
        u = xm @ e.A.T  # (t, r)
        du = e.scale * (dym @ e.B)
        grads.append((du.T @ xm, e.scale * (dym.T @ u)))
        dx[m] = du @ e.A
    return dx, grads


def mole_ffn_forward_cached(layer: MoleLayer, host: FeedForward, x: np.ndarray, record: bool = True):
    choice, probs = route(layer.router, x)
    h_pre, c1 = linear_forward(x, host.w1, host.b1)
    h_pre = h_pre + _experts_forward(layer.experts_in, x, choice)
    h, cg = gelu_forward(h_pre)
    y, c2 = linear_forward(h, host.w2, host.b2)
    y = y + _experts_forward(layer.experts_out, h, choice)
    if record:
        layer.stats.update(choice, probs)
    return y, (x, h, choice, probs, c1, cg, c2)


def mole_ffn_forward(layer: MoleLayer, host: FeedForward, x: np.ndarray) -> np.ndarray:
    """Host feed-forward output plus the routed expert terms on both linears."""
    squeeze = x.ndim == 1
    y, _ = mole_ffn_forward_cached(layer, host, np.atleast_2d(x))
    return y[0] if squeeze else y


def mole_ffn_backward(layer: MoleLayer, dy, cache, d_probs=None):
    """Backward through the MoLE-augmented block.

    ``d_probs`` is the gradient reaching the gate probabilities (from the
    balancing loss); it is the router's only gradient source. Returns
    ``(dx, host_grads, mole_grads)`` where ``mole_grads`` is keyed
    ``router``, ``in.{j}.A``, ``in.{j}.B``, ``out.{j}.A``, ``out.{j}.B``.
    """
    x, h, choice, probs, c1, cg, c2 = cache
    dh, dw2, db2 = linear_backward(dy, c2)
    dh_e, g_out = _experts_backward(layer.experts_out, h, choice, dy)
    dh = dh + dh_e
    dh_pre = gelu_backward(dh, cg)
    dx, dw1, db1 = linear_backward(dh_pre, c1)
    dx_e, g_in = _experts_backward(layer.experts_in, x, choice, dh_pre)
    dx = dx + dx_e
    mole_grads = {}
    if d_probs is not None:
        ds = softmax_backward(d_probs, probs)
        mole_grads["router"] = ds.T @ x
        dx = dx + ds @ layer.router.weight
    else:
        mole_grads["router"] = np.zeros_like(layer.router.weight)
    for j in range(layer.n_experts):
        mole_grads[f"in.{j}.A"], mole_grads[f"in.{j}.B"] = g_in[j]
        mole_grads[f"out.{j}.A"], mole_grads[f"out.{j}.B"] = g_out[j]
    host_grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
    return dx, host_grads, mole_grads


def load_balance_loss(stats: RoutingStats) -> float:
    """``K_e * sum_j f_j * P_j``; zero when no token was routed."""
    if stats.tokens == 0:
        return 0.0
    return float(stats.n_experts * np.dot(stats.fractions(), stats.mean_probs()))


def load_balance_prob_grad(stats: RoutingStats) -> np.ndarray:
    """d loss / d p_tj for any routed token t (same for all tokens): K f_j / T."""
    if stats.tokens == 0:
        return np.zeros(stats.n_experts)
    return stats.n_experts * stats.fractions() / stats.tokens
