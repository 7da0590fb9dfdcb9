"""Query-based semantic aggregation of speech embeddings.

A bank of K learnable queries attends over the whole frame sequence; each
query emits one token, a softmax-weighted convex combination of the frames.
No projections, positional terms or residuals are involved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, softmax_backward, softmax_rows


class EmptySequenceError(ValueError):
    pass


@dataclass
class QueryBank:
    queries: np.ndarray  # (K, d)

    @property
    def K(self) -> int:
        return self.queries.shape[0]

    @property
    def d(self) -> int:
        return self.queries.shape[1]

    @classmethod
    def init(cls, K: int, d: int, rng: np.random.Generator, dtype=np.float64) -> "QueryBank":
        if K < 1:
            raise ValueError("need at least one query")
        q = rng.normal(0.0, 1.0 / np.sqrt(d), size=(K, d))
        return cls(q.astype(dtype))


@dataclass
class SpeechSequence:
    frames: np.ndarray  # (N_t, d)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class AggregatedTokens:
    tokens: np.ndarray  # (K, d)


def _attention_weights(queries, frames):
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptySequenceError("speech sequence has no frames")
    if queries.shape[1] != frames.shape[1]:
        raise DimensionError(
            f"query width {queries.shape[1]} != frame width {frames.shape[1]}"
        )
    scale = 1.0 / np.sqrt(queries.shape[1])
    return softmax_rows((queries @ frames.T) * scale), scale


def qsa_forward(bank: QueryBank, speech: SpeechSequence) -> AggregatedTokens:
    frames = speech.frames
    if frames.shape[0] and bank.K >= frames.shape[0]:
        warnings.warn(
            f"{bank.K} queries for only {frames.shape[0]} frames; aggregation will not compress",
            stacklevel=2,
        )
    weights, _ = _attention_weights(bank.queries, frames)
    return AggregatedTokens(weights @ frames)


def qsa_backward(bank: QueryBank, speech: SpeechSequence, d_tokens: np.ndarray):
    """Gradients of the aggregated tokens w.r.t. the queries and the frames.

    Returns ``(d_queries, d_frames)``.
    """
    q, x = bank.queries, speech.frames
    a, scale = _attention_weights(q, x)
    if d_tokens.shape != (q.shape[0], x.shape[1]):
        raise DimensionError(f"upstream gradient shape {d_tokens.shape} does not match tokens")
    da = d_tokens @ x.T
    ds = softmax_backward(da, a) * scale
    d_queries = ds @ x
    d_frames = a.T @ d_tokens + ds.T @ q
    return d_queries, d_frames
