"""Feature enhancer, speech-guided query selection and cross-modality decoder.

Each stage has a cached forward (``*_fwd``) and a matching backward
(``*_bwd``); the public ``*_forward`` functions wrap them for inference use.
Gradient dicts are keyed by the sub-module path of the parameter, e.g.
``"v2s.wq"`` or ``"ln1.gamma"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mole import MoleLayer, mole_ffn_backward, mole_ffn_forward_cached
from .numerics import (
    CapacityError,
    DimensionError,
    FeedForward,
    attention_backward,
    attention_forward,
    ffn_backward,
    ffn_forward,
    inverse_sigmoid,
    layer_norm_backward,
    layer_norm_forward,
    sigmoid,
)
from .qsa import AggregatedTokens


def grid_anchors(rows: int, cols: int) -> np.ndarray:
    """Cell centres of a rows x cols grid, row-major, as (cx, cy)."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([(c.ravel() + 0.5) / cols, (r.ravel() + 0.5) / rows], axis=1)


def positional_encoding(anchors: np.ndarray, d: int) -> np.ndarray:
    """Fixed sinusoidal code of anchor centres; ``d`` must be a multiple of 4."""
    if d % 4:
        raise DimensionError("positional encoding width must be a multiple of 4")
    freqs = np.pi * np.arange(1, d // 4 + 1)
    cx = anchors[:, :1] * freqs
    cy = anchors[:, 1:2] * freqs
    return np.concatenate([np.sin(cx), np.cos(cx), np.sin(cy), np.cos(cy)], axis=1)


@dataclass
class VisualFeatures:
    positions: np.ndarray  # (P, d)
    grid_size: tuple[int, int]
    anchors: np.ndarray = None  # (P, 2)

    def __post_init__(self):
        rows, cols = self.grid_size
        if rows * cols != self.positions.shape[0]:
            raise DimensionError(f"grid {self.grid_size} does not match {self.positions.shape[0]} positions")
        if self.anchors is None:
            self.anchors = grid_anchors(rows, cols)
        if np.any(self.anchors <= 0) or np.any(self.anchors >= 1):
            raise ValueError("anchors must lie strictly inside the unit square")

    def with_positions(self, positions: np.ndarray) -> "VisualFeatures":
        return VisualFeatures(positions, self.grid_size, self.anchors)


@dataclass
class ObjectQuerySet:
    embeddings: np.ndarray  # (N_q, d)
    ref_boxes: np.ndarray  # (N_q, 4), cxcywh
    indices: np.ndarray  # selected visual positions


@dataclass
class Detection:
    box: np.ndarray  # (4,) cxcywh
    logits: np.ndarray  # (K,)


@dataclass
class Attention:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class LayerNorm:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass
class EnhancerBlock:
    v2s: Attention  # visual positions attend to speech tokens
    s2v: Attention  # speech tokens attend to visual positions
    ln_v1: LayerNorm
    ln_s1: LayerNorm
    ffn_v: FeedForward
    ffn_s: FeedForward
    ln_v2: LayerNorm
    ln_s2: LayerNorm


@dataclass
class DecoderLayer:
    self_attn: Attention
    ln1: LayerNorm
    vis_attn: Attention
    ln2: LayerNorm
    sp_attn: Attention
    ln3: LayerNorm
    ffn: FeedForward
    ln4: LayerNorm
    mole: MoleLayer | None = None


@dataclass
class PredictionHead:
    box: FeedForward  # d -> d -> 4 offsets in inverse-sigmoid space
    align_bias: np.ndarray  # (1,)
    logit_scale: float = 1.0


def _attn(a: Attention, xq, xkv):
    return attention_forward(xq, xkv, a.wq, a.wk, a.wv, a.wo)


def _ln(n: LayerNorm, x):
    return layer_norm_forward(x, n.gamma, n.beta)


def _put(grads, prefix, sub):
    for k, v in sub.items():
        grads[f"{prefix}.{k}"] = v


def _put_ln(grads, prefix, dgamma, dbeta):
    grads[f"{prefix}.gamma"] = dgamma
    grads[f"{prefix}.beta"] = dbeta


# ---------------------------------------------------------------------------
# feature enhancer


def enhancer_block_fwd(block: EnhancerBlock, v, s):
    if v.shape[1] != s.shape[1]:
        raise DimensionError(f"visual width {v.shape[1]} != speech width {s.shape[1]}")
    av, c_v2s = _attn(block.v2s, v, s)
    as_, c_s2v = _attn(block.s2v, s, v)
    v1, c_lv1 = _ln(block.ln_v1, v + av)
    s1, c_ls1 = _ln(block.ln_s1, s + as_)
    fv, c_fv = ffn_forward(block.ffn_v, v1)
    fs, c_fs = ffn_forward(block.ffn_s, s1)
    v2, c_lv2 = _ln(block.ln_v2, v1 + fv)
    s2, c_ls2 = _ln(block.ln_s2, s1 + fs)
    return v2, s2, (c_v2s, c_s2v, c_lv1, c_ls1, c_fv, c_fs, c_lv2, c_ls2)


def enhancer_block_bwd(dv2, ds2, cache):
    c_v2s, c_s2v, c_lv1, c_ls1, c_fv, c_fs, c_lv2, c_ls2 = cache
    g = {}
    dv1, *lg = layer_norm_backward(dv2, c_lv2)
    _put_ln(g, "ln_v2", *lg)
    ds1, *lg = layer_norm_backward(ds2, c_ls2)
    _put_ln(g, "ln_s2", *lg)
    dx, fg = ffn_backward(dv1, c_fv)
    dv1 = dv1 + dx
    _put(g, "ffn_v", fg)
    dx, fg = ffn_backward(ds1, c_fs)
    ds1 = ds1 + dx
    _put(g, "ffn_s", fg)
    dv, *lg = layer_norm_backward(dv1, c_lv1)
    _put_ln(g, "ln_v1", *lg)
    ds, *lg = layer_norm_backward(ds1, c_ls1)
    _put_ln(g, "ln_s1", *lg)
    dq, dkv, ag = attention_backward(dv, c_v2s)
    _put(g, "v2s", ag)
    dv_total = dv + dq
    ds_total = ds + dkv
    dq, dkv, ag = attention_backward(ds, c_s2v)
    _put(g, "s2v", ag)
    return dv_total + dkv, ds_total + dq, g


def feature_enhancer_forward(visual: VisualFeatures, speech: AggregatedTokens, blocks):
    v, s = visual.positions, speech.tokens
    for block in blocks:
        v, s, _ = enhancer_block_fwd(block, v, s)
    return visual.with_positions(v), AggregatedTokens(s)


# ---------------------------------------------------------------------------
# query selection


def selection_scores(visual_positions, speech_tokens) -> np.ndarray:
    return (visual_positions @ speech_tokens.T).max(axis=1)


def query_select(
    visual: VisualFeatures, speech: AggregatedTokens, n_q: int, box_size=(0.1, 0.1)
) -> ObjectQuerySet:
    """Pick the ``n_q`` positions that best match any speech token.

    Ties go to the lower position index.
    """
    P = visual.positions.shape[0]
    if n_q > P:
        raise CapacityError(f"cannot select {n_q} queries from {P} positions")
    scores = selection_scores(visual.positions, speech.tokens)
    order = np.argsort(-scores, kind="stable")[:n_q]
    anchors = visual.anchors[order]
    ref = np.empty((n_q, 4), dtype=visual.positions.dtype)
    ref[:, :2] = anchors
    ref[:, 2] = box_size[0]
    ref[:, 3] = box_size[1]
    return ObjectQuerySet(visual.positions[order].copy(), ref, order)


# ---------------------------------------------------------------------------
# decoder


def decoder_layer_fwd(layer: DecoderLayer, h, v, s, record_routing=True):
    a1, c_sa = _attn(layer.self_attn, h, h)
    h1, c_l1 = _ln(layer.ln1, h + a1)
    a2, c_va = _attn(layer.vis_attn, h1, v)
    h2, c_l2 = _ln(layer.ln2, h1 + a2)
    a3, c_pa = _attn(layer.sp_attn, h2, s)
    h3, c_l3 = _ln(layer.ln3, h2 + a3)
    if layer.mole is None:
        f, c_f = ffn_forward(layer.ffn, h3)
    else:
        f, c_f = mole_ffn_forward_cached(layer.mole, layer.ffn, h3, record=record_routing)
    h4, c_l4 = _ln(layer.ln4, h3 + f)
    return h4, (c_sa, c_l1, c_va, c_l2, c_pa, c_l3, c_f, c_l4)


def decoder_layer_bwd(layer: DecoderLayer, dh4, cache, d_probs=None):
    """Returns ``(dh, dv, ds, grads)``."""
    c_sa, c_l1, c_va, c_l2, c_pa, c_l3, c_f, c_l4 = cache
    g = {}
    dx, *lg = layer_norm_backward(dh4, c_l4)
    _put_ln(g, "ln4", *lg)
    if layer.mole is None:
        df, fg = ffn_backward(dx, c_f)
    else:
        df, fg, mg = mole_ffn_backward(layer.mole, dx, c_f, d_probs)
        _put(g, "mole", mg)
    _put(g, "ffn", fg)
    dh3 = dx + df
    dx, *lg = layer_norm_backward(dh3, c_l3)
    _put_ln(g, "ln3", *lg)
    dq, ds, ag = attention_backward(dx, c_pa)
    _put(g, "sp_attn", ag)
    dh2 = dx + dq
    dx, *lg = layer_norm_backward(dh2, c_l2)
    _put_ln(g, "ln2", *lg)
    dq, dv, ag = attention_backward(dx, c_va)
    _put(g, "vis_attn", ag)
    dh1 = dx + dq
    dx, *lg = layer_norm_backward(dh1, c_l1)
    _put_ln(g, "ln1", *lg)
    dq, dkv, ag = attention_backward(dx, c_sa)
    _put(g, "self_attn", ag)
    return dx + dq + dkv, dv, ds, g


def head_fwd(head: PredictionHead, h, s, ref_boxes):
    delta, c_box = ffn_forward(head.box, h)
    boxes = sigmoid(inverse_sigmoid(ref_boxes) + delta)
    logits = (h @ s.T) * head.logit_scale + head.align_bias
    return boxes, logits, (c_box, boxes, h, s)


def head_bwd(head: PredictionHead, d_boxes, d_logits, cache):
    """Returns ``(dh, ds, grads)``."""
    c_box, boxes, h, s = cache
    dz = d_boxes * boxes * (1.0 - boxes)
    dh, fg = ffn_backward(dz, c_box)
    g = {}
    _put(g, "box", fg)
    dl = d_logits * head.logit_scale
    dh = dh + dl @ s
    ds = dl.T @ h
    g["align_bias"] = np.array([d_logits.sum()])
    return dh, ds, g


def decoder_fwd(queries: ObjectQuerySet, v, s, layers, head: PredictionHead, record_routing=True):
    if queries.embeddings.shape[1] != v.shape[1] or v.shape[1] != s.shape[1]:
        raise DimensionError("decoder inputs disagree on feature width")
    h = queries.embeddings
    caches = []
    for layer in layers:
        h, c = decoder_layer_fwd(layer, h, v, s, record_routing)
        caches.append(c)
    boxes, logits, c_head = head_fwd(head, h, s, queries.ref_boxes)
    return boxes, logits, (caches, c_head)


def decoder_bwd(layers, head: PredictionHead, d_boxes, d_logits, cache, d_probs=None):
    """Returns ``(dh0, dv, ds, layer_grads, head_grads)``.

    ``d_probs`` is an optional per-layer list of gate-probability gradients.
    """
    caches, c_head = cache
    dh, ds, head_grads = head_bwd(head, d_boxes, d_logits, c_head)
    dv = 0.0
    layer_grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        dp = None if d_probs is None else d_probs[i]
        dh, dv_i, ds_i, g = decoder_layer_bwd(layers[i], dh, caches[i], dp)
        dv = dv + dv_i
        ds = ds + ds_i
        layer_grads[i] = g
    return dh, dv, ds, layer_grads, head_grads


def decoder_forward(
    queries: ObjectQuerySet, visual: VisualFeatures, speech: AggregatedTokens, layers, head: PredictionHead
) -> list[Detection]:
    boxes, logits, _ = decoder_fwd(queries, visual.positions, speech.tokens, layers, head)
    return [Detection(b, l) for b, l in zip(boxes, logits)]
