"""Randomised finite-difference checks for every differentiable operation.

Each ``check_*`` builds a small random float64 instance, places the
operation's parameters *and* inputs in a :class:`ParamStore`, scores the
output with a fixed random linear functional (or the operation's own loss)
and runs :func:`finite_difference_check`. Instances are redrawn when they
land within a small margin of a kink (argmax ties, max/min switches), since
central differences are meaningless across one.
"""

from __future__ import annotations

import numpy as np

from .fusion_decoder import (
    Attention,
    DecoderLayer,
    EnhancerBlock,
    LayerNorm,
    ObjectQuerySet,
    PredictionHead,
    decoder_bwd,
    decoder_fwd,
    enhancer_block_bwd,
    enhancer_block_fwd,
)
from .losses import _corners, alignment_loss_with_grad, detection_loss_with_grad, giou_with_grad, FocalParams
from .mole import (
    LoraExpert,
    MoleLayer,
    Router,
    load_balance_loss,
    load_balance_prob_grad,
    mole_ffn_backward,
    mole_ffn_forward_cached,
)
from .numerics import FeedForward, ParamStore, finite_difference_check
from .qsa import QueryBank, SpeechSequence, qsa_backward, qsa_forward

STEP = 1e-6
TOLERANCE = 1e-5


def _rand(rng, shape, std=1.0):
    return rng.normal(0.0, std, size=shape)


def _grads(store: ParamStore, grads: dict) -> dict:
    return {n: grads[n] for n in store.names() if n in grads}


def check_qsa(seed: int, K: int = 2, n_frames: int = 5, d: int = 3):
    rng = np.random.default_rng([seed, 1])
    store = ParamStore()
    store.add("queries", _rand(rng, (K, d)))
    store.add("frames", _rand(rng, (n_frames, d)))
    R = _rand(rng, (K, d))

    def loss_fn(p):
        bank, speech = QueryBank(p["queries"]), SpeechSequence(p["frames"])
        out = qsa_forward(bank, speech).tokens
        dq, dx = qsa_backward(bank, speech, R.astype(out.dtype))
        return (R * out).sum(), {"queries": dq, "frames": dx}

    return finite_difference_check(loss_fn, store, STEP, TOLERANCE)


def _add_attention(store, rng, prefix, d):
    for n in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{n}", _rand(rng, (d, d), 1.0 / np.sqrt(d)))


def _add_ln(store, rng, prefix, d):
    store.add(f"{prefix}.gamma", 1.0 + _rand(rng, d, 0.2))
    store.add(f"{prefix}.beta", _rand(rng, d, 0.2))


def _add_ffn(store, rng, prefix, d_in, hidden, d_out):
    store.add(f"{prefix}.w1", _rand(rng, (hidden, d_in), 1.0 / np.sqrt(d_in)))
    store.add(f"{prefix}.b1", _rand(rng, hidden, 0.2))
    store.add(f"{prefix}.w2", _rand(rng, (d_out, hidden), 1.0 / np.sqrt(hidden)))
    store.add(f"{prefix}.b2", _rand(rng, d_out, 0.2))


def _attn(p, pre):
    return Attention(p[f"{pre}.wq"], p[f"{pre}.wk"], p[f"{pre}.wv"], p[f"{pre}.wo"])


def _ln(p, pre):
    return LayerNorm(p[f"{pre}.gamma"], p[f"{pre}.beta"])


def _ffn(p, pre):
    return FeedForward(p[f"{pre}.w1"], p[f"{pre}.b1"], p[f"{pre}.w2"], p[f"{pre}.b2"])


def check_enhancer(seed: int, d: int = 4, P: int = 9, K: int = 3, hidden: int = 8):
    rng = np.random.default_rng([seed, 2])
    store = ParamStore()
    _add_attention(store, rng, "v2s", d)
    _add_attention(store, rng, "s2v", d)
    for n in ("ln_v1", "ln_s1", "ln_v2", "ln_s2"):
        _add_ln(store, rng, n, d)
    _add_ffn(store, rng, "ffn_v", d, hidden, d)
    _add_ffn(store, rng, "ffn_s", d, hidden, d)
    store.add("in.v", _rand(rng, (P, d)))
    store.add("in.s", _rand(rng, (K, d)))
    Rv, Rs = _rand(rng, (P, d)), _rand(rng, (K, d))

    def loss_fn(p):
        block = EnhancerBlock(
            _attn(p, "v2s"), _attn(p, "s2v"), _ln(p, "ln_v1"), _ln(p, "ln_s1"),
            _ffn(p, "ffn_v"), _ffn(p, "ffn_s"), _ln(p, "ln_v2"), _ln(p, "ln_s2"),
        )
        v2, s2, cache = enhancer_block_fwd(block, p["in.v"], p["in.s"])
        dv, ds, g = enhancer_block_bwd(Rv.astype(v2.dtype), Rs.astype(s2.dtype), cache)
        g["in.v"], g["in.s"] = dv, ds
        return (Rv * v2).sum() + (Rs * s2).sum(), _grads(p, g)

    return finite_difference_check(loss_fn, store, STEP, TOLERANCE)


def _decoder_store(rng, d, hidden, n_layers):
    store = ParamStore()
    for l in range(n_layers):
        for n in ("self_attn", "vis_attn", "sp_attn"):
            _add_attention(store, rng, f"dec.{l}.{n}", d)
        for n in ("ln1", "ln2", "ln3", "ln4"):
            _add_ln(store, rng, f"dec.{l}.{n}", d)
        _add_ffn(store, rng, f"dec.{l}.ffn", d, hidden, d)
    _add_ffn(store, rng, "head.box", d, d, 4)
    store.add("head.align_bias", _rand(rng, 1))
    return store


def _decoder_views(p, n_layers, moles=None):
    layers = []
    for l in range(n_layers):
        pre = f"dec.{l}"
        layers.append(
            DecoderLayer(
                _attn(p, f"{pre}.self_attn"), _ln(p, f"{pre}.ln1"),
                _attn(p, f"{pre}.vis_attn"), _ln(p, f"{pre}.ln2"),
                _attn(p, f"{pre}.sp_attn"), _ln(p, f"{pre}.ln3"),
                _ffn(p, f"{pre}.ffn"), _ln(p, f"{pre}.ln4"),
                None if moles is None else moles[l],
            )
        )
    d = p["dec.0.ln1.gamma"].shape[0]
    head = PredictionHead(_ffn(p, "head.box"), p["head.align_bias"], 1.0 / np.sqrt(d))
    return layers, head


def check_decoder(seed: int, d: int = 4, n_q: int = 4, P: int = 9, K: int = 3, hidden: int = 8, n_layers: int = 2):
    rng = np.random.default_rng([seed, 3])
    store = _decoder_store(rng, d, hidden, n_layers)
    store.add("in.h", _rand(rng, (n_q, d)))
    store.add("in.v", _rand(rng, (P, d)))
    store.add("in.s", _rand(rng, (K, d)))
    ref = np.column_stack([rng.uniform(0.2, 0.8, (n_q, 2)), rng.uniform(0.05, 0.3, (n_q, 2))])
    Rb, Rl = _rand(rng, (n_q, 4)), _rand(rng, (n_q, K))

    def loss_fn(p):
        layers, head = _decoder_views(p, n_layers)
        queries = ObjectQuerySet(p["in.h"], ref.astype(p.dtype), np.arange(n_q))
        boxes, logits, cache = decoder_fwd(queries, p["in.v"], p["in.s"], layers, head)
        dh, dv, ds, layer_grads, head_grads = decoder_bwd(
            layers, head, Rb.astype(boxes.dtype), Rl.astype(logits.dtype), cache
        )
        g = {"in.h": dh, "in.v": dv, "in.s": ds}
        g.update({f"head.{k}": v for k, v in head_grads.items()})
        for l, lg in enumerate(layer_grads):
            g.update({f"dec.{l}.{k}": v for k, v in lg.items()})
        return (Rb * boxes).sum() + (Rl * logits).sum(), _grads(p, g)

    return finite_difference_check(loss_fn, store, STEP, TOLERANCE)


def _mole_view(p, n_experts, alpha):
    return MoleLayer(
        Router(p["router"]),
        [LoraExpert(p[f"in.{j}.A"], p[f"in.{j}.B"], alpha) for j in range(n_experts)],
        [LoraExpert(p[f"out.{j}.A"], p[f"out.{j}.B"], alpha) for j in range(n_experts)],
    )


def check_mole(seed: int, d: int = 4, hidden: int = 6, n_tokens: int = 6, n_experts: int = 2,
               rank: int = 2, alpha: float = 3.0, margin: float = 1e-3, lb_weight: float = 0.5):
    """MoLE block plus its balancing loss; host FFN weights are frozen.

    ``lb_weight`` scales the balancing term so the router gradient is
    exercised alongside the expert path.
    """
    rng = np.random.default_rng([seed, 4])
    for _ in range(100):
        x = _rand(rng, (n_tokens, d))
        router = _rand(rng, (n_experts, d))
        s = np.sort(x @ router.T, axis=1)
        if np.min(s[:, -1] - s[:, -2]) > margin:
            break
    store = ParamStore()
    store.add("router", router)
    for side, (di, do) in (("in", (d, hidden)), ("out", (hidden, d))):
        for j in range(n_experts):
            store.add(f"{side}.{j}.A", _rand(rng, (rank, di), 1.0 / np.sqrt(di)))
            store.add(f"{side}.{j}.B", _rand(rng, (do, rank), 0.5))
    store.add("x", x)
    for n, shape in (("w1", (hidden, d)), ("b1", (hidden,)), ("w2", (d, hidden)), ("b2", (d,))):
        store.add(f"host.{n}", _rand(rng, shape, 0.5), trainable=False)
    R = _rand(rng, (n_tokens, d))

    def loss_fn(p):
        layer = _mole_view(p, n_experts, alpha)
        host = FeedForward(p["host.w1"], p["host.b1"], p["host.w2"], p["host.b2"])
        y, cache = mole_ffn_forward_cached(layer, host, p["x"])
        lb = load_balance_loss(layer.stats)
        # the balancing loss uses the batch-mean gate probabilities; rebuild it in
        # the store's precision so the router dependence is differentiated exactly
        probs = cache[3]
        frac = layer.stats.fractions()
        lb_exact = n_experts * (frac * probs.mean(axis=0)).sum()
        assert abs(float(lb_exact) - lb) < 1e-9
        dp = np.tile(load_balance_prob_grad(layer.stats), (n_tokens, 1)) * lb_weight
        dx, _, mg = mole_ffn_backward(layer, R.astype(y.dtype), cache, dp.astype(y.dtype))
        mg["x"] = dx
        return (R * y).sum() + lb_weight * lb_exact, _grads(p, mg)

    return finite_difference_check(loss_fn, store, STEP, TOLERANCE)


def _away_from_kinks(pred, target, margin):
    a, b = _corners(pred), _corners(target)
    gaps = [np.abs(a[:, i][:, None] - b[:, j][:, None]) for i in range(4) for j in range(4) if i % 2 == j % 2]
    return np.min(gaps) > margin


def check_giou(seed: int, n: int = 4, margin: float = 1e-3):
    rng = np.random.default_rng([seed, 5])
    for _ in range(100):
        pred = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.1, 0.5, (n, 2))])
        target = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.1, 0.5, (n, 2))])
        if _away_from_kinks(pred, target, margin):
            break
    store = ParamStore()
    store.add("pred", pred)
    w = _rand(rng, n)

    def loss_fn(p):
        g, dg = giou_with_grad(p["pred"], target)
        return (w * g).sum(), {"pred": w[:, None] * dg}

    return finite_difference_check(loss_fn, store, STEP, TOLERANCE)


def check_l1(seed: int, n: int = 4, margin: float = 1e-3):
    rng = np.random.default_rng([seed, 6])
    for _ in range(100):
        pred = rng.uniform(0.05, 0.95, (n, 4))
        target = rng.uniform(0.05, 0.95, (n, 4))
        if np.min(np.abs(pred - target)) > margin:
            break
    store = ParamStore()
    store.add("pred", pred)
    w = _rand(rng, n)

    def loss_fn(p):
        diff = p["pred"] - target
        return (w[:, None] * np.abs(diff)).sum(), {"pred": w[:, None] * np.sign(diff)}

    return finite_difference_check(loss_fn, store, STEP, TOLERANCE)


def check_focal(seed: int, n_q: int = 4, K: int = 3, gamma: float = 2.0, alpha: float | None = 0.25):
    rng = np.random.default_rng([seed, 7])
    store = ParamStore()
    store.add("logits", _rand(rng, (n_q, K), 2.0))
    pm = (rng.random((n_q, K)) < 0.4).astype(np.float64)
    focal = FocalParams(gamma, alpha)

    def loss_fn(p):
        loss, dl = alignment_loss_with_grad(p["logits"], pm, focal)
        return loss, {"logits": dl}

    return finite_difference_check(loss_fn, store, STEP, TOLERANCE)


def check_pipeline(seed: int, mole: bool = False, step: float = STEP):
    """Whole model (aggregation, enhancer, selection, decoder, heads) under the detection loss."""
    from .data import ConceptVocabulary, SceneParams, generate_scene
    from .model import GroundingModel, ModelConfig

    cfg = ModelConfig(d=4, ffn_hidden=8, n_enhancer=1, n_decoder=1, n_queries=4, n_tokens=3, lora_rank=2)
    vocab = ConceptVocabulary.create(seed, n_concepts=4, d=4, d_concept=3)
    params = SceneParams(grid=(3, 3), box_cells=(1, 2), n_tokens=3, frames_per_concept=5,
                         object_count=(1, 2), distractor_count=(0, 1))
    scene = generate_scene(vocab, seed, params)
    rng = np.random.default_rng([seed, 8])
    # random features keep the speech tokens distinct; generator scenes make them
    # near-identical, which drives many attention gradients down to the 1e-8 floor
    scene.visual.positions = _rand(rng, scene.visual.positions.shape)
    scene.speech.frames = _rand(rng, scene.speech.frames.shape)
    model = GroundingModel.create(cfg, seed=seed)
    model.params["head.box.w2"] = _rand(rng, model.params["head.box.w2"].shape, 0.3)
    if mole:
        model.attach_mole(seed)
        for n in model.params.names():
            if n.endswith(".B"):
                model.params[n] = _rand(rng, model.params[n].shape, 0.3)

    def loss_fn(p):
        p.zero_grad()
        m = GroundingModel(cfg, p)
        boxes, logits, cache = m.forward(scene)
        br, db, dl, _ = detection_loss_with_grad(boxes, logits, scene.gts)
        m.backward(cache, db, dl)
        return br.l_det, {n: p.grad(n).copy() for n in p.names()}

    return finite_difference_check(loss_fn, model.params, step, TOLERANCE)


CHECKS = {
    "qsa": check_qsa,
    "enhancer": check_enhancer,
    "decoder": check_decoder,
    "mole": check_mole,
    "giou": check_giou,
    "l1": check_l1,
    "focal": check_focal,
}
