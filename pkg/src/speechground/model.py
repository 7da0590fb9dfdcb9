"""The full grounding model: speech aggregation, fusion trunk, heads, MoLE.

All weights live in one :class:`ParamStore`; the structured views used by the
forward functions are rebuilt from it on every call, so optimizer updates and
checkpoint loads need no extra bookkeeping.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

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
    positional_encoding,
    query_select,
)
from .mole import LoraExpert, MoleLayer, Router, RoutingStats
from .numerics import FeedForward, ParamStore
from .qsa import AggregatedTokens, QueryBank, SpeechSequence, qsa_backward, qsa_forward


@dataclass
class ModelConfig:
    d: int = 32
    ffn_hidden: int = 64
    n_enhancer: int = 2
    n_decoder: int = 3
    n_queries: int = 16
    n_tokens: int = 8  # QSA query count
    ref_box_size: tuple[float, float] = (0.1, 0.1)
    prior_prob: float = 0.01  # initial alignment probability
    n_experts: int = 2
    lora_rank: int = 4
    lora_alpha: float | None = None  # defaults to the rank

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ref_box_size"] = list(self.ref_box_size)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "ref_box_size" in d:
            d["ref_box_size"] = tuple(d["ref_box_size"])
        return cls(**d)


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def _add_attention(params, rng, prefix, d):
    for n in ("wq", "wk", "wv"):
        params.add(f"{prefix}.{n}", _normal(rng, (d, d), 1.0 / np.sqrt(d)))
    params.add(f"{prefix}.wo", _normal(rng, (d, d), 0.5 / np.sqrt(d)))


def _add_ln(params, prefix, d):
    params.add(f"{prefix}.gamma", np.ones(d))
    params.add(f"{prefix}.beta", np.zeros(d))


def _add_ffn(params, rng, prefix, d_in, hidden, d_out, zero_out=False):
    params.add(f"{prefix}.w1", _normal(rng, (hidden, d_in), 1.0 / np.sqrt(d_in)))
    params.add(f"{prefix}.b1", np.zeros(hidden))
    w2 = np.zeros((d_out, hidden)) if zero_out else _normal(rng, (d_out, hidden), 0.5 / np.sqrt(hidden))
    params.add(f"{prefix}.w2", w2)
    params.add(f"{prefix}.b2", np.zeros(d_out))


def _attention(p, prefix):
    return Attention(p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"], p[f"{prefix}.wo"])


def _ln(p, prefix):
    return LayerNorm(p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


def _ffn(p, prefix):
    return FeedForward(p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ParamStore:
    rng = np.random.default_rng([seed, 0x5EED])
    d, hid = config.d, config.ffn_hidden
    p = ParamStore(np.float64)
    p.add("qsa.queries", QueryBank.init(config.n_tokens, d, rng).queries)
    for b in range(config.n_enhancer):
        pre = f"enh.{b}"
        _add_attention(p, rng, f"{pre}.v2s", d)
        _add_attention(p, rng, f"{pre}.s2v", d)
        for n in ("ln_v1", "ln_s1", "ln_v2", "ln_s2"):
            _add_ln(p, f"{pre}.{n}", d)
        _add_ffn(p, rng, f"{pre}.ffn_v", d, hid, d)
        _add_ffn(p, rng, f"{pre}.ffn_s", d, hid, d)
    for l in range(config.n_decoder):
        pre = f"dec.{l}"
        for n in ("self_attn", "vis_attn", "sp_attn"):
            _add_attention(p, rng, f"{pre}.{n}", d)
        for n in ("ln1", "ln2", "ln3", "ln4"):
            _add_ln(p, f"{pre}.{n}", d)
        _add_ffn(p, rng, f"{pre}.ffn", d, hid, d)
    _add_ffn(p, rng, "head.box", d, d, 4, zero_out=True)
    bias = -np.log((1 - config.prior_prob) / config.prior_prob)
    p.add("head.align_bias", np.array([bias]))
    return p.astype(dtype) if np.dtype(dtype) != np.float64 else p


def mole_param_names(config: ModelConfig) -> list[str]:
    names = []
    for l in range(config.n_decoder):
        names.append(f"dec.{l}.mole.router")
        for side in ("in", "out"):
            for j in range(config.n_experts):
                names += [f"dec.{l}.mole.{side}.{j}.A", f"dec.{l}.mole.{side}.{j}.B"]
    return sorted(names)


@dataclass
class SceneCache:
    tokens: np.ndarray
    speech: SpeechSequence
    enh_caches: list
    selected: ObjectQuerySet
    dec_cache: tuple
    n_positions: int


class GroundingModel:
    """Stateless apart from its parameters and per-layer routing statistics."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params
        self.routing = [RoutingStats(config.n_experts) for _ in range(config.n_decoder)]

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "GroundingModel":
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def has_mole(self) -> bool:
        return "dec.0.mole.router" in self.params

    def attach_mole(self, seed: int = 0) -> list[str]:
        """Add a router and two LoRA expert sets to every decoder FFN (B = 0)."""
        if self.has_mole:
            raise ValueError("MoLE already attached")
        c = self.config
        rng = np.random.default_rng([seed, 0x301E])
        alpha = c.lora_alpha if c.lora_alpha is not None else c.lora_rank
        for l in range(c.n_decoder):
            layer = MoleLayer.init(c.d, c.ffn_hidden, c.n_experts, c.lora_rank, alpha, rng)
            pre = f"dec.{l}.mole"
            self.params.add(f"{pre}.router", layer.router.weight)
            for side, experts in (("in", layer.experts_in), ("out", layer.experts_out)):
                for j, e in enumerate(experts):
                    self.params.add(f"{pre}.{side}.{j}.A", e.A)
                    self.params.add(f"{pre}.{side}.{j}.B", e.B)
        return mole_param_names(c)

    # -- structured views ---------------------------------------------------

    def query_bank(self) -> QueryBank:
        return QueryBank(self.params["qsa.queries"])

    def enhancer_blocks(self) -> list[EnhancerBlock]:
        p = self.params
        blocks = []
        for b in range(self.config.n_enhancer):
            pre = f"enh.{b}"
            blocks.append(
                EnhancerBlock(
                    _attention(p, f"{pre}.v2s"),
                    _attention(p, f"{pre}.s2v"),
                    _ln(p, f"{pre}.ln_v1"),
                    _ln(p, f"{pre}.ln_s1"),
                    _ffn(p, f"{pre}.ffn_v"),
                    _ffn(p, f"{pre}.ffn_s"),
                    _ln(p, f"{pre}.ln_v2"),
                    _ln(p, f"{pre}.ln_s2"),
                )
            )
        return blocks

    def decoder_layers(self) -> list[DecoderLayer]:
        p = self.params
        c = self.config
        alpha = c.lora_alpha if c.lora_alpha is not None else c.lora_rank
        layers = []
        for l in range(c.n_decoder):
            pre = f"dec.{l}"
            mole = None
            if self.has_mole:
                m = f"{pre}.mole"
                experts = {
                    side: [
                        LoraExpert(p[f"{m}.{side}.{j}.A"], p[f"{m}.{side}.{j}.B"], alpha)
                        for j in range(c.n_experts)
                    ]
                    for side in ("in", "out")
                }
                mole = MoleLayer(Router(p[f"{m}.router"]), experts["in"], experts["out"], self.routing[l])
            layers.append(
                DecoderLayer(
                    _attention(p, f"{pre}.self_attn"),
                    _ln(p, f"{pre}.ln1"),
                    _attention(p, f"{pre}.vis_attn"),
                    _ln(p, f"{pre}.ln2"),
                    _attention(p, f"{pre}.sp_attn"),
                    _ln(p, f"{pre}.ln3"),
                    _ffn(p, f"{pre}.ffn"),
                    _ln(p, f"{pre}.ln4"),
                    mole,
                )
            )
        return layers

    def head(self) -> PredictionHead:
        return PredictionHead(
            _ffn(self.params, "head.box"), self.params["head.align_bias"], 1.0 / np.sqrt(self.config.d)
        )

    # -- forward / backward -------------------------------------------------

    def forward(self, scene, record_routing: bool = True):
        """Returns ``(boxes (N_q, 4), logits (N_q, K), cache)`` for one scene."""
        dt = self.dtype
        speech = SpeechSequence(np.asarray(scene.speech.frames, dtype=dt))
        tokens = qsa_forward(self.query_bank(), speech).tokens
        visual = scene.visual
        v = np.asarray(visual.positions, dtype=dt) + positional_encoding(visual.anchors, self.config.d).astype(dt)
        s = tokens
        enh_caches = []
        for block in self.enhancer_blocks():
            v, s, c = enhancer_block_fwd(block, v, s)
            enh_caches.append(c)
        selected = query_select(
            visual.with_positions(v), AggregatedTokens(s), self.config.n_queries, self.config.ref_box_size
        )
        boxes, logits, dec_cache = decoder_fwd(
            selected, v, s, self.decoder_layers(), self.head(), record_routing
        )
        cache = SceneCache(tokens, speech, enh_caches, selected, dec_cache, v.shape[0])
        return boxes, logits, cache

    def _upstream_trainable(self) -> bool:
        return any(self.params.is_trainable(n) for n in self.params.names("qsa.")) or any(
            self.params.is_trainable(n) for n in self.params.names("enh.")
        )

    def backward(self, cache: SceneCache, d_boxes, d_logits, d_probs=None) -> None:
        """Accumulate parameter gradients for one scene into the store."""
        p = self.params
        dt = self.dtype
        layers = self.decoder_layers()
        dh0, dv, ds, layer_grads, head_grads = decoder_bwd(
            layers, self.head(), np.asarray(d_boxes, dt), np.asarray(d_logits, dt), cache.dec_cache, d_probs
        )
        for k, g in head_grads.items():
            p.accumulate(f"head.{k}", g)
        for l, grads in enumerate(layer_grads):
            for k, g in grads.items():
                p.accumulate(f"dec.{l}.{k}", g)
        if not self._upstream_trainable():
            return
        dv = np.zeros((cache.n_positions, self.config.d), dtype=dt) + dv
        dv[cache.selected.indices] += dh0
        for b in reversed(range(self.config.n_enhancer)):
            dv, ds, grads = enhancer_block_bwd(dv, ds, cache.enh_caches[b])
            for k, g in grads.items():
                p.accumulate(f"enh.{b}.{k}", g)
        d_queries, _ = qsa_backward(self.query_bank(), cache.speech, ds)
        p.accumulate("qsa.queries", d_queries)

    def predict(self, scene):
        boxes, logits, _ = self.forward(scene, record_routing=False)
        return boxes, logits

    def reset_routing(self) -> None:
        for r in self.routing:
            r.reset()


def model_from_checkpoint(ckpt, dtype=np.float32, config: ModelConfig | None = None) -> GroundingModel:
    """Rebuild a model from a checkpoint; MoLE tensors are picked up if present."""
    from .checkpoint import CheckpointError

    if config is None:
        doc = ckpt.config.get("model", ckpt.config)
        try:
            config = ModelConfig.from_dict(doc)
        except TypeError as exc:
            raise CheckpointError(f"checkpoint config is not a model config: {exc}") from None
    ckpt.require(init_params(config, 0).names())
    model = GroundingModel(config, ckpt.to_store(dtype))
    if any(n.startswith("dec.") and ".mole." in n for n in ckpt.tensors):
        ckpt.require(mole_param_names(config))
    return model
