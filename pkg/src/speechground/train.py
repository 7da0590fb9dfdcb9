"""Two-stage training: full pre-training, then MoLE-only fine-tuning.

Scenes are generated on the fly from (corpus seed, scene seed) and visited
in a seeded per-epoch order. Per-scene gradients are reduced in batch order,
so a run is fully determined by its config.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import ConceptVocabulary, SceneParams, generate_scene
from .losses import CostWeights, FocalParams, LossBreakdown, detection_loss_with_grad, total_loss
from .mole import load_balance_loss, load_balance_prob_grad
from .model import GroundingModel, ModelConfig, mole_param_names, model_from_checkpoint
from .optim import AdamWState, adamw_step

STAGES = ("pretrain", "finetune")
FREEZE_MODES = ("desk", "full")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def _strict(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    max_steps: int | None = None  # overrides epochs when set
    warmup_steps: int = 100
    lb_weight: float = 1e-2
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    n_scenes: int = 2000
    n_concepts: int = 10
    d_concept: int = 16
    corpus_seed: int = 0
    init_seed: int = 0
    mole_seed: int = 0
    shuffle_seed: int = 0
    freeze: str = "desk"  # "full" also freezes the decoder in pre-training (full-scale mask)
    match_weights: tuple[float, float, float] = (2.0, 5.0, 2.0)
    loss_weights: tuple[float, float, float] = (1.0, 5.0, 2.0)
    focal_gamma: float = 2.0
    focal_alpha: float | None = 0.25
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneParams = field(default_factory=SceneParams)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.freeze not in FREEZE_MODES:
            raise ConfigError(f"freeze must be one of {FREEZE_MODES}")
        if self.lr < 0 or self.weight_decay < 0 or self.lb_weight < 0 or self.warmup_steps < 0:
            raise ConfigError("rates, weights and warm-up must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.n_scenes < 1:
            raise ConfigError("batch size and scene count must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        self.betas = tuple(self.betas)
        self.match_weights = tuple(self.match_weights)
        self.loss_weights = tuple(self.loss_weights)
        CostWeights(*self.match_weights)
        CostWeights(*self.loss_weights)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n_scenes / self.batch_size)

    @property
    def total_steps(self) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * self.steps_per_epoch

    def vocabulary(self) -> ConceptVocabulary:
        return ConceptVocabulary.create(self.corpus_seed, self.n_concepts, self.model.d, self.d_concept)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        out["scene"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.scene).items()}
        for k in ("betas", "match_weights", "loss_weights"):
            out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        _strict(cls, doc, "config")
        doc = dict(doc)
        if "model" in doc:
            _strict(ModelConfig, doc["model"], "config.model")
            doc["model"] = ModelConfig.from_dict(doc["model"])
        if "scene" in doc:
            _strict(SceneParams, doc["scene"], "config.scene")
            doc["scene"] = SceneParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["scene"].items()})
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)


def reference_config(stage: str = "pretrain") -> TrainConfig:
    """The shipped desk-scale configuration used by the acceptance suite."""
    if stage == "pretrain":
        return TrainConfig(
            stage="pretrain", lr=1e-3, epochs=10, warmup_steps=50, weight_decay=1e-4, loss_weights=(64.0, 5.0, 2.0)
        )
    return TrainConfig(
        stage="finetune", lr=1e-3, epochs=1, max_steps=150, warmup_steps=20, weight_decay=0.0, loss_weights=(64.0, 5.0, 2.0)
    )


def smoothed(values, window: int = 25) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def _scene_order(config: TrainConfig, epoch: int) -> np.ndarray:
    salt = STAGES.index(config.stage)
    return np.random.default_rng([config.shuffle_seed, salt, epoch]).permutation(config.n_scenes)


def batches(config: TrainConfig):
    """Yield lists of training scene seeds, one per optimizer step."""
    step = 0
    epoch = 0
    while step < config.total_steps:
        order = _scene_order(config, epoch)
        for i in range(0, config.n_scenes, config.batch_size):
            if step >= config.total_steps:
                return
            yield [int(s) for s in order[i : i + config.batch_size]]
            step += 1
        epoch += 1


def train_step(model: GroundingModel, scenes, config: TrainConfig):
    """Forward, loss and backward for one batch; gradients land in the store."""
    p = model.params
    p.zero_grad()
    model.reset_routing()
    mw, lw = CostWeights(*config.match_weights), CostWeights(*config.loss_weights)
    focal = FocalParams(config.focal_gamma, config.focal_alpha)
    record = model.has_mole
    results = []
    for scene in scenes:
        boxes, logits, cache = model.forward(scene, record_routing=record)
        if not (np.all(np.isfinite(boxes)) and np.all(np.isfinite(logits))):
            nan = float("nan")
            return LossBreakdown(nan, nan, nan, nan, nan, nan), False
        br, db, dl, _ = detection_loss_with_grad(boxes, logits, scene.gts, mw, lw, focal)
        results.append((br, db, dl, cache))
    n = len(scenes)
    comps = {k: float(np.mean([getattr(r[0], k) for r in results])) for k in ("l_cls", "l_l1", "l_giou", "l_det")}
    lb_layers = [load_balance_loss(s) for s in model.routing] if record else []
    l_total = total_loss(comps["l_det"], lb_layers, config.lb_weight)
    breakdown = LossBreakdown(
        comps["l_cls"], comps["l_l1"], comps["l_giou"], comps["l_det"],
        float(np.mean(lb_layers)) if lb_layers else 0.0, float(l_total),
    )
    if not np.isfinite(breakdown.l_total):
        return breakdown, False
    lb_grads = None
    if record and config.lb_weight > 0:
        scale = config.lb_weight / len(model.routing)
        lb_grads = [scale * load_balance_prob_grad(s) for s in model.routing]
    for br, db, dl, cache in results:
        d_probs = None
        if lb_grads is not None:
            nq = db.shape[0]
            d_probs = [np.broadcast_to(g, (nq, g.shape[0])).astype(model.dtype) for g in lb_grads]
        model.backward(cache, db / n, dl / n, d_probs)
    return breakdown, True


def _log_record(step, config, breakdown, rate, model) -> dict:
    return {
        "step": step,
        "stage": config.stage,
        "l_cls": breakdown.l_cls,
        "l_l1": breakdown.l_l1,
        "l_giou": breakdown.l_giou,
        "l_det": breakdown.l_det,
        "l_lb": breakdown.l_lb,
        "l_total": breakdown.l_total,
        "lr": rate,
        "routing": [[float(f) for f in s.fractions()] for s in model.routing] if model.has_mole else [],
    }


def run_training(model: GroundingModel, config: TrainConfig, log=None) -> int:
    """Optimise the trainable entries of ``model`` in place; returns the step count."""
    vocab = config.vocabulary()
    state = AdamWState()
    step = 0
    for seeds in batches(config):
        scenes = [generate_scene(vocab, s, config.scene) for s in seeds]
        breakdown, ok = train_step(model, scenes, config)
        if not ok:
            raise TrainingDivergedError(
                f"{config.stage} diverged at step {step + 1}: non-finite loss ({breakdown})"
            )
        rate = adamw_step(
            model.params, state, config.lr, config.betas, config.eps, config.weight_decay, config.warmup_steps
        )
        step += 1
        if log is not None:
            log(_log_record(step, config, breakdown, rate, model))
    return step


def _dtype(config: TrainConfig):
    return np.float32


def pretrain(config: TrainConfig, log=None) -> Checkpoint:
    """Stage 1: train everything except MoLE (which is not attached yet)."""
    if config.stage != "pretrain":
        raise ConfigError("pretrain needs stage 'pretrain'")
    model = GroundingModel.create(config.model, config.init_seed, _dtype(config))
    if config.freeze == "full":
        model.params.set_trainable(model.params.names("dec."), False)
    steps = run_training(model, config, log)
    return Checkpoint.from_store(model.params, config.to_dict(), "pretrain", steps)


def finetune(config: TrainConfig, init: Checkpoint, log=None) -> Checkpoint:
    """Stage 2: attach MoLE (B = 0) and train only router and expert weights."""
    if config.stage != "finetune":
        raise ConfigError("finetune needs stage 'finetune'")
    model = model_from_checkpoint(init, _dtype(config), config.model)
    if model.has_mole:
        from .checkpoint import CheckpointError

        raise CheckpointError("init checkpoint already carries MoLE tensors")
    model.params.freeze_all()
    names = model.attach_mole(config.mole_seed)
    model.params.set_trainable(names, True)
    steps = run_training(model, config, log)
    return Checkpoint.from_store(model.params, config.to_dict(), "finetune", init.step + steps)


def mole_tensor_names(config: TrainConfig) -> list[str]:
    return mole_param_names(config.model)
