import json

import numpy as np
import pytest

from speechground.checkpoint import CheckpointError, to_bytes
from speechground.data import SceneParams, eval_corpus
from speechground.model import ModelConfig, model_from_checkpoint
from speechground.train import (
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    batches,
    finetune,
    mole_tensor_names,
    pretrain,
    reference_config,
    smoothed,
)

TINY_MODEL = {"d": 8, "ffn_hidden": 8, "n_enhancer": 1, "n_decoder": 2, "n_queries": 4, "n_tokens": 4, "lora_rank": 2}
TINY_SCENE = {"grid": [4, 4], "box_cells": [1, 2], "n_tokens": 4, "frames_per_concept": 6, "object_count": [1, 2]}


def tiny(stage="pretrain", **over):
    doc = {
        "stage": stage, "lr": 1e-2, "batch_size": 2, "epochs": 1, "n_scenes": 8, "warmup_steps": 2,
        "n_concepts": 4, "d_concept": 4, "model": TINY_MODEL, "scene": TINY_SCENE,
    }
    doc.update(over)
    return TrainConfig.from_dict(doc)


def _collect():
    records = []
    return records, records.append


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = tiny()
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stage": "pretrain", "learning_rate": 1e-3})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"model": {"d": 8, "heads": 2}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"scene": {"colour": 1}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stage": "warmup"})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": -1.0})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.load(bad)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.lb_weight, cfg.warmup_steps) == (1e-4, 8, 1e-2, 100)
    assert cfg.match_weights == (2.0, 5.0, 2.0)
    assert cfg.model == ModelConfig() and cfg.scene == SceneParams()
    assert cfg.steps_per_epoch == 250 and cfg.total_steps == 2500


def test_shipped_configs_match_reference():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for stage in ("pretrain", "finetune"):
        assert TrainConfig.load(root / f"{stage}.json") == reference_config(stage)


def test_batches_cover_each_epoch():
    cfg = tiny(epochs=2, n_scenes=7, batch_size=3)
    got = list(batches(cfg))
    assert [len(b) for b in got] == [3, 3, 1, 3, 3, 1]
    assert sorted(sum(got[:3], [])) == list(range(7))
    assert sorted(sum(got[3:], [])) == list(range(7))
    assert got[:3] != got[3:]


def test_smoothed():
    np.testing.assert_allclose(smoothed([1.0, 3.0, 5.0, 7.0], window=2), [1.0, 2.0, 4.0, 6.0])


def test_zero_learning_rate_keeps_params():
    cfg = tiny(lr=0.0)
    ck = pretrain(cfg)
    init = model_from_checkpoint(pretrain(tiny(max_steps=0)))
    for n, v in ck.tensors.items():
        assert v.tobytes() == init.params[n].tobytes()
    assert ck.step == 4


def test_determinism():
    logs = []
    ckpts = []
    for _ in range(2):
        records, log = _collect()
        ckpts.append(to_bytes(pretrain(tiny(), log)))
        logs.append(json.dumps(records, sort_keys=True))
    assert ckpts[0] == ckpts[1]
    assert logs[0] == logs[1]
    records = json.loads(logs[0])
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert set(records[0]) == {"step", "stage", "l_cls", "l_l1", "l_giou", "l_det", "l_lb", "l_total", "lr", "routing"}
    assert records[0]["lr"] == pytest.approx(5e-3)


def test_training_reduces_loss_on_tiny_problem():
    records, log = _collect()
    pretrain(tiny(epochs=15, lr=3e-3), log)
    first = np.mean([r["l_det"] for r in records[:8]])
    last = np.mean([r["l_det"] for r in records[-8:]])
    assert last < first


def test_full_freeze_keeps_decoder():
    ck0 = pretrain(tiny(max_steps=0))
    ck = pretrain(tiny(freeze="full"))
    for n, v in ck.tensors.items():
        same = v.tobytes() == ck0.tensors[n].tobytes()
        if n.startswith("dec."):
            assert same, n
    assert any(ck.tensors[n].tobytes() != ck0.tensors[n].tobytes() for n in ck.tensors if n.startswith("head."))


def test_finetune_updates_only_mole():
    base = pretrain(tiny())
    records, log = _collect()
    ck = finetune(tiny("finetune", epochs=3), base, log)
    mole = set(mole_tensor_names(tiny()))
    assert set(ck.tensors) == set(base.tensors) | mole
    changed = {n for n in base.tensors if ck.tensors[n].tobytes() != base.tensors[n].tobytes()}
    assert changed == set()
    assert any(ck.tensors[n].any() for n in mole if n.endswith(".B"))
    assert ck.stage == "finetune" and ck.step == base.step + 12
    assert all(len(r["routing"]) == 2 and abs(sum(r["routing"][0]) - 1) < 1e-12 for r in records)
    for r in records:
        assert r["l_total"] == pytest.approx(r["l_det"] + 1e-2 * r["l_lb"], rel=1e-12)


def test_finetune_zero_steps_preserves_outputs():
    base = pretrain(tiny())
    ck = finetune(tiny("finetune", max_steps=0), base)
    before = model_from_checkpoint(base)
    after = model_from_checkpoint(ck)
    assert after.has_mole
    for scene in eval_corpus(tiny().vocabulary(), 0, 5, tiny().scene):
        b0, l0 = before.predict(scene)
        b1, l1 = after.predict(scene)
        assert np.array_equal(b0, b1) and np.array_equal(l0, l1)


def test_finetune_rejects_bad_init():
    base = pretrain(tiny(max_steps=1))
    twice = finetune(tiny("finetune", max_steps=1), base)
    with pytest.raises(CheckpointError):
        finetune(tiny("finetune", max_steps=1), twice)
    del base.tensors["head.align_bias"]
    with pytest.raises(CheckpointError):
        finetune(tiny("finetune", max_steps=1), base)
    with pytest.raises(ConfigError):
        finetune(tiny("pretrain"), base)
    with pytest.raises(ConfigError):
        pretrain(tiny("finetune"))


def test_divergence_is_reported():
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        pretrain(tiny(lr=1e300, warmup_steps=0))
