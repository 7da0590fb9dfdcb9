"""Acceptance suite: one test per primary criterion, each at its stated tolerance.

Run on its own with ``pytest tests/test_acceptance.py``; the terminal summary
prints a PASS/FAIL line per criterion.
"""

import itertools
import json
import time

import numpy as np
import pytest

from speechground.checkpoint import (
    Checkpoint,
    CheckpointCRCError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from speechground.data import eval_corpus, generate_scene
from speechground.evaluation import IOU_THRESHOLDS, GroundTruthBox, ScoredDetection, evaluate, evaluate_detections
from speechground.gradcheck import CHECKS
from speechground.losses import Box, giou, hungarian_match
from speechground.mole import RoutingStats, load_balance_loss
from speechground.model import GroundingModel, ModelConfig, model_from_checkpoint
from speechground.train import TrainConfig, finetune, mole_tensor_names, pretrain, reference_config, smoothed

from test_evaluation import _random_scene, brute_force_ap

EVAL_SCENES = 200
RUNTIME_BUDGET = 600.0


@pytest.mark.criterion("Gradient suite: every operation, >=20 instances, max rel err <= 1e-5 at h=1e-6, < 1 min")
def test_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, check in CHECKS.items():
        reports = [check(seed) for seed in range(20)]
        worst[name] = max(r.overall_error for r in reports)
        assert all(r.step == 1e-6 and r.tolerance == 1e-5 for r in reports)
        assert all(r.passed for r in reports), (name, worst[name])
    elapsed = time.perf_counter() - t0
    print("gradient suite", {k: f"{v:.1e}" for k, v in worst.items()}, f"{elapsed:.1f}s")
    assert set(CHECKS) == {"qsa", "enhancer", "decoder", "mole", "giou", "l1", "focal"}
    assert elapsed < 60.0


@pytest.mark.criterion("Matching oracle: Hungarian total equals exhaustive search on 1000 matrices up to 7x7, < 10 s")
def test_matching_oracle():
    rng = np.random.default_rng(2024)
    perms = {}
    spent = 0.0
    for i in range(1000):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, n + 1))
        cost = rng.normal(size=(n, m)) if i % 2 else rng.integers(0, 4, size=(n, m)).astype(float)
        t0 = time.perf_counter()
        got = hungarian_match(cost)
        spent += time.perf_counter() - t0
        if (n, m) not in perms:
            perms[(n, m)] = np.array(list(itertools.permutations(range(n), m)))
        p = perms[(n, m)]
        # summed column by column, the same order as the assignment total
        totals = cost[p[:, 0], 0].copy()
        for g in range(1, m):
            totals = totals + cost[p[:, g], g]
        assert got.total_cost == totals.min()
    print(f"hungarian time {spent:.2f}s")
    assert spent < 10.0


@pytest.mark.criterion("Zero-init preservation: MoLE with B=0 is bit-identical on 100 scenes in float64")
def test_zero_init_preservation():
    cfg = ModelConfig()
    train = TrainConfig(model=cfg)
    vocab = train.vocabulary()
    model = GroundingModel.create(cfg, seed=5, dtype=np.float64)
    rng = np.random.default_rng(5)
    # a non-trivial box head so the comparison covers every output
    model.params["head.box.w2"] = rng.normal(0, 0.1, model.params["head.box.w2"].shape)
    scenes = [generate_scene(vocab, s, train.scene) for s in range(100)]
    before = [model.predict(s) for s in scenes]
    model.attach_mole(seed=5)
    assert model.has_mole and model.dtype == np.float64
    for (b0, l0), scene in zip(before, scenes):
        b1, l1 = model.predict(scene)
        assert b0.tobytes() == b1.tobytes() and l0.tobytes() == l1.tobytes()


@pytest.mark.criterion("Load-balance values: uniform -> 1.0, collapse with K_e=2 -> 2.0, exactly")
def test_load_balance_values():
    assert load_balance_loss(RoutingStats(2, np.array([8, 8]), np.array([8.0, 8.0]))) == 1.0
    assert load_balance_loss(RoutingStats(2, np.array([16, 0]), np.array([16.0, 0.0]))) == 2.0


@pytest.mark.criterion("GIoU hand cases: identical 1, disjoint -1/3, containment 0.25 (1e-12)")
def test_giou_hand_cases():
    a = Box.from_corners(0, 0, 1, 1)
    assert giou(a, a) == 1.0
    assert abs(giou(a, Box.from_corners(2, 0, 3, 1)) + 1 / 3) <= 1e-12
    assert abs(giou(Box.from_corners(0, 0, 2, 2), a) - 0.25) <= 1e-12


@pytest.mark.criterion("AP hand cases and brute-force evaluator equality on 1000 scenes")
def test_ap_cases():
    gt = GroundTruthBox(0, 0, (0.5, 0.5, 1.0, 1.0))
    r = evaluate_detections([ScoredDetection(0, 0, 0.9, (0.3, 0.5, 0.6, 1.0))], [gt])
    assert abs(r.ap - 0.3) <= 1e-9 and r.ap50 == 1.0 and r.ap75 == 0.0
    rng = np.random.default_rng(99)
    for _ in range(1000):
        dets, gts = _random_scene(rng)
        assert len(dets) <= 3 and len(gts) <= 2
        r = evaluate_detections(dets, gts)
        want = [brute_force_ap(dets, gts, t) for t in IOU_THRESHOLDS]
        assert abs(r.ap - np.mean(want)) <= 1e-12
        assert abs(r.ap50 - want[0]) <= 1e-12 and abs(r.ap75 - want[5]) <= 1e-12


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    """Both stages of the shipped reference config, timed in CPU seconds."""
    pre_cfg, fin_cfg = reference_config("pretrain"), reference_config("finetune")
    t0 = time.process_time()
    pre_log, fin_log = [], []
    pre = pretrain(pre_cfg, pre_log.append)
    t_pre = time.process_time() - t0
    path = tmp_path_factory.mktemp("ref") / "pretrain.bin"
    save_checkpoint(pre, path)
    pre = load_checkpoint(path)
    fin = finetune(fin_cfg, pre, fin_log.append)
    scenes = eval_corpus(pre_cfg.vocabulary(), 0, EVAL_SCENES, pre_cfg.scene)
    results = {
        "untrained": evaluate(GroundingModel.create(pre_cfg.model, pre_cfg.init_seed, np.float32), scenes),
        "pretrain": evaluate(pre, scenes),
        "finetune": evaluate(fin, scenes),
    }
    elapsed = time.process_time() - t0
    return {
        "pre": pre, "fin": fin, "pre_log": pre_log, "fin_log": fin_log,
        "results": results, "cpu": elapsed, "cpu_pretrain": t_pre,
    }


@pytest.mark.criterion("End-to-end learning: loss halves by step 500, AP50 >= 0.6 vs untrained <= 0.05, "
                       "finetune drop <= 0.02, min expert fraction >= 0.1, <= 10 min CPU")
def test_end_to_end_learning(reference_run):
    run = reference_run
    l_det = smoothed([r["l_det"] for r in run["pre_log"]])
    initial, at_500 = l_det[24], l_det[499]
    res = run["results"]
    ap50 = {k: v.ap50 for k, v in res.items()}
    routing = np.array([r["routing"] for r in run["fin_log"][-25:]])  # (steps, layers, experts)
    min_fraction = float(routing.mean(axis=0).min())
    print(
        f"l_det initial {initial:.3f} step500 {at_500:.3f}; AP50 {json.dumps(ap50)}; "
        f"min expert fraction {min_fraction:.3f}; cpu {run['cpu']:.0f}s (pretrain {run['cpu_pretrain']:.0f}s)"
    )
    assert at_500 <= 0.5 * initial
    assert ap50["pretrain"] >= 0.6
    assert ap50["untrained"] <= 0.05
    assert ap50["finetune"] >= ap50["pretrain"] - 0.02
    assert min_fraction >= 0.1
    assert run["cpu"] <= RUNTIME_BUDGET


@pytest.mark.criterion("Freeze isolation: tensors changed by finetune are exactly the MoLE set (byte-wise)")
def test_freeze_isolation(reference_run):
    pre, fin = reference_run["pre"], reference_run["fin"]
    mole = set(mole_tensor_names(reference_config("finetune")))
    names = set(pre.tensors) | set(fin.tensors)
    changed = {
        n for n in names
        if n not in pre.tensors or n not in fin.tensors or pre.tensors[n].tobytes() != fin.tensors[n].tobytes()
    }
    assert changed ^ mole == set()


def _short(stage, steps):
    doc = reference_config(stage).to_dict()
    doc["max_steps"] = steps
    return TrainConfig.from_dict(doc)


@pytest.mark.criterion("Determinism: identical seeds give byte-identical checkpoints and metric logs")
def test_determinism():
    outputs = []
    for _ in range(2):
        logs = []
        pre = pretrain(_short("pretrain", 40), logs.append)
        fin = finetune(_short("finetune", 20), pre, logs.append)
        outputs.append((to_bytes(pre), to_bytes(fin), "\n".join(json.dumps(r, sort_keys=True) for r in logs)))
    assert outputs[0] == outputs[1]


@pytest.mark.criterion("Checkpoint round trip bit-exact; magic, CRC and truncation raise distinct errors")
def test_checkpoint_round_trip(tmp_path):
    model = GroundingModel.create(ModelConfig(), seed=3, dtype=np.float32)
    model.attach_mole(3)
    ck = Checkpoint.from_store(model.params, reference_config("finetune").to_dict(), "finetune", 7)
    path = tmp_path / "ck.bin"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert set(back.tensors) == set(ck.tensors)
    assert all(back.tensors[n].tobytes() == ck.tensors[n].tobytes() for n in ck.tensors)
    assert (back.config, back.stage, back.step) == (ck.config, ck.stage, ck.step)
    assert model_from_checkpoint(back).has_mole
    data = path.read_bytes()
    raised = []
    for corrupt, kind in (
        (b"XXXX" + data[4:], CheckpointMagicError),
        (data[:100] + bytes([data[100] ^ 0xFF]) + data[101:], CheckpointCRCError),
        (data[: len(data) // 2], CheckpointTruncatedError),
    ):
        with pytest.raises(kind) as exc:
            from_bytes(corrupt)
        raised.append(type(exc.value))
    assert len(set(raised)) == 3
