import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechground.data import ConceptVocabulary, SceneParams, generate_corpus
from speechground.evaluation import (
    IOU_THRESHOLDS,
    EmptyCorpusError,
    GroundTruthBox,
    ScoredDetection,
    evaluate,
    evaluate_detections,
    greedy_match,
    interpolated_ap,
    scene_detections,
)
from speechground.model import GroundingModel, ModelConfig


def _iou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_force_ap(dets, gts, threshold):
    """AP for one image and one category by exhaustive matching.

    Every partial injective matching with IoU >= threshold is enumerated; the
    one whose per-detection IoU vector (in descending score order, unmatched
    as -1) is lexicographically largest is the greedy COCO assignment.
    Precision at recall r is the best precision at any rank reaching r.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    ious = [[_iou(dets[i].box, g.box) for g in gts] for i in order]
    best = None
    for assign in itertools.product([None, *range(len(gts))], repeat=len(order)):
        used = [a for a in assign if a is not None]
        if len(used) != len(set(used)):
            continue
        if any(a is not None and ious[k][a] < threshold - 1e-12 for k, a in enumerate(assign)):
            continue
        key = tuple(-1.0 if a is None else ious[k][a] for k, a in enumerate(assign))
        if best is None or key > best[0]:
            best = (key, assign)
    tp = [a is not None for a in best[1]] if order else []
    points = []
    for k in range(len(tp)):
        hits = sum(tp[: k + 1])
        points.append((hits / len(gts), hits / (k + 1)))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        total += max([p for rec, p in points if rec >= r], default=0.0)
    return total / 101


def _random_scene(rng):
    n_gt = int(rng.integers(1, 3))
    n_det = int(rng.integers(0, 4))
    gts = []
    for _ in range(n_gt):
        c = rng.uniform(0.2, 0.8, 2)
        gts.append(GroundTruthBox(0, 0, (c[0], c[1], *rng.uniform(0.1, 0.4, 2))))
    dets = []
    for _ in range(n_det):
        base = np.array(gts[int(rng.integers(n_gt))].box)
        box = base + rng.normal(0, 0.04, 4) * np.array([1, 1, 1, 1])
        box[2:] = np.abs(box[2:]) + 1e-3
        if rng.random() < 0.2:
            box = np.array([*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2)])
        dets.append(ScoredDetection(0, 0, float(rng.random()), tuple(box)))
    return dets, gts


def _iou_06_case():
    gt = GroundTruthBox(0, 0, (0.5, 0.5, 1.0, 1.0))
    det = ScoredDetection(0, 0, 0.9, (0.3, 0.5, 0.6, 1.0))
    return det, gt


def test_hand_iou_06():
    det, gt = _iou_06_case()
    assert _iou(det.box, gt.box) == pytest.approx(0.6, abs=1e-15)
    r = evaluate_detections([det], [gt])
    assert r.ap == pytest.approx(0.3, abs=1e-9)
    assert r.ap50 == 1.0 and r.ap75 == 0.0


def test_hand_perfect_and_empty():
    gt = GroundTruthBox(0, 0, (0.5, 0.5, 0.2, 0.2))
    r = evaluate_detections([ScoredDetection(0, 0, 0.9, gt.box)], [gt])
    assert r.ap == r.ap50 == r.ap75 == 1.0
    r = evaluate_detections([], [gt])
    assert r.ap == r.ap50 == r.ap75 == 0.0
    with pytest.raises(EmptyCorpusError):
        evaluate_detections([ScoredDetection(0, 0, 0.9, gt.box)], [])


def test_thresholds():
    assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_greedy_match_examples():
    ious = np.array([[0.9, 0.6], [0.95, 0.0]])
    # the higher-scored first detection claims its best GT; the second finds nothing left
    assert greedy_match([0.9, 0.8], ious, 0.5).tolist() == [True, False]
    # reversed scores: flags come back in score order
    assert greedy_match([0.8, 0.9], ious, 0.5).tolist() == [True, True]


def test_interpolated_ap_examples():
    assert interpolated_ap(np.array([True]), 1) == 1.0
    assert interpolated_ap(np.array([], dtype=bool), 2) == 0.0
    # one of two found at rank 1: recall 0.5 at precision 1 covers 51 of 101 points
    assert interpolated_ap(np.array([True, False]), 2) == pytest.approx(51 / 101)
    # FP then TP: precision 0.5 up to recall 1
    assert interpolated_ap(np.array([False, True]), 1) == pytest.approx(0.5)


def test_matches_brute_force_on_random_scenes():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dets, gts = _random_scene(rng)
        r = evaluate_detections(dets, gts)
        want = [brute_force_ap(dets, gts, t) for t in IOU_THRESHOLDS]
        assert r.ap == pytest.approx(np.mean(want), abs=1e-12)
        assert r.ap50 == pytest.approx(want[0], abs=1e-12)
        assert r.ap75 == pytest.approx(want[5], abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap50_dominates_ap(seed):
    dets, gts = _random_scene(np.random.default_rng(seed))
    r = evaluate_detections(dets, gts)
    assert 0.0 <= r.ap <= r.ap50 <= 1.0
    assert 0.0 <= r.ap75 <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_duplicate_never_helps(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_scene(rng)
    if not dets:
        return
    top = max(dets, key=lambda d: d.score)
    before = evaluate_detections(dets, gts)
    after = evaluate_detections(dets + [top], gts)
    assert after.ap <= before.ap + 1e-12
    assert after.ap50 <= before.ap50 + 1e-12


def test_matching_is_per_image():
    gt = GroundTruthBox(0, 0, (0.5, 0.5, 0.2, 0.2))
    # a perfect box on another image is a false positive
    r = evaluate_detections([ScoredDetection(1, 0, 0.9, gt.box)], [gt])
    assert r.ap == 0.0


def test_scene_detections_scores():
    corpus = generate_corpus(ConceptVocabulary.create(0), 1, SceneParams(object_count=(1, 1)))
    scene = corpus[0]
    logits = np.full((3, 8), -5.0)
    span = sorted(scene.gts[0].token_span)
    logits[1, span[-1]] = 2.0
    boxes = np.full((3, 4), 0.3)
    dets, gts = scene_detections(boxes, logits, scene, 4)
    assert len(dets) == 3 and len(gts) == 1
    assert all(d.image == 4 and d.category == scene.gts[0].category for d in dets)
    assert dets[1].score == pytest.approx(1 / (1 + np.exp(-2.0)))


def test_evaluate_model():
    cfg = ModelConfig(d=8, ffn_hidden=8, n_enhancer=1, n_decoder=1, n_queries=4, n_tokens=4)
    vocab = ConceptVocabulary.create(0, d=8, d_concept=4)
    scenes = generate_corpus(vocab, 3, SceneParams(n_tokens=4))
    model = GroundingModel.create(cfg, 0)
    r = evaluate(model, scenes)
    assert 0.0 <= r.ap <= r.ap50 <= 1.0
    with pytest.raises(EmptyCorpusError):
        evaluate(model, [])
