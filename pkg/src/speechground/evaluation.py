"""COCO-style average precision for speech-grounded detection.

Each spoken category in a scene turns every prediction into a scored
detection: the score is the sigmoid of the largest alignment logit over that
category's token span. Detections are matched greedily by descending score
(ties keep input order) to the unused ground truth with the highest IoU, and
precision is read off at 101 recall points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import pairwise_iou
from .numerics import sigmoid

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# IoU values computed in floating point land a few ulps either side of a
# threshold they equal in exact arithmetic (0.6 is the classic case)
IOU_SLACK = 1e-12


class EmptyCorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredDetection:
    image: int
    category: int
    score: float
    box: tuple  # (cx, cy, w, h)


@dataclass(frozen=True)
class GroundTruthBox:
    image: int
    category: int
    box: tuple


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_category: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "per_category": {str(c): v for c, v in sorted(self.per_category.items())},
        }


def greedy_match(scores, ious: np.ndarray, threshold: float) -> np.ndarray:
    """True-positive flags for detections processed in descending score order.

    ``ious`` is (n_det, n_gt). Returns flags in that sorted order.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    used = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        best, best_iou = -1, threshold - IOU_SLACK
        for g in range(ious.shape[1]):
            if not used[g] and ious[i, g] >= best_iou:
                if best < 0 or ious[i, g] > ious[i, best]:
                    best, best_iou = g, ious[i, g]
        if best >= 0:
            used[best] = True
            tp[rank] = True
    return tp


def interpolated_ap(tp_sorted: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from true-positive flags in score order."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truths")
    if len(tp_sorted) == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any equal or higher recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(q.mean())


def _ious(dets, gts) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    return pairwise_iou(np.array([d.box for d in dets], float), np.array([g.box for g in gts], float))


def evaluate_detections(detections, ground_truths) -> EvalResult:
    """AP over categories present in the ground truth, matched per image."""
    gts_by = {}
    for g in ground_truths:
        gts_by.setdefault(g.category, {}).setdefault(g.image, []).append(g)
    dets_by = {}
    for d in detections:
        dets_by.setdefault(d.category, []).append(d)
    if not gts_by:
        raise EmptyCorpusError("no ground-truth objects to evaluate against")

    table = np.zeros((len(IOU_THRESHOLDS), len(gts_by)))
    cats = sorted(gts_by)
    for ci, c in enumerate(cats):
        dets = dets_by.get(c, [])
        scores = np.array([d.score for d in dets], dtype=np.float64)
        order = np.argsort(-scores, kind="stable")
        n_gt = sum(len(v) for v in gts_by[c].values())
        # per image IoUs, then per-threshold greedy matching in global score order
        per_image = {}
        for rank, i in enumerate(order):
            per_image.setdefault(dets[i].image, []).append(rank)
        for ti, t in enumerate(IOU_THRESHOLDS):
            tp = np.zeros(len(dets), dtype=bool)
            for image, ranks in per_image.items():
                img_dets = [dets[order[r]] for r in ranks]
                img_gts = gts_by[c].get(image, [])
                flags = greedy_match(np.arange(len(ranks), 0, -1), _ious(img_dets, img_gts), t)
                tp[ranks] = flags
            table[ti, ci] = interpolated_ap(tp, n_gt)
    per_cat = {c: float(table[:, ci].mean()) for ci, c in enumerate(cats)}
    return EvalResult(
        float(table.mean()),
        float(table[IOU_THRESHOLDS.index(0.5)].mean()),
        float(table[IOU_THRESHOLDS.index(0.75)].mean()),
        per_cat,
    )


def scene_detections(boxes: np.ndarray, logits: np.ndarray, scene, image: int):
    """Scored detections and ground truths for one scene's predictions."""
    dets, gts = [], []
    spans = {}
    for g in scene.gts:
        spans.setdefault(g.category, sorted(g.token_span))
        gts.append(GroundTruthBox(image, g.category, tuple(float(x) for x in g.box.as_array())))
    boxes = np.asarray(boxes, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    for c, span in spans.items():
        if not span:
            continue
        scores = sigmoid(logits[:, span].max(axis=1))
        for q in range(boxes.shape[0]):
            dets.append(ScoredDetection(image, c, float(scores[q]), tuple(float(x) for x in boxes[q])))
    return dets, gts


def evaluate(model, scenes) -> EvalResult:
    """AP / AP50 / AP75 of ``model`` (a GroundingModel or Checkpoint) on ``scenes``."""
    from .checkpoint import Checkpoint

    scenes = list(scenes)
    if not scenes:
        raise EmptyCorpusError("evaluation corpus is empty")
    if isinstance(model, Checkpoint):
        from .model import model_from_checkpoint

        model = model_from_checkpoint(model)
    dets, gts = [], []
    for i, scene in enumerate(scenes):
        boxes, logits = model.predict(scene)
        d, g = scene_detections(boxes, logits, scene, i)
        dets += d
        gts += g
    return evaluate_detections(dets, gts)
