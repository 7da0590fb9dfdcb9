"""Box losses, focal token-alignment loss, set matching and the total objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import CapacityError, DimensionError, sigmoid


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError("box width and height must be non-negative")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class GroundTruthObject:
    box: Box
    category: int
    token_span: frozenset

    def __post_init__(self):
        self.token_span = frozenset(int(t) for t in self.token_span)
        if not self.token_span:
            raise ValueError("token span must not be empty")

    def span_mask(self, n_tokens: int) -> np.ndarray:
        if max(self.token_span) >= n_tokens or min(self.token_span) < 0:
            raise DimensionError(f"token span {sorted(self.token_span)} outside [0, {n_tokens})")
        m = np.zeros(n_tokens, dtype=bool)
        m[sorted(self.token_span)] = True
        return m


@dataclass(frozen=True)
class CostWeights:
    cls: float
    l1: float
    giou: float

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.cls == self.l1 == self.giou == 0:
            raise ValueError("cost weights must not all be zero")

    def scaled(self, t: float) -> "CostWeights":
        return CostWeights(self.cls * t, self.l1 * t, self.giou * t)


MATCH_WEIGHTS = CostWeights(2.0, 5.0, 2.0)
LOSS_WEIGHTS = CostWeights(1.0, 5.0, 2.0)


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float | None = 0.25  # None disables the class-balance factor


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]  # (prediction, ground truth), ascending prediction
    unmatched: list[int]
    total_cost: float = 0.0

    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}


@dataclass
class LossBreakdown:
    l_cls: float
    l_l1: float
    l_giou: float
    l_det: float
    l_lb: float = 0.0
    l_total: float = field(default=None)

    def __post_init__(self):
        if self.l_total is None:
            self.l_total = self.l_det


# ---------------------------------------------------------------------------
# box geometry


def _float(x) -> np.ndarray:
    """Keep floating dtypes (including extended precision); promote the rest."""
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def _corners(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU between every box in ``a`` (n, 4) and ``b`` (m, 4), cxcywh format."""
    a = _corners(_float(a))[:, None, :]
    b = _corners(_float(b))[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        slack = np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0)
    return iou - slack


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _corners(_float(a))[:, None, :]
    b = _corners(_float(b))[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1]) + (b[..., 2] - b[..., 0]) * (
        b[..., 3] - b[..., 1]
    ) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou(a: Box, b: Box) -> float:
    return float(pairwise_giou(a.as_array()[None], b.as_array()[None])[0, 0])


def giou_with_grad(pred: np.ndarray, target: np.ndarray):
    """Row-wise GIoU of matched pairs (n, 4) and its gradient w.r.t. ``pred``."""
    pred = _float(pred)
    target = _float(target).astype(pred.dtype)
    a = _corners(pred)
    b = _corners(target)
    ax1, ay1, ax2, ay2 = a.T
    bx1, by1, bx2, by2 = b.T

    lo_x = ax1 >= bx1  # the intersection's left edge comes from pred
    hi_x = ax2 <= bx2
    lo_y = ay1 >= by1
    hi_y = ay2 <= by2
    iw_raw = np.where(hi_x, ax2, bx2) - np.where(lo_x, ax1, bx1)
    ih_raw = np.where(hi_y, ay2, by2) - np.where(lo_y, ay1, by1)
    pos_w = iw_raw > 0
    pos_h = ih_raw > 0
    iw = np.where(pos_w, iw_raw, 0.0)
    ih = np.where(pos_h, ih_raw, 0.0)
    inter = iw * ih
    aw, ah = ax2 - ax1, ay2 - ay1
    area_a = aw * ah
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter

    ex_lo = ax1 <= bx1  # enclosure's left edge comes from pred
    ex_hi = ax2 >= bx2
    ey_lo = ay1 <= by1
    ey_hi = ay2 >= by2
    cw = np.where(ex_hi, ax2, bx2) - np.where(ex_lo, ax1, bx1)
    ch = np.where(ey_hi, ay2, by2) - np.where(ey_lo, ay1, by1)
    enclose = cw * ch

    safe_u = np.where(union > 0, union, 1.0)
    safe_c = np.where(enclose > 0, enclose, 1.0)
    iou = np.where(union > 0, inter / safe_u, 0.0)
    g = iou - np.where(enclose > 0, (enclose - union) / safe_c, 0.0)

    # partial derivatives w.r.t. pred corners (x1, y1, x2, y2)
    both = (pos_w & pos_h).astype(float)
    zero = np.zeros_like(both)
    d_iw = np.stack([-(lo_x * both), zero, hi_x * both, zero], -1)
    d_ih = np.stack([zero, -(lo_y * both), zero, hi_y * both], -1)
    d_inter = d_iw * ih[:, None] + d_ih * iw[:, None]
    d_area_a = np.stack([-ah, -aw, ah, aw], -1)
    d_union = d_area_a - d_inter
    d_cw = np.stack([-1.0 * ex_lo, zero, 1.0 * ex_hi, zero], -1)
    d_ch = np.stack([zero, -1.0 * ey_lo, zero, 1.0 * ey_hi], -1)
    d_enclose = d_cw * ch[:, None] + d_ch * cw[:, None]

    d_iou = np.where(
        (union > 0)[:, None],
        (d_inter * union[:, None] - inter[:, None] * d_union) / (safe_u**2)[:, None],
        0.0,
    )
    # giou = iou - 1 + union / enclose
    d_ratio = np.where(
        (enclose > 0)[:, None],
        (d_union * enclose[:, None] - union[:, None] * d_enclose) / (safe_c**2)[:, None],
        0.0,
    )
    d_corner = d_iou + d_ratio
    # corners -> (cx, cy, w, h)
    d_box = np.stack(
        [
            d_corner[:, 0] + d_corner[:, 2],
            d_corner[:, 1] + d_corner[:, 3],
            0.5 * (d_corner[:, 2] - d_corner[:, 0]),
            0.5 * (d_corner[:, 3] - d_corner[:, 1]),
        ],
        -1,
    )
    return g, d_box


def l1_box_loss(a: Box, b: Box) -> float:
    return float(np.abs(a.as_array() - b.as_array()).sum())


# ---------------------------------------------------------------------------
# token alignment


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_terms(logits, targets, focal: FocalParams):
    """Per-cell sigmoid focal loss and its derivative w.r.t. the logits."""
    x = _float(logits)
    t = np.asarray(targets).astype(x.dtype)
    p = sigmoid(x)
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    g = focal.gamma
    pos_w = (1.0 - p) ** g
    neg_w = p**g
    loss_pos = -pos_w * log_p
    loss_neg = -neg_w * log_q
    grad_pos = pos_w * (g * p * log_p - (1.0 - p))
    grad_neg = neg_w * (p - g * (1.0 - p) * log_q)
    if focal.alpha is not None:
        a = focal.alpha
        loss_pos, grad_pos = a * loss_pos, a * grad_pos
        loss_neg, grad_neg = (1 - a) * loss_neg, (1 - a) * grad_neg
    loss = t * loss_pos + (1 - t) * loss_neg
    grad = t * grad_pos + (1 - t) * grad_neg
    return loss, grad


def alignment_loss(logits, positive_map, focal: FocalParams = FocalParams()) -> float:
    loss, _ = alignment_loss_with_grad(logits, positive_map, focal)
    return float(loss)


def alignment_loss_with_grad(logits, positive_map, focal: FocalParams = FocalParams()):
    logits = _float(logits)
    positive_map = np.asarray(positive_map)
    if logits.shape != positive_map.shape:
        raise DimensionError(f"logits {logits.shape} vs positive map {positive_map.shape}")
    cell, dcell = focal_terms(logits, positive_map, focal)
    n = logits.size
    return cell.sum() / n, dcell / n


def positive_map(n_pred: int, n_tokens: int, gts, assignment: MatchAssignment) -> np.ndarray:
    pm = np.zeros((n_pred, n_tokens))
    for p, g in assignment.pairs:
        pm[p] = gts[g].span_mask(n_tokens)
    return pm


# ---------------------------------------------------------------------------
# matching


def cost_matrix(boxes, logits, gts, w: CostWeights, focal: FocalParams = FocalParams()):
    """(N_q, M) matching cost between predictions and ground truths."""
    boxes = _float(boxes)
    logits = _float(logits)
    if not gts:
        return np.zeros((boxes.shape[0], 0))
    n_tok = logits.shape[1]
    spans = np.stack([g.span_mask(n_tok) for g in gts]).astype(np.float64)  # (M, K)
    pos, _ = focal_terms(logits, np.ones_like(logits), focal)
    neg, _ = focal_terms(logits, np.zeros_like(logits), focal)
    c_cls = (pos @ spans.T + neg @ (1.0 - spans).T) / n_tok
    gt_boxes = np.stack([g.box.as_array() for g in gts])
    c_l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    c_giou = -pairwise_giou(boxes, gt_boxes)
    return w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou


def pair_cost(pred, gt: GroundTruthObject, w: CostWeights, focal: FocalParams = FocalParams()) -> float:
    return float(cost_matrix(pred.box[None], pred.logits[None], [gt], w, focal)[0, 0])


def _solve_lsa(cost: np.ndarray):
    """Min-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting paths with dual potentials, O(n^2 m). Returns the
    column chosen for each row.
    """
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row on column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def _assignment_total(cost, gt_to_pred: dict[int, int]) -> float:
    return float(sum(cost[gt_to_pred[g], g] for g in sorted(gt_to_pred)))


def hungarian_match(cost) -> MatchAssignment:
    """Minimum-cost injection of ground truths (columns) into predictions (rows).

    Among co-optimal assignments the one whose pair list, sorted by
    prediction index, is lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError("cost must be a matrix")
    n_pred, n_gt = cost.shape
    if n_gt > n_pred:
        raise CapacityError(f"{n_gt} ground truths but only {n_pred} predictions")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if n_gt == 0:
        return MatchAssignment([], list(range(n_pred)), 0.0)

    cols = _solve_lsa(cost.T)
    best = {g: int(cols[g]) for g in range(n_gt)}
    opt = _assignment_total(cost, best)
    tol = 1e-12 * max(1.0, abs(opt))

    # greedy lexicographic refinement over predictions in index order
    fixed: dict[int, int] = {}
    free_gts = list(range(n_gt))
    current = dict(best)
    pred_of = {p: g for g, p in current.items()}
    for i in range(n_pred):
        if not free_gts:
            break
        later = np.arange(i + 1, n_pred)
        g_cur = pred_of.get(i)
        candidates = [g for g in free_gts if g_cur is None or g < g_cur]
        accepted = None
        for g in candidates:
            rest = [h for h in free_gts if h != g]
            if len(rest) > later.size:
                continue
            fixed_sum = cost[i, g] + sum(cost[p, h] for h, p in fixed.items())
            if rest:
                sub = cost[np.ix_(later, rest)]
                if fixed_sum + sub.min(axis=0).sum() > opt + tol:
                    continue
                sub_cols = _solve_lsa(sub.T)
                trial = {h: int(later[c]) for h, c in zip(rest, sub_cols)}
            else:
                trial = {}
            trial.update(fixed)
            trial[g] = i
            if _assignment_total(cost, trial) <= opt + tol:
                accepted = (g, trial)
                break
        if accepted is not None:
            g, current = accepted
        elif g_cur is not None:
            g = g_cur
        else:
            continue
        fixed[g] = i
        free_gts.remove(g)
        pred_of = {p: h for h, p in current.items()}

    pairs = sorted((p, g) for g, p in fixed.items())
    matched = {p for p, _ in pairs}
    unmatched = [p for p in range(n_pred) if p not in matched]
    return MatchAssignment(pairs, unmatched, _assignment_total(cost, fixed))


# ---------------------------------------------------------------------------
# objectives


def detection_loss_with_grad(
    boxes,
    logits,
    gts,
    match_w: CostWeights = MATCH_WEIGHTS,
    loss_w: CostWeights = LOSS_WEIGHTS,
    focal: FocalParams = FocalParams(),
):
    """Match, then score. Returns ``(breakdown, d_boxes, d_logits, assignment)``."""
    boxes = _float(boxes)
    logits = _float(logits)
    n_pred, n_tok = logits.shape
    if gts:
        assignment = hungarian_match(cost_matrix(boxes, logits, gts, match_w, focal).astype(np.float64))
    else:
        assignment = MatchAssignment([], list(range(n_pred)), 0.0)
    pm = positive_map(n_pred, n_tok, gts, assignment)
    l_cls, d_logits = alignment_loss_with_grad(logits, pm, focal)

    d_boxes = np.zeros_like(boxes)
    l_l1 = l_giou = 0.0
    if assignment.pairs:
        n_gt = len(gts)
        p_idx = np.array([p for p, _ in assignment.pairs])
        tgt = np.stack([gts[g].box.as_array() for _, g in assignment.pairs])
        diff = boxes[p_idx] - tgt
        l_l1 = np.abs(diff).sum() / n_gt
        g, dg = giou_with_grad(boxes[p_idx], tgt)
        l_giou = (1.0 - g).sum() / n_gt
        d_boxes[p_idx] = (loss_w.l1 * np.sign(diff) - loss_w.giou * dg) / n_gt

    l_det = loss_w.cls * l_cls + loss_w.l1 * l_l1 + loss_w.giou * l_giou
    breakdown = LossBreakdown(l_cls, l_l1, l_giou, l_det)
    return breakdown, d_boxes, loss_w.cls * d_logits, assignment


def detection_loss(
    preds,
    gts,
    match_w: CostWeights = MATCH_WEIGHTS,
    loss_w: CostWeights = LOSS_WEIGHTS,
    focal: FocalParams = FocalParams(),
) -> LossBreakdown:
    boxes = np.stack([p.box for p in preds])
    logits = np.stack([p.logits for p in preds])
    return detection_loss_with_grad(boxes, logits, gts, match_w, loss_w, focal)[0]


def total_loss(l_det: float, l_lb_per_layer, lb_weight: float = 1e-2) -> float:
    if lb_weight < 0:
        raise ValueError("lb_weight must be non-negative")
    layers = list(l_lb_per_layer)
    mean_lb = sum(layers) / len(layers) if layers else 0.0
    return l_det + lb_weight * mean_lb
