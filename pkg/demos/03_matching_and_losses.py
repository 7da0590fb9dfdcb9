"""Set-based detection loss on a hand-made example.

Three predictions compete for two ground-truth objects. Hungarian matching
picks the cheapest one-to-one assignment under the (2, 5, 2) cost triple; the
unmatched prediction is only pushed towards "no alignment".
"""

import numpy as np

from speechground.losses import Box, GroundTruthObject, detection_loss_with_grad, giou, hungarian_match

gts = [
    GroundTruthObject(Box.from_corners(0.1, 0.1, 0.4, 0.4), category=0, token_span={0, 1}),
    GroundTruthObject(Box.from_corners(0.5, 0.5, 0.9, 0.8), category=0, token_span={0, 1}),
]
boxes = np.array([
    [0.70, 0.65, 0.38, 0.30],  # close to the second object
    [0.50, 0.50, 0.20, 0.20],  # in between
    [0.26, 0.24, 0.28, 0.30],  # close to the first object
])
logits = np.array([[2.0, 1.0, -3.0], [-1.0, -1.0, -4.0], [1.5, 2.5, -3.0]])

breakdown, d_boxes, d_logits, assignment = detection_loss_with_grad(boxes, logits, gts)
print("matched (prediction, object) pairs:", assignment.pairs, "unmatched:", assignment.unmatched)
print(f"l_cls {breakdown.l_cls:.4f}  l_l1 {breakdown.l_l1:.4f}  l_giou {breakdown.l_giou:.4f}  l_det {breakdown.l_det:.4f}")
print("box gradient of the unmatched prediction is zero:", not d_boxes[1].any())

a = Box.from_corners(0, 0, 1, 1)
print("GIoU identical", giou(a, a), " disjoint", round(giou(a, Box.from_corners(2, 0, 3, 1)), 6),
      " containment", giou(Box.from_corners(0, 0, 2, 2), a))
print("Hungarian on a 3x2 cost matrix:", hungarian_match(np.array([[4.0, 1.0], [2.0, 0.0], [2.5, 5.0]])).pairs)
