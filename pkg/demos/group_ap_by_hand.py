"""
GroupAP with two criteria
=========================

A predicted group counts as a hit only when its member set overlaps a
ground-truth group well enough (GroupIoU >= theta_iou) and its SA point
lands close enough (GroupDist < theta_dist).  This script scores a few
hand-made predictions so the effect of each threshold is visible.
"""

import math

from sharedattn.eval_metrics import EvalRecord, evaluate, group_dist, group_iou, pr_curve
from sharedattn.sa_pipeline import PredictedGroup
from sharedattn.scene_synth import GroupAnnotation

truth = [
    GroupAnnotation(frozenset({0, 1, 2}), (0.30, 0.40), (0.25, 0.35, 0.35, 0.45)),
    GroupAnnotation(frozenset({3, 4}), (0.70, 0.60), (0.65, 0.55, 0.75, 0.65)),
]

# one exact hit, one group missing a member, one well-grouped but badly placed SA point
predicted = [
    PredictedGroup(frozenset({3, 4}), (0.71, 0.61), 0.9),
    PredictedGroup(frozenset({0, 1}), (0.31, 0.42), 0.8),
    PredictedGroup(frozenset({0, 1, 2}), (0.30, 0.55), 0.4),
]

for p in predicted:
    best = max(truth, key=lambda g: group_iou(p.members, g.members))
    print(f"members {sorted(p.members)} conf {p.confidence}: "
          f"IoU {group_iou(p.members, best.members):.2f} Dist {group_dist(p.sa_point, best.sa_point):.3f}")

records = [EvalRecord("hand", predicted, truth)]
print()
print(evaluate(records).to_text("hand-made"))

# the partial group only matches under the loose IoU threshold; the far point
# only matches once the distance criterion is dropped
for iou, dist in [(0.5, 0.1), (1.0, 0.1), (1.0, math.inf)]:
    curve = pr_curve(records, iou, dist)
    print(f"IoU>={iou} Dist<{dist}: hits {curve.tp.astype(int).tolist()} AP {curve.ap:.3f}")
