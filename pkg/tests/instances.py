"""Random instance generators shared by the metric tests and the acceptance suite."""

import numpy as np

from sharedattn.eval_metrics import EvalRecord
from sharedattn.sa_pipeline import PredictedGroup
from sharedattn.scene_synth import GroupAnnotation


def gt(members, point):
    return GroupAnnotation(frozenset(members), point, (0, 0, 1, 1))


def pred(members, point, conf):
    return PredictedGroup(frozenset(members), point, conf)


def random_records(rng, n_pred_max=25, n_gt_max=6, n_persons=6):
    n_scenes = int(rng.integers(1, 5))
    records, plain = [], []
    gts_left = int(rng.integers(1, n_gt_max + 1))
    preds_left = int(rng.integers(0, n_pred_max + 1))
    for s in range(n_scenes):
        k = gts_left if s == n_scenes - 1 else int(rng.integers(0, gts_left + 1))
        gts_left -= k
        p = preds_left if s == n_scenes - 1 else int(rng.integers(0, preds_left + 1))
        preds_left -= p
        gts = []
        for _ in range(k):
            size = int(rng.integers(2, n_persons + 1))
            gts.append((frozenset(rng.choice(n_persons, size, replace=False).tolist()), tuple(rng.uniform(0, 1, 2))))
        ps = []
        for _ in range(p):
            if gts and rng.uniform() < 0.6:
                base = gts[int(rng.integers(len(gts)))]
                members = set(base[0])
                if rng.uniform() < 0.4:
                    members ^= {int(rng.integers(n_persons))}
                if len(members) < 2:
                    members |= {0, 1}
                point = tuple(np.clip(np.array(base[1]) + rng.normal(0, 0.06, 2), 0, 1))
            else:
                members = set(rng.choice(n_persons, int(rng.integers(2, n_persons + 1)), replace=False).tolist())
                point = tuple(rng.uniform(0, 1, 2))
            # coarse confidences to exercise ties
            ps.append((frozenset(members), point, float(rng.integers(0, 8)) / 8))
        plain.append((ps, gts))
        records.append(EvalRecord(f"s{s}", [pred(*x) for x in ps], [gt(*g) for g in gts]))
    return records, plain
