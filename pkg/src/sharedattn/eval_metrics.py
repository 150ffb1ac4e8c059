"""GroupAP with dual criteria and the post-processing baselines.

A predicted group counts as a true positive when it matches a not yet
matched ground-truth group of the same scene with GroupIoU >= theta_iou
*and* GroupDist < theta_dist.  Predictions from all scenes are ranked by
confidence and AP is the area under the interpolated precision-recall
curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .attention_net import peak_coords
from .sa_pipeline import PredictedGroup
from .scene_synth import GroupAnnotation

DEFAULT_IOU_THRESHOLDS = (0.5, 1.0)
DEFAULT_DIST_THRESHOLDS = (0.05, 0.1, math.inf)


@dataclass
class EvalRecord:
    scene_id: str
    predicted: list[PredictedGroup]
    ground_truth: list[GroupAnnotation]


@dataclass(frozen=True)
class ThresholdGrid:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    dist_thresholds: tuple[float, ...] = DEFAULT_DIST_THRESHOLDS

    def __post_init__(self):
        if not all(0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if not all(t > 0 for t in self.dist_thresholds):
            raise ValueError("distance thresholds must be positive")


def group_iou(pred_members, gt_members) -> float:
    a, b = set(pred_members), set(gt_members)
    if not a and not b:
        raise ValueError("GroupIoU undefined for two empty sets")
    return len(a & b) / len(a | b)


def group_dist(pred_point, gt_point) -> float:
    """Euclidean distance between normalized points."""
    for p in (pred_point, gt_point):
        if not all(0.0 <= float(v) <= 1.0 for v in p):
            raise ValueError(f"point {p!r} is not normalized to [0, 1]")
    return math.hypot(float(pred_point[0]) - float(gt_point[0]), float(pred_point[1]) - float(gt_point[1]))


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    n_gt: int
    tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _ranked_predictions(records: Sequence[EvalRecord]):
    ranked = [(r, i, g) for r, rec in enumerate(records) for i, g in enumerate(rec.predicted)]
    # stable: ties keep (record, prediction) order
    ranked.sort(key=lambda t: -t[2].confidence)
    return ranked


def match_detections(records: Sequence[EvalRecord], theta_iou: float, theta_dist: float) -> np.ndarray:
    """True-positive flags of the confidence-ranked predictions."""
    taken = [set() for _ in records]
    flags = []
    for r, _, pred in _ranked_predictions(records):
        gts = records[r].ground_truth
        order = sorted(range(len(gts)), key=lambda k: group_dist(pred.sa_point, gts[k].sa_point))
        hit = False
        for k in order:
            if k in taken[r]:
                continue
            if group_iou(pred.members, gts[k].members) >= theta_iou and group_dist(pred.sa_point, gts[k].sa_point) < theta_dist:
                taken[r].add(k)
                hit = True
                break
        flags.append(hit)
    return np.array(flags, dtype=bool)


def pr_curve(records: Sequence[EvalRecord], theta_iou: float, theta_dist: float, eleven_point: bool = False) -> PRCurve:
    n_gt = sum(len(r.ground_truth) for r in records)
    if n_gt == 0:
        raise ValueError("GroupAP is undefined without ground-truth groups")
    tp = match_detections(records, theta_iou, theta_dist)
    if len(tp) == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0, n_gt, tp)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    if eleven_point:
        ap = sum(precision[recall >= t].max(initial=0.0) for t in np.linspace(0, 1, 11)) / 11
    else:
        # exact rationals, rounded once: each true positive raises recall by
        # 1/n_gt and contributes the best precision at or beyond its rank
        best = Fraction(0)
        area = Fraction(0)
        for k in range(len(tp) - 1, -1, -1):
            best = max(best, Fraction(int(ctp[k]), k + 1))
            if tp[k]:
                area += best
        ap = area / n_gt
    return PRCurve(precision, recall, float(ap), n_gt, tp)


def group_ap(records: Sequence[EvalRecord], theta_iou: float, theta_dist: float, eleven_point: bool = False) -> float:
    if not records:
        raise ValueError("need at least one record")
    return pr_curve(records, theta_iou, theta_dist, eleven_point).ap


@dataclass
class APTable:
    iou_thresholds: tuple[float, ...]
    dist_thresholds: tuple[float, ...]
    values: np.ndarray  # (n_iou, n_dist)

    def __getitem__(self, key) -> float:
        iou, dist = key
        return float(self.values[self.iou_thresholds.index(iou), self.dist_thresholds.index(dist)])

    def rows(self):
        for i, iou in enumerate(self.iou_thresholds):
            for j, dist in enumerate(self.dist_thresholds):
                yield iou, dist, float(self.values[i, j])

    def to_csv(self) -> str:
        lines = ["theta_iou,theta_dist,group_ap"]
        lines += [f"{iou},{_fmt_dist(dist)},{ap!r}" for iou, dist, ap in self.rows()]
        return "\n".join(lines) + "\n"

    def to_text(self, label: str = "Method") -> str:
        """One-row table in the GroupAP layout (values in percent)."""
        cols = [f"IoU={iou} Dist={_fmt_dist(d)}" for iou in self.iou_thresholds for d in self.dist_thresholds]
        width = max(len(c) for c in cols)
        head = f"{'':<12}" + "".join(f"{c:>{width + 2}}" for c in cols)
        vals = [100 * v for _, _, v in self.rows()]
        row = f"{label:<12}" + "".join(f"{v:>{width + 2}.1f}" for v in vals)
        return head + "\n" + row + "\n"

    def as_dict(self) -> dict:
        return {f"{iou}/{_fmt_dist(d)}": ap for iou, d, ap in self.rows()}


def _fmt_dist(d: float) -> str:
    return "inf" if math.isinf(d) else str(d)


def evaluate(records: Sequence[EvalRecord], grid: ThresholdGrid = ThresholdGrid(), eleven_point: bool = False) -> APTable:
    values = np.array(
        [[group_ap(records, iou, dist, eleven_point) for dist in grid.dist_thresholds] for iou in grid.iou_thresholds]
    )
    return APTable(tuple(grid.iou_thresholds), tuple(grid.dist_thresholds), values)


def make_records(scenes, predictions) -> list[EvalRecord]:
    """Pair scenes with per-scene predictions (lists of groups or ScenePrediction)."""
    records = []
    for scene, pred in zip(scenes, predictions, strict=True):
        groups = pred.groups if hasattr(pred, "groups") else list(pred)
        if hasattr(pred, "scene_id") and pred.scene_id != scene.scene_id:
            raise ValueError(f"prediction for {pred.scene_id} paired with scene {scene.scene_id}")
        records.append(EvalRecord(scene.scene_id, groups, list(scene.groups)))
    return records


def oracle_predictions(scenes) -> list[list[PredictedGroup]]:
    """Ground truth restated as predictions (confidence 1)."""
    return [[PredictedGroup(frozenset(g.members), tuple(g.sa_point), 1.0) for g in s.groups] for s in scenes]


# -- baselines ----------------------------------------------------------------


def _components(n: int, linked) -> list[list[int]]:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in linked:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return list(comps.values())


def baseline_pp(heatmaps, dist_threshold: float = 0.1) -> list[PredictedGroup]:
    """Peak-proximity grouping of individual heatmaps.

    Persons whose heatmap peaks are linked by a chain of pairwise distances
    below ``dist_threshold`` form one group (single linkage).  The SA point
    is the centroid of the member peaks; confidence is the mean of the
    members' peak values.
    """
    A = np.asarray(heatmaps, dtype=np.float64)
    n = A.shape[0]
    if n == 0:
        raise ValueError("no heatmaps")
    peaks = peak_coords(A)
    values = A.reshape(n, -1).max(axis=1)
    links = [
        (i, j) for i in range(n) for j in range(i + 1, n) if math.dist(peaks[i], peaks[j]) < dist_threshold
    ]
    groups = []
    for comp in _components(n, links):
        if len(comp) < 2:
            continue
        centroid = peaks[comp].mean(axis=0)
        groups.append(PredictedGroup(frozenset(comp), (float(centroid[0]), float(centroid[1])), float(values[comp].mean())))
    return groups


def baseline_pairwise_cluster(pairwise, edge_threshold: float = 0.5, seed: int = 0) -> list[frozenset[int]]:
    """Louvain communities (size >= 2) of the graph of confident pairs."""
    P = np.asarray(pairwise, dtype=np.float64)
    n = P.shape[0]
    if not np.allclose(P, P.T):
        raise ValueError("pairwise matrix must be symmetric")
    G = nx.Graph()
    G.add_nodes_from(range(n))
    for i in range(n):
        for j in range(i + 1, n):
            if P[i, j] > edge_threshold:
                G.add_edge(i, j, weight=float(P[i, j]))
    if G.number_of_edges() == 0:
        return []
    communities = nx.community.louvain_communities(G, weight="weight", seed=seed)
    return sorted((frozenset(c) for c in communities if len(c) >= 2), key=min)


def baseline_social(heatmaps, pairwise, edge_threshold: float = 0.5, seed: int = 0) -> list[PredictedGroup]:
    """Pairwise + Louvain groups, with SA point at the argmax of the members' mean heatmap.

    Confidence is the mean pairwise probability inside the community.
    """
    A = np.asarray(heatmaps, dtype=np.float64)
    P = np.asarray(pairwise, dtype=np.float64)
    P = (P + P.T) / 2
    groups = []
    for comm in baseline_pairwise_cluster(P, edge_threshold, seed):
        idx = sorted(comm)
        x, y = peak_coords(A[idx].mean(axis=0))
        pairs = [P[i, j] for a, i in enumerate(idx) for j in idx[a + 1 :]]
        groups.append(PredictedGroup(comm, (float(x), float(y)), float(np.mean(pairs))))
    return groups


def modularity(G: nx.Graph, communities: Iterable[Iterable[int]]) -> float:
    return nx.community.modularity(G, [set(c) for c in communities], weight="weight")
