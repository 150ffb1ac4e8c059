"""Figures: PR curves per threshold cell, scene renderings, refinement panels.

Scene renderings draw every member of a predicted group inside a rectangle
of the group's colour and mark the group's SA point with a dot of the same
colour.  Heads outside any group appear as grey crosses.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .eval_metrics import EvalRecord, ThresholdGrid, pr_curve  # noqa: E402

log = logging.getLogger(__name__)

PALETTE = ["tab:red", "tab:blue", "tab:green", "tab:orange", "tab:purple", "tab:cyan", "tab:olive", "tab:pink"]


def _dist_label(d: float) -> str:
    return "inf" if math.isinf(d) else f"{d:g}"


def pr_figure(records: Sequence[EvalRecord], theta_iou: float, theta_dist: float, label: str = "ours"):
    """Precision-recall curve for one (theta_iou, theta_dist) cell."""
    fig, ax = plt.subplots(figsize=(4, 4))
    n_pred = sum(len(r.predicted) for r in records)
    if n_pred == 0:
        log.warning("no predictions; PR curve for IoU=%s Dist=%s is empty", theta_iou, _dist_label(theta_dist))
        ax.plot([0, 1], [0, 0], label=f"{label} (AP 0.0)")
    else:
        curve = pr_curve(records, theta_iou, theta_dist)
        recall = np.concatenate([[0.0], curve.recall])
        precision = np.concatenate([[curve.precision[0]], curve.precision])
        ax.step(recall, precision, where="post", label=f"{label} (AP {100 * curve.ap:.1f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"IoU>={theta_iou:g}, Dist<{_dist_label(theta_dist)}")
    ax.legend(loc="lower left")
    fig.tight_layout()
    return fig


def save_pr_curves(records, out_dir, grid: ThresholdGrid = ThresholdGrid(), label: str = "ours") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for iou in grid.iou_thresholds:
        for dist in grid.dist_thresholds:
            fig = pr_figure(records, iou, dist, label)
            path = out_dir / f"pr_iou{iou:g}_dist{_dist_label(dist)}.png"
            fig.savefig(path, dpi=80)
            plt.close(fig)
            paths.append(path)
    return paths


def draw_scene(ax, scene, groups, title: str | None = None) -> None:
    """Draw the feature grid, heads and predicted groups of one scene on ``ax``."""
    ax.imshow(np.asarray(scene.grid)[..., 0], extent=(0, 1, 1, 0), cmap="gray", alpha=0.5)
    grouped = set()
    for e, group in enumerate(groups):
        color = PALETTE[e % len(PALETTE)]
        for m in sorted(group.members):
            x0, y0, x1, y1 = scene.persons[m].head_box
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor=color, linewidth=2))
            grouped.add(m)
        ax.scatter([group.sa_point[0]], [group.sa_point[1]], color=color, s=40, zorder=3)
    loose = [p.head_center for i, p in enumerate(scene.persons) if i not in grouped]
    if loose:
        xs, ys = zip(*loose)
        ax.plot(xs, ys, "x", color="0.4")
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title if title is not None else scene.scene_id, fontsize=9)


def scene_figure(scene, groups, title: str | None = None):
    fig, ax = plt.subplots(figsize=(4, 4))
    draw_scene(ax, scene, groups, title)
    fig.tight_layout()
    return fig


def refinement_figure(scene, initial_groups, refined_groups):
    """Side-by-side initial-stage and refined-stage groups of one scene."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    draw_scene(axes[0], scene, initial_groups, "initial")
    draw_scene(axes[1], scene, refined_groups, "refined")
    fig.suptitle(scene.scene_id, fontsize=10)
    fig.tight_layout()
    return fig


def save_scene_renderings(scenes, predictions, out_dir, limit: int = 8, prefix: str = "scene") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for scene, pred in list(zip(scenes, predictions))[:limit]:
        fig = scene_figure(scene, pred.groups)
        path = out_dir / f"{prefix}_{scene.scene_id}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths


def save_refinement_panels(scenes, initial, refined, out_dir, limit: int = 8) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for scene, a, b in list(zip(scenes, initial, refined))[:limit]:
        fig = refinement_figure(scene, a.groups, b.groups)
        path = out_dir / f"refine_{scene.scene_id}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths
