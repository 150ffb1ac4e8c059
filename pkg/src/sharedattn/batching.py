"""Padding a list of scenes into masked tensors (inputs and targets)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scene_synth import Scene, render_gt_heatmap


@dataclass
class SceneBatch:
    scene_ids: list[str]
    boxes: torch.Tensor  # (B, N, 4)
    appearance: torch.Tensor  # (B, N, Da)
    mask: torch.Tensor  # (B, N) bool
    grid: torch.Tensor  # (B, H, W, C)
    n_persons: torch.Tensor  # (B,)
    # targets
    gaze_point: torch.Tensor  # (B, N, 2), zeros where out of frame
    gaze_dir: torch.Tensor  # (B, N, 2) unit vectors, zeros where out of frame
    in_frame: torch.Tensor  # (B, N) float
    heatmap_target: torch.Tensor  # (B, N, H, W)
    same_group: torch.Tensor  # (B, N, N) float
    group_members: list[torch.Tensor]  # per scene (K, N_b) 0/1
    group_heatmaps: list[torch.Tensor]  # per scene (K, H, W)
    group_points: list[torch.Tensor]  # per scene (K, 2)

    def __len__(self) -> int:
        return len(self.scene_ids)

    def to(self, dtype) -> "SceneBatch":
        kw = {}
        for name, value in vars(self).items():
            if isinstance(value, torch.Tensor) and value.is_floating_point():
                value = value.to(dtype)
            elif isinstance(value, list) and value and isinstance(value[0], torch.Tensor):
                value = [v.to(dtype) for v in value]
            kw[name] = value
        return SceneBatch(**kw)


def collate(scenes: list[Scene], sigma: float, dtype=torch.float32) -> SceneBatch:
    if not scenes:
        raise ValueError("empty batch")
    H, W, C = scenes[0].grid.shape
    B = len(scenes)
    N = max(len(s.persons) for s in scenes)
    Da = len(scenes[0].persons[0].appearance)
    boxes = np.zeros((B, N, 4))
    app = np.zeros((B, N, Da))
    mask = np.zeros((B, N), dtype=bool)
    grid = np.zeros((B, H, W, C))
    gaze_point = np.zeros((B, N, 2))
    gaze_dir = np.zeros((B, N, 2))
    in_frame = np.zeros((B, N))
    hm = np.zeros((B, N, H, W))
    same = np.zeros((B, N, N))
    members, group_hms, points = [], [], []
    for b, s in enumerate(scenes):
        n = len(s.persons)
        mask[b, :n] = True
        grid[b] = s.grid
        for i, p in enumerate(s.persons):
            boxes[b, i] = p.head_box
            app[b, i] = p.appearance
            if p.in_frame:
                in_frame[b, i] = 1.0
                gaze_point[b, i] = p.gaze_target
                d = np.asarray(p.gaze_target) - np.asarray(p.head_center)
                norm = np.linalg.norm(d)
                gaze_dir[b, i] = d / norm if norm > 0 else (1.0, 0.0)
                hm[b, i] = render_gt_heatmap(p.gaze_target, sigma, H, W)
        m = s.membership_matrix()
        if len(m):
            same[b, :n, :n] = np.clip(m.T @ m, 0, 1)
        members.append(torch.as_tensor(m, dtype=dtype))
        group_hms.append(
            torch.as_tensor(
                np.stack([render_gt_heatmap(g.sa_point, sigma, H, W) for g in s.groups])
                if s.groups
                else np.zeros((0, H, W)),
                dtype=dtype,
            )
        )
        points.append(torch.as_tensor(np.array([g.sa_point for g in s.groups]).reshape(-1, 2), dtype=dtype))
    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return SceneBatch(
        scene_ids=[s.scene_id for s in scenes],
        boxes=t(boxes),
        appearance=t(app),
        mask=torch.as_tensor(mask),
        grid=t(grid),
        n_persons=torch.as_tensor(mask.sum(1)),
        gaze_point=t(gaze_point),
        gaze_dir=t(gaze_dir),
        in_frame=t(in_frame),
        heatmap_target=t(hm),
        same_group=t(same),
        group_members=members,
        group_heatmaps=group_hms,
        group_points=points,
    )
