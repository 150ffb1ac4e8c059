"""Shared-attention heatmaps from memberships, refinement and group extraction.

The SA heatmap of group ``e`` is the membership-weighted mean of the
individual heatmaps, ``S_e = (1/N) sum_n M[e, n] A_n``.  Refinement appends
the argmax of each ``S_e`` to the group token, re-runs a (separately
parameterized) detector and recomputes memberships and heatmaps.  At
inference a token becomes a group when at least two memberships exceed tau.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .attention_net import (
    AuxHead,
    HeatmapDecoder,
    ModelConfig,
    PersonEncoder,
    cell_centers,
    peak_coords,
    point_feature_dim,
    point_features,
)
from .batching import SceneBatch, collate
from .group_head import GroupDetector, GroupHead, augment_person_tokens, membership_from_embeddings


def aggregate_heatmaps(membership: torch.Tensor, heatmaps: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Membership-weighted mean of individual heatmaps.

    ``membership`` is ``(..., E, N)``, ``heatmaps`` ``(..., N, H, W)``; the
    optional boolean ``mask`` ``(..., N)`` marks real persons, and the mean
    divides by the number of real persons.
    """
    N = heatmaps.shape[-3]
    if N == 0:
        raise ValueError("cannot aggregate over zero persons")
    if membership.shape[-1] != N:
        raise ValueError(f"membership has {membership.shape[-1]} persons, heatmaps {N}")
    H, W = heatmaps.shape[-2:]
    flat = heatmaps.reshape(*heatmaps.shape[:-2], H * W)
    if mask is None:
        count = torch.full(membership.shape[:-2], float(N), dtype=membership.dtype)
    else:
        membership = membership * mask[..., None, :].to(membership.dtype)
        count = mask.sum(-1).to(membership.dtype)
    out = membership @ flat / count[..., None, None]
    return out.reshape(*membership.shape[:-1], H, W)


def spatial_argmax(heatmap):
    """Same contract as :func:`peak_coords`."""
    return peak_coords(heatmap)


def soft_spatial_argmax(heatmap: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax-weighted expectation of cell centres (differentiable)."""
    H, W = heatmap.shape[-2:]
    weights = (heatmap.reshape(*heatmap.shape[:-2], H * W) / temperature).softmax(dim=-1)
    return weights @ cell_centers(H, W, heatmap.dtype)


class RefinementHead(nn.Module):
    """Second detection pass on group tokens augmented with SA peaks.

    The input projection sees ``[U | s | phi(s)]``, where ``phi`` is the same
    positional lifting the heatmap keys use.  With only the raw ``s`` the
    affine read-outs could not relate a peak to a person's gaze ray.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.token_dim
        self.proj = nn.Linear(D + 2 + point_feature_dim(cfg.n_frequencies), D)
        self.detector = GroupDetector(D, cfg.n_heads, D + 2, cfg.refine_layers)
        self.g = nn.Linear(D, cfg.membership_dim)
        self.f = nn.Linear(D + 2, cfg.membership_dim)
        self.soft_argmax = cfg.soft_argmax
        self.temperature = cfg.soft_argmax_temperature
        self.n_frequencies = cfg.n_frequencies

    def peaks(self, sa_maps: torch.Tensor) -> torch.Tensor:
        if self.soft_argmax:
            return soft_spatial_argmax(sa_maps, self.temperature)
        return spatial_argmax(sa_maps.detach()).to(sa_maps.dtype)

    def forward(self, updated, sa_maps, persons_aug, person_mask=None):
        peaks = self.peaks(sa_maps)
        refined_in = torch.cat([updated, peaks, point_features(peaks, self.n_frequencies)], dim=-1)
        refined = self.proj(refined_in)
        if len(self.detector.layers):
            refined = self.detector(refined, persons_aug, person_mask)
        return membership_from_embeddings(self.g(refined), self.f(persons_aug))


def refine(updated, sa_maps, persons_aug, heatmaps, head: RefinementHead, mask=None):
    """``(M', S')`` from initial tokens ``U``, initial maps ``S`` and ``P'``.

    Accepts single-scene tensors (no batch dim) or batched ones.
    """
    squeeze = updated.dim() == 2
    if squeeze:
        updated, sa_maps, persons_aug, heatmaps = updated[None], sa_maps[None], persons_aug[None], heatmaps[None]
        mask = None if mask is None else mask[None]
    refined_m = head(updated, sa_maps, persons_aug, mask)
    refined_s = aggregate_heatmaps(refined_m, heatmaps, mask)
    if squeeze:
        return refined_m[0], refined_s[0]
    return refined_m, refined_s


@dataclass
class PredictedGroup:
    members: frozenset[int]
    sa_point: tuple[float, float]
    confidence: float

    def to_record(self) -> dict:
        return {"members": sorted(self.members), "sa_point": list(self.sa_point), "confidence": self.confidence}

    @classmethod
    def from_record(cls, rec: dict) -> "PredictedGroup":
        return cls(frozenset(int(m) for m in rec["members"]), tuple(float(v) for v in rec["sa_point"]), float(rec["confidence"]))


def extract_groups(membership, sa_maps, tau: float) -> list[PredictedGroup]:
    """Groups of one scene: tokens with at least two memberships above ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    m = np.asarray(membership.detach() if isinstance(membership, torch.Tensor) else membership, dtype=np.float64)
    s = np.asarray(sa_maps.detach() if isinstance(sa_maps, torch.Tensor) else sa_maps, dtype=np.float64)
    groups = []
    for e in range(m.shape[0]):
        members = np.flatnonzero(m[e] > tau)
        if len(members) < 2:
            continue
        x, y = peak_coords(s[e])
        groups.append(PredictedGroup(frozenset(int(i) for i in members), (float(x), float(y)), float(s[e].max())))
    return groups


@dataclass
class ModelOutput:
    tokens: torch.Tensor  # P (B, N, D)
    heatmaps: torch.Tensor  # A (B, N, H, W)
    aux: object
    persons_aug: torch.Tensor  # P' (B, N, D+2)
    updated: torch.Tensor  # U (B, E, D)
    membership: torch.Tensor  # M (B, E, N)
    sa_maps: torch.Tensor  # S (B, E, H, W)
    refined_membership: torch.Tensor | None  # M'
    refined_sa_maps: torch.Tensor | None  # S'

    @property
    def final_membership(self) -> torch.Tensor:
        return self.membership if self.refined_membership is None else self.refined_membership

    @property
    def final_sa_maps(self) -> torch.Tensor:
        return self.sa_maps if self.refined_sa_maps is None else self.refined_sa_maps


class SharedAttentionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = PersonEncoder(cfg)
        self.decoder = HeatmapDecoder(cfg)
        self.aux = AuxHead(cfg)
        self.group_head = GroupHead(cfg)
        self.refiner = RefinementHead(cfg) if cfg.refinement else None

    def forward(self, batch: SceneBatch) -> ModelOutput:
        tokens = self.encoder(batch.boxes, batch.appearance, batch.mask, self.encoder.context(batch.grid))
        heatmaps = self.decoder(tokens, batch.grid)
        aux = self.aux(tokens)
        persons_aug = augment_person_tokens(tokens, heatmaps)
        updated, membership = self.group_head(persons_aug, batch.mask)
        sa_maps = aggregate_heatmaps(membership, heatmaps, batch.mask)
        refined_m = refined_s = None
        if self.refiner is not None:
            refined_m, refined_s = refine(updated, sa_maps, persons_aug, heatmaps, self.refiner, batch.mask)
        return ModelOutput(tokens, heatmaps, aux, persons_aug, updated, membership, sa_maps, refined_m, refined_s)


@dataclass
class ScenePrediction:
    scene_id: str
    groups: list[PredictedGroup]

    def to_record(self) -> dict:
        return {"scene_id": self.scene_id, "groups": [g.to_record() for g in self.groups]}


@torch.no_grad()
def predict(
    model: SharedAttentionModel,
    scenes: Sequence,
    sigma: float = 0.05,
    batch_size: int = 64,
    tau: float | None = None,
    stage: str = "final",
    with_pairwise: bool = False,
):
    """Run the model over scenes; returns ``(predictions, heatmaps)``.

    ``heatmaps`` is a list of per-scene individual heatmap arrays (N x H x W),
    which the post-processing baselines consume.  ``stage="initial"`` reads
    groups from ``(M, S)`` instead of the final stage.  With
    ``with_pairwise`` a third list holds the pairwise social matrices.
    """
    if stage not in ("final", "initial"):
        raise ValueError(f"unknown stage {stage!r}")
    tau = model.cfg.tau if tau is None else tau
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    preds, heatmaps, pairwise = [], [], []
    for start in range(0, len(scenes), batch_size):
        chunk = list(scenes[start : start + batch_size])
        batch = collate(chunk, sigma, dtype)
        out = model(batch)
        M, S = (out.final_membership, out.final_sa_maps) if stage == "final" else (out.membership, out.sa_maps)
        for b, scene in enumerate(chunk):
            n = len(scene.persons)
            preds.append(ScenePrediction(scene.scene_id, extract_groups(M[b, :, :n], S[b], tau)))
            heatmaps.append(out.heatmaps[b, :n].numpy().astype(np.float64))
            pairwise.append(out.aux.pairwise_social[b, :n, :n].numpy().astype(np.float64))
    model.train(was_training)
    if with_pairwise:
        return preds, heatmaps, pairwise
    return preds, heatmaps


def write_predictions(preds: Iterable[ScenePrediction], fh: IO[str]) -> None:
    for p in preds:
        fh.write(json.dumps(p.to_record()) + "\n")


def read_predictions(fh: IO[str]) -> Iterator[ScenePrediction]:
    for line in fh:
        if not line.strip():
            continue
        rec = json.loads(line)
        yield ScenePrediction(rec["scene_id"], [PredictedGroup.from_record(g) for g in rec["groups"]])
