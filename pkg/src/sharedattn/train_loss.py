"""Set-matching losses and the training loop.

Predicted groups (one per group token) are matched one-to-one to ground
truth groups with the Hungarian algorithm on a membership BCE cost.
Matched tokens are supervised with BCE on memberships and MSE on SA
heatmaps, both for the initial and the refined stage; unmatched tokens are
pushed towards the empty group with a reduced weight.  Auxiliary terms
supervise gaze direction, individual heatmaps, in/out of frame and pairwise
shared attention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import IO, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .batching import SceneBatch, collate
from .sa_pipeline import ModelOutput, SharedAttentionModel
from .scene_synth import transform_scene

log = logging.getLogger(__name__)

EPS = 1e-6


class NonFiniteLossError(RuntimeError):
    def __init__(self, scene_ids: Sequence[str], breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss {breakdown.as_text()} in scenes {list(scene_ids)}")
        self.scene_ids = list(scene_ids)
        self.breakdown = breakdown


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_pred: set[int]

    def cost(self, matrix) -> float:
        return float(sum(matrix[e][k] for e, k in self.pairs))


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of ``min(E, K)`` pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    E, K = cost.shape
    if E == 0 or K == 0:
        return Assignment([], set(range(E)))
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return Assignment(pairs, set(range(E)) - set(rows.tolist()))


def bce(p, target, eps: float = EPS):
    """Elementwise binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = p.clamp(eps, 1 - eps)
    return -(target * p.log() + (1 - target) * (1 - p).log())


def membership_cost(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> np.ndarray:
    """``cost[e, k]`` = mean over persons of BCE(pred[e], gt[k])."""
    with torch.no_grad():
        c = bce(pred[:, None, :], gt[None, :, :], eps).mean(-1)
    return c.double().numpy()


def match_groups(refined_membership, refined_sa=None, gt_membership=None, gt_sa=None, eps: float = EPS) -> Assignment:
    """Hungarian matching on refined memberships; heatmaps do not enter the cost."""
    pred = torch.as_tensor(refined_membership)
    gt = torch.as_tensor(gt_membership, dtype=pred.dtype)
    if gt.shape[0] == 0:
        return Assignment([], set(range(pred.shape[0])))
    return hungarian(membership_cost(pred, gt, eps))


def _row_targets(assignment: Assignment, E: int, gt: torch.Tensor, no_object_weight: float):
    """Per-token target rows (matched GT row or zeros) and row weights."""
    target = torch.zeros((E,) + tuple(gt.shape[1:]), dtype=gt.dtype)
    weight = torch.full((E,), no_object_weight, dtype=gt.dtype)
    for e, k in assignment.pairs:
        target[e] = gt[k]
        weight[e] = 1.0
    return target, weight


def loss_grp(membership, refined_membership, gt_membership, assignment: Assignment, no_object_weight=0.1, eps=EPS):
    """Summed row-mean BCE of both membership stages against matched GT rows.

    ``refined_membership`` may be None (refinement disabled).
    """
    gt = torch.as_tensor(gt_membership, dtype=membership.dtype)
    target, weight = _row_targets(assignment, membership.shape[0], gt, no_object_weight) if len(gt) else (
        torch.zeros_like(membership),
        torch.full((membership.shape[0],), no_object_weight, dtype=membership.dtype),
    )
    total = (weight * bce(membership, target, eps).mean(-1)).sum()
    if refined_membership is not None:
        total = total + (weight * bce(refined_membership, target, eps).mean(-1)).sum()
    return total


def loss_sae(sa_maps, refined_sa_maps, gt_sa_maps, assignment: Assignment, no_object_weight=0.1):
    """Summed per-map MSE of both SA stages against matched GT heatmaps."""
    E = sa_maps.shape[0]
    gt = torch.as_tensor(gt_sa_maps, dtype=sa_maps.dtype)
    if len(gt):
        target, weight = _row_targets(assignment, E, gt, no_object_weight)
    else:
        target = torch.zeros_like(sa_maps)
        weight = torch.full((E,), no_object_weight, dtype=sa_maps.dtype)
    total = (weight * ((sa_maps - target) ** 2).mean((-1, -2))).sum()
    if refined_sa_maps is not None:
        total = total + (weight * ((refined_sa_maps - target) ** 2).mean((-1, -2))).sum()
    return total


def aux_terms(gaze_dir, in_out, social, heatmaps, tgt_dir, tgt_in, tgt_hm, tgt_same, eps=EPS):
    """``(l_ang, l_hm, l_io, l_social)`` for one scene's real persons."""
    n = gaze_dir.shape[0]
    inside = tgt_in > 0.5
    if inside.any():
        cos = (gaze_dir[inside] * tgt_dir[inside]).sum(-1)
        l_ang = (1 - cos).mean()
    else:
        l_ang = gaze_dir.sum() * 0
    l_hm = ((heatmaps - tgt_hm) ** 2).mean()
    l_io = bce(in_out, tgt_in, eps).mean()
    if n >= 2:
        iu = torch.triu_indices(n, n, offset=1)
        l_social = bce(social[iu[0], iu[1]], tgt_same[iu[0], iu[1]], eps).mean()
    else:
        l_social = social.sum() * 0
    return l_ang, l_hm, l_io, l_social


def loss_aux(aux, heatmaps, scene, sigma: float = 0.05, eps=EPS):
    """Aux losses of a single scene; returns ``(l_ang, l_hm, l_io, l_social)``."""
    b = collate([scene], sigma, heatmaps.dtype)
    return aux_terms(
        aux.gaze_dir, aux.in_out, aux.pairwise_social, heatmaps,
        b.gaze_dir[0], b.in_frame[0], b.heatmap_target[0], b.same_group[0], eps,
    )


@dataclass
class LossBreakdown:
    l_grp: float | torch.Tensor = 0.0
    l_sae: float | torch.Tensor = 0.0
    l_ang: float | torch.Tensor = 0.0
    l_hm: float | torch.Tensor = 0.0
    l_io: float | torch.Tensor = 0.0
    l_social: float | torch.Tensor = 0.0
    total: float | torch.Tensor = 0.0

    def detached(self) -> "LossBreakdown":
        return LossBreakdown(**{f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)})

    def as_text(self) -> str:
        return " ".join(f"{f.name}={float(getattr(self, f.name)):.6g}" for f in fields(self))


@dataclass
class TrainConfig:
    lr: float = 1e-5
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    sigma: float = 0.05
    no_object_weight: float = 0.1
    social_loss: bool = True
    eps: float = EPS
    loss_weights: dict = field(
        default_factory=lambda: {"grp": 1.0, "sae": 1.0, "ang": 1.0, "hm": 1.0, "io": 1.0, "social": 1.0}
    )
    log_every: int = 1
    # draw a random flip/transpose of each training scene per step
    augment: bool = False

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: raised learning rate and scene augmentation for short CPU runs."""
        overrides.setdefault("lr", 1e-3)
        overrides.setdefault("augment", True)
        return cls(**overrides)


def batch_targets(out: ModelOutput, batch: SceneBatch, cfg: TrainConfig):
    """Hungarian-matched per-token targets for a batch.

    Returns ``(member_target (B,E,N), map_target (B,E,H,W), row_weight (B,E),
    assignments)``.
    """
    M = out.final_membership
    B, E, N = M.shape
    H, W = out.heatmaps.shape[-2:]
    dtype = M.dtype
    member_t = torch.zeros(B, E, N, dtype=dtype)
    map_t = torch.zeros(B, E, H, W, dtype=dtype)
    weight = torch.full((B, E), cfg.no_object_weight, dtype=dtype)
    assignments = []
    for b in range(B):
        n = int(batch.n_persons[b])
        gt_m = batch.group_members[b]
        a = match_groups(M[b, :, :n].detach(), None, gt_m, eps=cfg.eps)
        assignments.append(a)
        for e, k in a.pairs:
            member_t[b, e, :n] = gt_m[k]
            map_t[b, e] = batch.group_heatmaps[b][k]
            weight[b, e] = 1.0
    return member_t, map_t, weight, assignments


def compute_losses(out: ModelOutput, batch: SceneBatch, cfg: TrainConfig) -> LossBreakdown:
    """Loss of a batch: per-scene terms averaged over the scenes.

    Vectorized equivalent of :func:`loss_grp`, :func:`loss_sae` and
    :func:`aux_terms` applied scene by scene.
    """
    eps = cfg.eps
    mask = batch.mask.to(out.heatmaps.dtype)  # (B, N)
    n = mask.sum(-1)  # (B,)
    member_t, map_t, weight, _ = batch_targets(out, batch, cfg)

    def grp(m):
        per_row = (bce(m, member_t, eps) * mask[:, None, :]).sum(-1) / n[:, None]
        return (weight * per_row).sum(-1)

    def sae(s):
        return (weight * ((s - map_t) ** 2).mean((-1, -2))).sum(-1)

    l_grp = grp(out.membership)
    l_sae = sae(out.sa_maps)
    if out.refined_membership is not None:
        l_grp = l_grp + grp(out.refined_membership)
        l_sae = l_sae + sae(out.refined_sa_maps)

    aux = out.aux
    inside = batch.in_frame * mask
    n_in = inside.sum(-1)
    cos = (aux.gaze_dir * batch.gaze_dir).sum(-1)
    l_ang = torch.where(n_in > 0, ((1 - cos) * inside).sum(-1) / n_in.clamp(min=1), torch.zeros_like(n_in))
    l_hm = (((out.heatmaps - batch.heatmap_target) ** 2).mean((-1, -2)) * mask).sum(-1) / n
    l_io = (bce(aux.in_out, batch.in_frame, eps) * mask).sum(-1) / n
    pair_mask = torch.triu(mask[:, :, None] * mask[:, None, :], diagonal=1)
    n_pairs = pair_mask.sum((-1, -2))
    social = (bce(aux.pairwise_social, batch.same_group, eps) * pair_mask).sum((-1, -2))
    l_social = torch.where(n_pairs > 0, social / n_pairs.clamp(min=1), torch.zeros_like(n_pairs))

    means = {
        "grp": l_grp.mean(), "sae": l_sae.mean(), "ang": l_ang.mean(),
        "hm": l_hm.mean(), "io": l_io.mean(), "social": l_social.mean(),
    }
    if not cfg.social_loss:
        means["social"] = means["social"].detach() * 0
    w = cfg.loss_weights
    total = sum(w[k] * means[k] for k in means)
    return LossBreakdown(
        l_grp=means["grp"], l_sae=means["sae"], l_ang=means["ang"], l_hm=means["hm"],
        l_io=means["io"], l_social=means["social"], total=total,
    )


def make_optimizer(model: SharedAttentionModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr)


def _non_finite_scenes(out: ModelOutput) -> list[int]:
    tensors = [out.heatmaps, out.final_membership, out.final_sa_maps, out.aux.gaze_dir, out.aux.in_out]
    ok = torch.ones(out.heatmaps.shape[0], dtype=torch.bool)
    for x in tensors:
        ok &= torch.isfinite(x.detach()).reshape(x.shape[0], -1).all(-1)
    return torch.nonzero(~ok).flatten().tolist()


def train_step(model: SharedAttentionModel, optimizer, batch: SceneBatch, cfg: TrainConfig) -> LossBreakdown:
    """One Adam step on the total loss; returns the pre-step breakdown."""
    model.train()
    out = model(batch)
    bad = _non_finite_scenes(out)
    if bad:
        raise NonFiniteLossError([batch.scene_ids[b] for b in bad], LossBreakdown(total=math.nan))
    losses = compute_losses(out, batch, cfg)
    if not torch.isfinite(losses.total):
        raise NonFiniteLossError(batch.scene_ids, losses.detached())
    optimizer.zero_grad()
    losses.total.backward()
    optimizer.step()
    return losses.detached()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_model(model_cfg, seed: int, dtype=torch.float32) -> SharedAttentionModel:
    torch.manual_seed(seed)
    return SharedAttentionModel(model_cfg).to(dtype)


def _random_symmetry(scene, rng: np.random.Generator):
    fx, fy, tr = (bool(b) for b in rng.integers(0, 2, size=3))
    square = scene.grid.shape[0] == scene.grid.shape[1]
    return transform_scene(scene, flip_x=fx, flip_y=fy, transpose=tr and square)


def train(
    model: SharedAttentionModel,
    scenes: Sequence,
    cfg: TrainConfig,
    log_fh: IO[str] | None = None,
    time_budget: float | None = None,
    lr_schedule: str = "cosine",
) -> list[LossBreakdown]:
    """Train for ``cfg.steps`` steps over reshuffled passes of ``scenes``.

    Batches are drawn without replacement per pass from a seeded shuffle, so
    the trajectory depends only on (model init, scenes, cfg).  Each step
    writes ``step=<i> l_grp=... total=...`` to ``log_fh``.  ``time_budget``
    (seconds) stops early; that path is not deterministic.
    """
    import time

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    optimizer = make_optimizer(model, cfg)
    sched = None
    if lr_schedule == "cosine" and cfg.steps > 0:
        sched = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, cfg.steps) / cfg.steps)) * 0.95 + 0.05
        )
    history: list[LossBreakdown] = []
    order = np.array([], dtype=int)
    start = time.monotonic()
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(scenes))])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        chosen = [scenes[i] for i in idx]
        if cfg.augment:
            chosen = [_random_symmetry(s, rng) for s in chosen]
        batch = collate(chosen, cfg.sigma, dtype)
        losses = train_step(model, optimizer, batch, cfg)
        if sched is not None:
            sched.step()
        history.append(losses)
        if log_fh is not None and step % cfg.log_every == 0:
            log_fh.write(f"step={step} {losses.as_text()}\n")
        if time_budget is not None and time.monotonic() - start > time_budget:
            log.info("time budget reached after %d steps", step + 1)
            break
    return history


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: SharedAttentionModel, path) -> None:
    """Named float32 arrays, row-major, in an ``.npz`` container."""
    arrays = {name: t.detach().cpu().to(torch.float32).numpy() for name, t in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(model: SharedAttentionModel, path) -> SharedAttentionModel:
    with np.load(path) as data:
        state = {k: torch.as_tensor(data[k]) for k in data.files}
    current = model.state_dict()
    missing = set(current) - set(state)
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)}")
    model.load_state_dict({k: v.to(current[k].dtype) for k, v in state.items()})
    return model


def breakdown_dict(b: LossBreakdown) -> dict:
    return {k: float(v) for k, v in asdict(b).items()}
