"""Individual attention estimation: person tokens, heatmaps, aux predictions.

A compact stand-in for a gaze-following encoder.  Persons are embedded
from (head box, appearance), interact through person-person self-attention
and person-scene cross-attention onto the flattened feature grid, and each
person token is decoded into an ``H x W`` attention heatmap in ``[0, 1]``.

Everything is batched over scenes with a person mask; padded persons never
influence real ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class EmptySceneError(ValueError):
    pass


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    heatmap_shape: tuple[int, int] = (32, 32)
    max_group_tokens: int = 4
    tau: float = 0.5
    appearance_dim: int = 16
    grid_channels: int = 4
    n_frequencies: int = 4
    decoder_dim: int = 32
    context_pool: int = 4
    social_dim: int = 16
    membership_dim: int = 64
    group_encoder_layers: int = 1
    detector_layers: int = 2
    refine_layers: int = 1
    refinement: bool = True
    soft_argmax: bool = False
    soft_argmax_temperature: float = 0.02

    def validate(self) -> None:
        if self.token_dim < 8 or self.token_dim % self.n_heads:
            raise ModelConfigError("token_dim must be >= 8 and divisible by n_heads")
        if self.max_group_tokens < 1:
            raise ModelConfigError("max_group_tokens must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ModelConfigError("tau must lie in (0, 1)")


def peak_coords(heatmap) -> torch.Tensor | np.ndarray:
    """Normalized ``(x, y)`` cell centre of the maximum over the last two axes.

    Ties resolve to the smallest row-major index.  Works on numpy arrays and
    torch tensors with arbitrary leading dims; the result has trailing dim 2.
    """
    is_numpy = not isinstance(heatmap, torch.Tensor)
    t = torch.as_tensor(np.asarray(heatmap)) if is_numpy else heatmap
    if t.dim() < 2 or t.shape[-1] == 0 or t.shape[-2] == 0:
        raise ValueError("peak_coords needs a non-empty map")
    H, W = t.shape[-2:]
    idx = t.detach().reshape(*t.shape[:-2], H * W).argmax(dim=-1)
    row = torch.div(idx, W, rounding_mode="floor")
    col = idx - row * W
    dtype = t.dtype if t.is_floating_point() else torch.float64
    out = torch.stack([(col.to(dtype) + 0.5) / W, (row.to(dtype) + 0.5) / H], dim=-1)
    return out.numpy() if is_numpy else out


def cell_centers(H: int, W: int, dtype=torch.float32) -> torch.Tensor:
    """``(H*W, 2)`` normalized (x, y) cell centres in row-major order."""
    ys = (torch.arange(H, dtype=dtype) + 0.5) / H
    xs = (torch.arange(W, dtype=dtype) + 0.5) / W
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def point_features(xy: torch.Tensor, n_frequencies: int) -> torch.Tensor:
    """Sinusoidal encodings of points ``(..., 2)`` plus raw ``x, y, x^2, y^2, xy, 1``.

    The quadratic terms let a linear read-out express a ray-shaped ridge,
    e.g. the squared distance to a gaze line.
    """
    freqs = math.pi * 2.0 ** torch.arange(n_frequencies, dtype=xy.dtype, device=xy.device)
    angles = xy[..., None] * freqs  # (..., 2, F)
    sincos = torch.cat([angles.sin(), angles.cos()], dim=-1).flatten(-2)
    ones = torch.ones_like(xy[..., :1])
    raw = torch.cat([xy, xy**2, xy.prod(-1, keepdim=True), ones], dim=-1)
    return torch.cat([sincos, raw], dim=-1)


def point_feature_dim(n_frequencies: int) -> int:
    return 4 * n_frequencies + 6


def position_features(H: int, W: int, n_frequencies: int, dtype=torch.float32) -> torch.Tensor:
    """:func:`point_features` of the ``H*W`` cell centres."""
    return point_features(cell_centers(H, W, dtype), n_frequencies)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value widths."""

    def __init__(self, dim: int, n_heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, keys, key_mask=None):
        B, Lq, _ = query.shape
        Lk = keys.shape[1]
        h, d = self.n_heads, self.head_dim
        q = self.q(query).view(B, Lq, h, d).transpose(1, 2)
        k = self.k(keys).view(B, Lk, h, d).transpose(1, 2)
        v = self.v(keys).view(B, Lk, h, d).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(B, Lq, h * d)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


class InteractionLayer(nn.Module):
    """Pre-norm block: token self-attention, cross-attention, feed-forward."""

    def __init__(self, dim: int, n_heads: int, context_dim: int | None = None, self_attention: bool = True):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, n_heads) if self_attention else None
        self.norm_self = nn.LayerNorm(dim) if self_attention else None
        self.cross_attn = MultiHeadAttention(dim, n_heads, kv_dim=context_dim)
        self.norm_cross = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.norm_ff = nn.LayerNorm(dim)

    def forward(self, x, context, token_mask=None, context_mask=None):
        if self.self_attn is not None:
            y = self.norm_self(x)
            x = x + self.self_attn(y, y, token_mask)
        x = x + self.cross_attn(self.norm_cross(x), context, context_mask)
        x = x + self.ff(self.norm_ff(x))
        return x


class PersonEncoder(nn.Module):
    """Embeds persons and runs person-person / person-scene interaction.

    The scene context is the feature grid average-pooled by
    ``cfg.context_pool`` and tagged with cell positional features.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.token_dim
        H, W = cfg.heatmap_shape
        if H % cfg.context_pool or W % cfg.context_pool:
            raise ModelConfigError("heatmap_shape must be divisible by context_pool")
        self.pool = cfg.context_pool
        self.person_in = nn.Sequential(nn.Linear(6 + cfg.appearance_dim, D), nn.GELU(), nn.Linear(D, D))
        pos = position_features(H // self.pool, W // self.pool, cfg.n_frequencies)
        self.register_buffer("pos", pos, persistent=False)
        self.grid_in = nn.Linear(cfg.grid_channels + pos.shape[1], D)
        self.layers = nn.ModuleList(InteractionLayer(D, cfg.n_heads) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(D)
        self.heatmap_shape = (H, W)

    def person_features(self, boxes, appearance):
        centers = torch.stack([(boxes[..., 0] + boxes[..., 2]) / 2, (boxes[..., 1] + boxes[..., 3]) / 2], -1)
        return torch.cat([boxes, centers, appearance], dim=-1)

    def context(self, grid):
        """Pooled grid-cell embeddings ``(B, HW / pool^2, D)``."""
        check_grid(grid, self.heatmap_shape)
        B, H, W, C = grid.shape
        p = self.pool
        pooled = grid.reshape(B, H // p, p, W // p, p, C).mean((2, 4)).reshape(B, -1, C)
        pos = self.pos.to(grid.dtype).expand(B, -1, -1)
        return self.grid_in(torch.cat([pooled, pos], dim=-1))

    def forward(self, boxes, appearance, mask, context):
        x = self.person_in(self.person_features(boxes, appearance))
        for layer in self.layers:
            x = layer(x, context, token_mask=mask)
        return self.norm(x)


def check_grid(grid, shape) -> None:
    if tuple(grid.shape[1:3]) != tuple(shape):
        raise ModelConfigError(f"grid is {tuple(grid.shape[1:3])} but the model expects {tuple(shape)}")


class HeatmapDecoder(nn.Module):
    """Sigmoid of scaled person-token / grid-cell dot products."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.token_dim
        H, W = cfg.heatmap_shape
        pos = position_features(H, W, cfg.n_frequencies)
        self.register_buffer("pos", pos, persistent=False)
        self.query = nn.Sequential(nn.Linear(D, D), nn.GELU(), nn.Linear(D, cfg.decoder_dim))
        self.key = nn.Linear(cfg.grid_channels + pos.shape[1], cfg.decoder_dim)
        # sigmoid(gain * logit + bias): monotone, so the heatmap argmax is the logit argmax
        self.gain = nn.Parameter(torch.ones(()))
        self.bias = nn.Parameter(torch.full((), -2.0))
        self.heatmap_shape = (H, W)
        self.scale = 1.0 / math.sqrt(cfg.decoder_dim)

    def forward(self, tokens, grid):
        check_grid(grid, self.heatmap_shape)
        B, N, _ = tokens.shape
        H, W = self.heatmap_shape
        pos = self.pos.to(grid.dtype).expand(B, -1, -1)
        keys = self.key(torch.cat([grid.reshape(B, H * W, -1), pos], dim=-1))
        logits = self.query(tokens) @ keys.transpose(1, 2) * self.scale  # (B, N, HW)
        return torch.sigmoid(self.gain * logits + self.bias).view(B, N, H, W)


@dataclass
class AuxPredictions:
    gaze_dir: torch.Tensor  # (..., N, 2) unit vectors
    in_out: torch.Tensor  # (..., N)
    pairwise_social: torch.Tensor  # (..., N, N)


def _unit(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    fallback = torch.zeros_like(v)
    fallback[..., 0] = 1.0
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(norm > 0, v / safe, fallback)


class AuxHead(nn.Module):
    """Gaze direction, in/out-of-frame and pairwise shared-attention heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.token_dim
        self.direction = nn.Linear(D, 2)
        self.in_out = nn.Linear(D, 1)
        self.social = nn.Linear(D, cfg.social_dim)
        self.social_bias = nn.Parameter(torch.zeros(()))
        self.social_scale = 1.0 / math.sqrt(cfg.social_dim)

    def forward(self, tokens) -> AuxPredictions:
        s = self.social(tokens)
        logits = s @ s.transpose(-1, -2) * self.social_scale + self.social_bias
        return AuxPredictions(
            gaze_dir=_unit(self.direction(tokens)),
            in_out=torch.sigmoid(self.in_out(tokens)[..., 0]),
            pairwise_social=torch.sigmoid(logits),
        )


# -- single-scene conveniences ---------------------------------------------


def scene_tensors(scene, dtype=torch.float32):
    """``(boxes, appearance, mask, grid)`` for one scene, batch dim of 1."""
    if not scene.persons:
        raise EmptySceneError(f"scene {scene.scene_id} has no persons")
    boxes = torch.tensor([p.head_box for p in scene.persons], dtype=dtype)[None]
    app = torch.tensor(np.stack([p.appearance for p in scene.persons]), dtype=dtype)[None]
    mask = torch.ones(1, len(scene.persons), dtype=torch.bool)
    grid = torch.as_tensor(scene.grid, dtype=dtype)[None]
    return boxes, app, mask, grid


def encode_persons(scene, model) -> torch.Tensor:
    """Person tokens ``P`` (N x D) for one scene."""
    dtype = next(model.parameters()).dtype
    boxes, app, mask, grid = scene_tensors(scene, dtype)
    enc = model.encoder
    return enc(boxes, app, mask, enc.context(grid))[0]


def decode_individual_heatmaps(tokens: torch.Tensor, grid, model) -> torch.Tensor:
    """Individual heatmaps ``A`` (N x H x W) from person tokens and a feature grid."""
    if tokens.shape[0] == 0:
        raise EmptySceneError("no person tokens")
    grid = torch.as_tensor(np.asarray(grid) if not isinstance(grid, torch.Tensor) else grid, dtype=tokens.dtype)
    return model.decoder(tokens[None], grid[None])[0]


def predict_aux(tokens: torch.Tensor, model) -> AuxPredictions:
    if tokens.shape[0] == 0:
        raise EmptySceneError("no person tokens")
    return model.aux(tokens)
