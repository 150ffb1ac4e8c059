"""Group detection with learnable group tokens.

Group tokens are encoded with self-attention, then updated by a detector
that cross-attends from the tokens onto the augmented person tokens
``P' = [P | peak_x | peak_y]``.  Memberships are sigmoids of dot products
between the embedded updated tokens and embedded person tokens, so a person
may belong to several groups.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention_net import FeedForward, InteractionLayer, ModelConfig, MultiHeadAttention, peak_coords


def augment_person_tokens(tokens: torch.Tensor, heatmaps: torch.Tensor) -> torch.Tensor:
    """Append each person's heatmap peak ``(x, y)`` to their token.

    ``tokens`` is ``(..., N, D)`` and ``heatmaps`` ``(..., N, H, W)``.  The
    peak coordinates carry no gradient.
    """
    if tokens.shape[:-1] != heatmaps.shape[:-2]:
        raise ValueError(f"person count mismatch: tokens {tuple(tokens.shape)} vs heatmaps {tuple(heatmaps.shape)}")
    peaks = peak_coords(heatmaps.detach()).to(tokens.dtype)
    return torch.cat([tokens, peaks], dim=-1)


def membership_from_embeddings(group_emb: torch.Tensor, person_emb: torch.Tensor) -> torch.Tensor:
    """``sigmoid(g_e . f_n)`` for every (group, person) pair -> ``(..., E, N)``."""
    return torch.sigmoid(group_emb @ person_emb.transpose(-1, -2))


class GroupDetector(nn.Module):
    """DETR-style decoder: tokens self-attend, then query the persons."""

    def __init__(self, dim: int, n_heads: int, context_dim: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(InteractionLayer(dim, n_heads, context_dim=context_dim) for _ in range(n_layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens, persons, person_mask=None):
        for layer in self.layers:
            tokens = layer(tokens, persons, context_mask=person_mask)
        return self.norm(tokens)


class GroupEncoder(nn.Module):
    """Self-attention over the group tokens."""

    def __init__(self, dim: int, n_heads: int, n_layers: int):
        super().__init__()
        self.attn = nn.ModuleList(MultiHeadAttention(dim, n_heads) for _ in range(n_layers))
        self.ff = nn.ModuleList(FeedForward(dim) for _ in range(n_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(2 * n_layers))

    def forward(self, tokens):
        for i, (attn, ff) in enumerate(zip(self.attn, self.ff)):
            y = self.norms[2 * i](tokens)
            tokens = tokens + attn(y, y)
            tokens = tokens + ff(self.norms[2 * i + 1](tokens))
        return tokens


class GroupHead(nn.Module):
    """Initial group detection: ``(P', mask) -> (U, M)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.token_dim
        self.group_tokens = nn.Parameter(torch.randn(cfg.max_group_tokens, D) * 0.02)
        self.encoder = GroupEncoder(D, cfg.n_heads, cfg.group_encoder_layers)
        self.detector = GroupDetector(D, cfg.n_heads, D + 2, cfg.detector_layers)
        self.g = nn.Linear(D, cfg.membership_dim)
        self.f = nn.Linear(D + 2, cfg.membership_dim)

    def encoded_tokens(self, batch_size: int) -> torch.Tensor:
        return self.encoder(self.group_tokens.expand(batch_size, -1, -1))

    def detect(self, persons_aug, person_mask=None) -> torch.Tensor:
        """Updated group tokens ``U`` (B x E x D)."""
        return self.detector(self.encoded_tokens(persons_aug.shape[0]), persons_aug, person_mask)

    def membership(self, updated, persons_aug) -> torch.Tensor:
        return membership_from_embeddings(self.g(updated), self.f(persons_aug))

    def forward(self, persons_aug, person_mask=None):
        updated = self.detect(persons_aug, person_mask)
        return updated, self.membership(updated, persons_aug)


def detect_groups(persons_aug: torch.Tensor, head: GroupHead, person_mask=None) -> torch.Tensor:
    """Single-scene or batched group detection; returns ``U``."""
    squeeze = persons_aug.dim() == 2
    if persons_aug.shape[-2] == 0:
        raise ValueError("no persons to detect groups over")
    x = persons_aug[None] if squeeze else persons_aug
    updated = head.detect(x, person_mask)
    return updated[0] if squeeze else updated


def compute_membership(updated: torch.Tensor, persons_aug: torch.Tensor, head: GroupHead) -> torch.Tensor:
    """Membership matrix ``M`` (E x N), entries strictly inside (0, 1)."""
    return head.membership(updated, persons_aug)
