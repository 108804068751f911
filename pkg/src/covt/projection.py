"""Projection heads from backbone hidden states into expert prompt/feature spaces."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import CovtConfig
from .errors import ShapeMismatch

TARGET_SPACES = {
    "seg": "seg_prompt",
    "depth": "depth_prompt",
    "edge": "edge_kernel",
    "dino": "dino_feature",
}


class ProjectionHead(nn.Module):
    """linear -> cross-attention(learnable queries; keys = values = mapped input) -> two dense layers.

    The n input hiddens are treated as a set: the output has one row per query
    regardless of n, and permuting the inputs leaves it unchanged.
    """

    def __init__(self, target_space: str, hidden_dim: int, mapped_dim: int, query_count: int,
                 heads: int = 1, generator: torch.Generator | None = None):
        super().__init__()
        if mapped_dim % heads:
            raise ShapeMismatch(f"mapped_dim {mapped_dim} not divisible by {heads} heads")
        self.target_space = target_space
        self.hidden_dim = hidden_dim
        self.mapped_dim = mapped_dim
        self.query_count = query_count
        self.heads = heads
        self.linear = nn.Linear(hidden_dim, mapped_dim)
        self.queries = nn.Parameter(torch.empty(query_count, mapped_dim))
        self.fc1 = nn.Linear(mapped_dim, mapped_dim)
        self.fc2 = nn.Linear(mapped_dim, mapped_dim)
        self._init(generator)

    def _init(self, gen: torch.Generator | None) -> None:
        with torch.no_grad():
            for lin in (self.linear, self.fc1, self.fc2):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen) * 2 - 1) * bound)
                lin.bias.zero_()
            self.queries.copy_(torch.randn(self.queries.shape, generator=gen))

    def attention(self, hiddens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (attended (Q, mapped), weights (heads, Q, n))."""
        if hiddens.dim() != 2 or hiddens.shape[0] < 1 or hiddens.shape[1] != self.hidden_dim:
            raise ShapeMismatch(f"expected (n>=1, {self.hidden_dim}) hiddens, got {tuple(hiddens.shape)}")
        zm = self.linear(hiddens)
        h = self.heads
        dk = self.mapped_dim // h
        q = self.queries.view(-1, h, dk).transpose(0, 1)  # h, Q, dk
        kv = zm.view(-1, h, dk).transpose(0, 1)  # h, n, dk
        weights = torch.softmax(q @ kv.transpose(1, 2) / math.sqrt(dk), dim=-1)
        attended = (weights @ kv).transpose(0, 1).reshape(-1, self.mapped_dim)
        return attended, weights

    def forward(self, hiddens: torch.Tensor) -> torch.Tensor:
        attended, _ = self.attention(hiddens)
        return self.fc2(F.gelu(self.fc1(attended)))


def project(hiddens: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(hiddens)


def build_heads(cfg: CovtConfig, generator: torch.Generator | None = None) -> nn.ModuleDict:
    """One independent head per configured token group, sized from the expert dims."""
    heads = nn.ModuleDict()
    for g in cfg.token_schema.groups:
        if g.name == "dino":
            mapped, queries = cfg.dino_dim, cfg.patch_count
        else:
            mapped, queries = cfg.expert_channels, g.count
        heads[g.name] = ProjectionHead(TARGET_SPACES[g.name], cfg.hidden_dim, mapped, queries,
                                       cfg.projection_heads, generator)
    return heads
