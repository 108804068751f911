"""Loss heads aligning visual-token hidden states with expert targets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import kernels
from .core import CovtConfig
from .errors import EmptyTargets, InvalidValue, NonSquare, ShapeMismatch

DICE_EPS = 1e-6
FOCAL_CLAMP = 1e-7


@dataclass
class AlignmentOutput:
    head: str
    loss: torch.Tensor
    reconstruction: torch.Tensor
    match: tuple[int, ...] | None = None
    pairs: list[tuple[int, int]] = field(default_factory=list)


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if like is None else x.to(like.dtype)
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def dice_loss(pred, gt, eps: float = DICE_EPS) -> torch.Tensor:
    pred = _t(pred)
    gt = _t(gt, pred)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{tuple(pred.shape)} vs {tuple(gt.shape)}")
    return 1.0 - 2.0 * (pred * gt).sum() / (pred.sum() + gt.sum() + eps)


def focal_loss(pred, gt, gamma_f: float = 2.0, symmetric: bool = False) -> torch.Tensor:
    """Pixel mean of ``-(1 - p)^gamma * gt * log p``; ``symmetric`` adds the negative-class term."""
    pred = _t(pred)
    gt = _t(gt, pred)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{tuple(pred.shape)} vs {tuple(gt.shape)}")
    p = pred.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    term = -((1.0 - p) ** gamma_f) * gt * torch.log(p)
    if symmetric:
        term = term - (p ** gamma_f) * (1.0 - gt) * torch.log(1.0 - p)
    return term.mean()


def assignment_cost(cost: np.ndarray, perm: Sequence[int]) -> float:
    """Row-ordered sum of ``cost[i, perm[i]]``."""
    total = 0.0
    for i, j in enumerate(perm):
        total += float(cost[i, j])
    return total


def hungarian_match(cost) -> tuple[int, ...]:
    """Minimum-cost permutation; among optimal ones, the lexicographically smallest."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise NonSquare(f"cost matrix has shape {c.shape}")
    if not np.isfinite(c).all():
        raise InvalidValue("cost", "entries must be finite")
    n = c.shape[0]
    if n == 0:
        return ()
    perm = [int(j) for j in kernels.linear_assignment(c)]
    best = assignment_cost(c, perm)
    tol = 1e-12 * n * (1.0 + float(np.abs(c).max()))
    for i in range(n - 1):
        prefix = assignment_cost(c[:i], perm[:i])
        free = sorted(perm[i:])
        rows = np.arange(i + 1, n)
        for j in free:
            if j >= perm[i]:
                break
            cols = [k for k in free if k != j]
            sub = kernels.linear_assignment(c[np.ix_(rows, cols)])
            tail = [cols[k] for k in sub]
            if prefix + c[i, j] + assignment_cost(c[i + 1:], tail) <= best + tol:
                perm[i:] = [j] + tail
                break
    return tuple(perm)


def seg_head_loss(seg_hiddens: torch.Tensor, dense_embedding, gt_masks, cfg: CovtConfig,
                  head: Callable, decoder: Callable) -> AlignmentOutput:
    """Decode one mask per projected prompt, Hungarian-match to targets, sum dice + alpha * focal."""
    gts = [np.asarray(getattr(m, "mask", m)) for m in gt_masks]
    if not gts:
        raise EmptyTargets("no target masks survived filtering")
    prompts = head(seg_hiddens)
    dense = _t(dense_embedding, prompts)
    pred = decoder(prompts, dense)
    q, h, w = pred.shape
    gt = _t(np.stack(gts), pred)
    k = gt.shape[0]
    if gt.shape[1:] != (h, w):
        raise ShapeMismatch(f"masks {tuple(gt.shape[1:])} vs predictions {(h, w)}")
    if k > q:
        raise ShapeMismatch(f"{k} target masks for {q} predictions")
    with torch.no_grad():
        c = kernels.pairwise_mask_cost(
            pred.detach().reshape(q, -1).cpu().numpy(), gt.reshape(k, -1).cpu().numpy(),
            cfg.match_alpha, cfg.focal_gamma, DICE_EPS, FOCAL_CLAMP, cfg.focal_symmetric,
        )
    # constant padding columns leave the optimal real assignment unchanged
    padded = np.zeros((q, q))
    padded[:, :k] = c
    sigma = hungarian_match(padded)
    pairs = [(i, j) for i, j in enumerate(sigma) if j < k]
    loss = pred.new_zeros(())
    for i, j in pairs:
        loss = loss + dice_loss(pred[i], gt[j]) + cfg.match_alpha * focal_loss(
            pred[i], gt[j], cfg.focal_gamma, cfg.focal_symmetric)
    return AlignmentOutput("seg", loss, pred, sigma, pairs)


def _stack_features(features, like: torch.Tensor, count: int, channels: int) -> torch.Tensor:
    feats = torch.stack([_t(f, like) for f in features])
    if feats.dim() != 4 or feats.shape[0] != count or feats.shape[1] != channels:
        raise ShapeMismatch(f"expected {count} feature maps with {channels} channels, got {tuple(feats.shape)}")
    return feats


def depth_maps(tokens: torch.Tensor, features) -> torch.Tensor:
    """Per-token depth maps: softmax over pixels of token . feature (each map sums to 1)."""
    feats = _stack_features(features, tokens, tokens.shape[0], tokens.shape[1])
    n, c, h, w = feats.shape
    logits = torch.einsum("nc,nck->nk", tokens, feats.reshape(n, c, h * w))
    return torch.softmax(logits, dim=-1).reshape(n, h, w)


def depth_head_loss(depth_hiddens: torch.Tensor, features, gt_depth, head: Callable) -> AlignmentOutput:
    tokens = head(depth_hiddens)
    maps = depth_maps(tokens, features)
    pred = maps.mean(dim=0)
    gt = _t(gt_depth, pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"depth target {tuple(gt.shape)} vs {tuple(pred.shape)}")
    target = gt / gt.sum()
    return AlignmentOutput("depth", (pred - target).abs().sum(), pred)


def edge_maps(tokens: torch.Tensor, features) -> torch.Tensor:
    feats = _stack_features(features, tokens, tokens.shape[0], tokens.shape[1])
    return torch.einsum("nc,nchw->nhw", tokens, feats)


def edge_head_loss(edge_hiddens: torch.Tensor, features, gt_edge, head: Callable) -> AlignmentOutput:
    pred = torch.sigmoid(edge_maps(head(edge_hiddens), features).mean(dim=0))
    gt = _t(gt_edge, pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"edge target {tuple(gt.shape)} vs {tuple(pred.shape)}")
    return AlignmentOutput("edge", (pred - gt).abs().mean(), pred)


def dino_head_loss(dino_hiddens: torch.Tensor, gt_features, head: Callable) -> AlignmentOutput:
    grid = head(dino_hiddens)
    gt = _t(gt_features, grid)
    if gt.shape != grid.shape:
        raise ShapeMismatch(f"feature grid {tuple(grid.shape)} vs target {tuple(gt.shape)}")
    return AlignmentOutput("dino", ((grid - gt) ** 2).mean(), grid)


def total_loss(ce, parts: Mapping[str, object], cfg: CovtConfig):
    """ce + gamma * sum(lambda_g * part_g); missing or None parts count as zero."""
    visual = 0.0
    for group in ("seg", "depth", "edge", "dino"):
        part = parts.get(group)
        if part is not None:
            visual = visual + cfg.lambda_for(group) * part
    return ce + cfg.gamma * visual
