"""Central finite differences and the head fixtures shared by the gradient tests."""
import numpy as np
import torch

from covt import alignment
from covt.core import validate_config
from covt.experts import ToyMaskDecoder, filter_masks, random_scene, render_scene
from covt.projection import build_heads

SMALL = validate_config({"hidden_dim": 12, "image_size": 16, "patch_size": 4, "expert_channels": 6, "dino_dim": 5})


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@torch.no_grad()
def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros(x.numel())
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + eps
        hi = float(fn(flat.reshape(x.shape)))
        flat[i] = old - eps
        lo = float(fn(flat.reshape(x.shape)))
        flat[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def analytic_gradient(fn, x: torch.Tensor) -> np.ndarray:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g.numpy()


def head_losses(seed: int, cfg=SMALL):
    """Per-group closures hidden -> loss, in double precision, on a random toy scene."""
    heads = build_heads(cfg, torch.Generator().manual_seed(seed)).double()
    rng = np.random.default_rng(seed)
    _, t = render_scene(random_scene(rng, cfg), cfg)
    masks = filter_masks(t.masks, cfg.image_size ** 2)
    decoder = ToyMaskDecoder(gain=3.0)  # moderate gain keeps the finite-difference step in the smooth regime
    fns = {
        "seg": lambda h: alignment.seg_head_loss(h, t.tap_features["seg"][0], masks, cfg, heads["seg"], decoder).loss,
        "depth": lambda h: alignment.depth_head_loss(h, t.tap_features["depth"], t.depth, heads["depth"]).loss,
        "edge": lambda h: alignment.edge_head_loss(h, t.tap_features["edge"], t.edge, heads["edge"]).loss,
        "dino": lambda h: alignment.dino_head_loss(h, t.patch_features, heads["dino"]).loss,
    }
    hiddens = {g.name: torch.as_tensor(rng.normal(size=(g.count, cfg.hidden_dim))) for g in cfg.token_schema.groups}
    return fns, hiddens, heads
