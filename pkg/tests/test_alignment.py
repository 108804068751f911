import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from covt import alignment
from covt.alignment import (depth_head_loss, depth_maps, dice_loss, dino_head_loss, edge_head_loss, edge_maps,
                            focal_loss, hungarian_match, seg_head_loss, total_loss)
from covt.core import validate_config
from covt.errors import EmptyTargets, NonSquare, ShapeMismatch

from .fd import analytic_gradient, fd_gradient, head_losses, relative_error

CFG = validate_config({"hidden_dim": 16, "image_size": 8, "patch_size": 4})


def identity(x):
    return x


def brute_force(cost):
    n = cost.shape[0]
    best, arg = math.inf, None
    for perm in itertools.permutations(range(n)):  # lexicographic order
        c = sum(cost[i, perm[i]] for i in range(n))
        if c < best:
            best, arg = c, perm
    return best, arg


# -- dice / focal -------------------------------------------------------------

def test_dice_spot_values():
    ones = np.ones((4, 4))
    assert abs(float(dice_loss(ones, ones))) < 1e-6
    a = np.zeros((4, 4)); a[:2] = 1
    assert float(dice_loss(a, 1 - a)) == pytest.approx(1.0, abs=1e-6)
    top = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert float(dice_loss(np.ones((2, 2)), top)) == pytest.approx(1 / 3, abs=1e-6)
    with pytest.raises(ShapeMismatch):
        dice_loss(np.ones((2, 2)), np.ones((2, 3)))


def test_focal_spot_values():
    rng = np.random.default_rng(0)
    assert float(focal_loss(rng.random((5, 5)), np.zeros((5, 5)))) == 0.0
    assert float(focal_loss(np.full((3, 3), 1 - 1e-7), np.ones((3, 3)))) < 1e-12
    assert float(focal_loss(np.array([[0.5]]), np.array([[1.0]]), 2.0)) == pytest.approx(0.25 * math.log(2), abs=1e-9)
    with pytest.raises(ShapeMismatch):
        focal_loss(np.ones(3), np.ones(4))


def test_focal_symmetric_switch_adds_negative_term():
    pred, gt = np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])
    one_sided = float(focal_loss(pred, gt))
    assert float(focal_loss(pred, gt, symmetric=True)) == pytest.approx(2 * one_sided)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 40))
def test_dice_pixel_permutation_symmetry(seed, n):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random(n), (rng.random(n) < 0.5).astype(float)
    perm = rng.permutation(n)
    assert float(dice_loss(pred, gt)) == pytest.approx(float(dice_loss(pred[perm], gt[perm])), abs=1e-12)


# -- matching -----------------------------------------------------------------

def test_hungarian_examples():
    c = np.ones((4, 4)) - np.eye(4)
    assert hungarian_match(c) == (0, 1, 2, 3)
    assert hungarian_match(np.array([[1.0, 2.0], [3.0, 0.0]])) == (0, 1)
    cost = np.random.default_rng(7).random((8, 8))
    best, arg = brute_force(cost)
    sigma = hungarian_match(cost)
    assert alignment.assignment_cost(cost, sigma) == best
    assert sigma == arg


def test_hungarian_errors():
    with pytest.raises(NonSquare):
        hungarian_match(np.ones((2, 3)))


def test_hungarian_tie_break_is_lexicographic():
    assert hungarian_match(np.zeros((4, 4))) == (0, 1, 2, 3)
    c = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    assert hungarian_match(c) == (0, 1, 2)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 6), levels=st.sampled_from([3, 1000]))
def test_hungarian_matches_brute_force(seed, n, levels):
    cost = np.random.default_rng(seed).integers(0, levels, size=(n, n)).astype(float)
    best, arg = brute_force(cost)
    sigma = hungarian_match(cost)
    assert alignment.assignment_cost(cost, sigma) == best
    assert sigma == arg


# -- seg ----------------------------------------------------------------------

def _gt_masks(k, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.random((size, size)) < 0.4).astype(np.uint8) for _ in range(k)]


def test_seg_recovers_shuffle():
    gts = _gt_masks(8)
    shuffle = np.random.default_rng(1).permutation(8)
    rigged = lambda prompts, dense: torch.as_tensor(np.stack([gts[j] for j in shuffle]), dtype=torch.float64)
    out = seg_head_loss(torch.zeros(8, 16), np.zeros((4, 8, 8)), gts, CFG, identity, rigged)
    assert float(out.loss) < 8 * 2e-6
    assert out.match == tuple(int(j) for j in shuffle)


def test_seg_padding_counts_real_masks_only():
    gts = _gt_masks(3)
    pred = torch.as_tensor(np.random.default_rng(2).random((8, 8, 8)))
    out = seg_head_loss(torch.zeros(8, 16), np.zeros((4, 8, 8)), gts, CFG, identity, lambda p, d: pred)
    assert len(out.pairs) == 3
    expected = sum(float(dice_loss(pred[i], gts[j]) + focal_loss(pred[i], gts[j])) for i, j in out.pairs)
    assert float(out.loss) == pytest.approx(expected, rel=1e-12)


def test_seg_loss_equals_best_injection():
    gts = _gt_masks(2, seed=4)
    pred = torch.as_tensor(np.random.default_rng(5).random((8, 8, 8)))
    pair = lambda i, j: float(dice_loss(pred[i], gts[j]) + focal_loss(pred[i], gts[j]))
    oracle = min(pair(a, 0) + pair(b, 1) for a in range(8) for b in range(8) if a != b)
    out = seg_head_loss(torch.zeros(8, 16), np.zeros((4, 8, 8)), gts, CFG, identity, lambda p, d: pred)
    assert float(out.loss) == pytest.approx(oracle, rel=1e-12)


def test_seg_empty_targets():
    with pytest.raises(EmptyTargets):
        seg_head_loss(torch.zeros(8, 16), np.zeros((4, 8, 8)), [], CFG, identity, lambda p, d: p)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k=st.integers(1, 8))
def test_seg_invariant_to_target_order(seed, k):
    rng = np.random.default_rng(seed)
    gts = _gt_masks(k, seed=seed)
    pred = torch.as_tensor(rng.random((8, 8, 8)))
    perm = rng.permutation(k)
    dec = lambda p, d: pred
    a = seg_head_loss(torch.zeros(8, 16), np.zeros((4, 8, 8)), gts, CFG, identity, dec)
    b = seg_head_loss(torch.zeros(8, 16), np.zeros((4, 8, 8)), [gts[j] for j in perm], CFG, identity, dec)
    assert float(a.loss) == pytest.approx(float(b.loss), abs=1e-9)
    inverse = np.argsort(perm)
    assert {(i, int(inverse[j])) for i, j in a.pairs} == set(b.pairs)


# -- depth / edge / dino ------------------------------------------------------

def test_depth_constant_features_give_uniform_map():
    feats = [np.ones((3, 4, 5))] * 4
    maps = depth_maps(torch.randn(4, 3, dtype=torch.float64), feats)
    assert torch.allclose(maps, torch.full((4, 4, 5), 1 / 20, dtype=torch.float64))


def test_depth_scalar_oracle():
    token = np.array([[1.0, -2.0]] * 4)
    feat = np.array([[[0.5, 1.0], [0.0, -1.0]], [[2.0, 0.0], [1.0, 0.5]]])  # 2 x 2 x 2
    logits = [token[0] @ feat[:, y, x] for y in range(2) for x in range(2)]
    z = sum(math.exp(v) for v in logits)
    expected = np.array([math.exp(v) / z for v in logits]).reshape(2, 2)
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = depth_head_loss(torch.as_tensor(token), [feat] * 4, gt, identity)
    assert np.allclose(out.reconstruction.numpy(), expected, atol=1e-15)
    assert float(out.loss) == pytest.approx(np.abs(expected - gt / 10).sum(), rel=1e-12)


def test_depth_shape_errors():
    with pytest.raises(ShapeMismatch):
        depth_maps(torch.zeros(4, 3), [np.ones((2, 4, 4))] * 4)
    with pytest.raises(ShapeMismatch):
        depth_head_loss(torch.zeros(4, 3), [np.ones((3, 4, 4))] * 4, np.ones((5, 5)), identity)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_depth_maps_are_distributions(seed):
    rng = np.random.default_rng(seed)
    maps = depth_maps(torch.as_tensor(rng.normal(size=(4, 6)) * 3), [rng.normal(size=(6, 5, 7)) for _ in range(4)])
    assert torch.all(maps >= 0)
    assert torch.allclose(maps.sum(dim=(1, 2)), torch.ones(4, dtype=torch.float64), atol=1e-5)


def test_edge_zero_kernel_and_selection():
    feats = [np.random.default_rng(i).normal(size=(3, 4, 4)) for i in range(4)]
    out = edge_head_loss(torch.zeros(4, 3, dtype=torch.float64), feats, np.zeros((4, 4)), identity)
    assert torch.all(out.reconstruction == 0.5)
    select = torch.zeros(4, 3, dtype=torch.float64)
    select[:, 1] = 1
    assert np.array_equal(edge_maps(select, feats).numpy(), np.stack([f[1] for f in feats]))


def test_edge_dot_product_oracle():
    rng = np.random.default_rng(9)
    feats = [rng.normal(size=(3, 4, 4)) for _ in range(4)]
    tokens = rng.normal(size=(4, 3))
    gt = rng.random((4, 4))
    pre = np.zeros((4, 4))
    for i in range(4):
        for y in range(4):
            for x in range(4):
                pre[y, x] += sum(tokens[i, c] * feats[i][c, y, x] for c in range(3)) / 4
    expected = 1 / (1 + np.exp(-pre))
    out = edge_head_loss(torch.as_tensor(tokens), feats, gt, identity)
    assert np.allclose(out.reconstruction.numpy(), expected, atol=1e-14)
    assert float(out.loss) == pytest.approx(np.abs(expected - gt).mean(), rel=1e-12)


def test_dino_spot_values():
    gt = np.random.default_rng(0).normal(size=(2, 3))
    assert float(dino_head_loss(torch.zeros(4, 5), gt, lambda h: torch.as_tensor(gt)).loss) == 0.0
    ones = lambda h: torch.ones(2, 3, dtype=torch.float64)
    assert float(dino_head_loss(torch.zeros(4, 5), np.zeros((2, 3)), ones).loss) == 1.0
    grid = np.array([[0.5, -1.0, 2.0], [0.0, 1.5, -0.5]])
    expected = sum((grid[p, d] - gt[p, d]) ** 2 for p in range(2) for d in range(3)) / 6
    out = dino_head_loss(torch.zeros(4, 5), gt, lambda h: torch.as_tensor(grid))
    assert float(out.loss) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ShapeMismatch):
        dino_head_loss(torch.zeros(4, 5), np.zeros((3, 3)), ones)


# -- joint loss ---------------------------------------------------------------

def test_total_loss_examples():
    ones = {g: 1.0 for g in ("seg", "depth", "edge", "dino")}
    assert total_loss(1.0, ones, CFG) == 5.0
    assert total_loss(0.7, ones, CFG.replace(gamma=0)) == 0.7
    cfg = CFG.replace(lambda_seg=1, lambda_depth=2, lambda_edge=0, lambda_dino=1)
    parts = {"seg": 0.5, "depth": 0.25, "edge": 9.0, "dino": 0.1}
    assert total_loss(0.3, parts, cfg) == pytest.approx(1.4, abs=1e-15)
    assert total_loss(0.3, {"seg": None}, CFG) == 0.3


@settings(max_examples=40, deadline=None)
@given(gamma=st.floats(0, 5), lam=st.floats(0, 5), group=st.sampled_from(["seg", "depth", "edge", "dino"]),
       a=st.floats(-10, 10), b=st.floats(-10, 10))
def test_total_loss_slope(gamma, lam, group, a, b):
    assume(abs(b - a) > 0.5)
    cfg = CFG.replace(gamma=gamma, **{f"lambda_{group}": lam})
    base = {"seg": 0.3, "depth": 0.2, "edge": 0.1, "dino": 0.4}
    la = total_loss(1.0, {**base, group: a}, cfg)
    lb = total_loss(1.0, {**base, group: b}, cfg)
    assert (lb - la) / (b - a) == pytest.approx(gamma * lam, rel=1e-9, abs=1e-9)


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("group", ["seg", "depth", "edge", "dino"])
def test_head_gradients_match_finite_differences(group):
    fns, hiddens, _ = head_losses(seed=3)
    fn, x = fns[group], hiddens[group]
    assert float(fn(x).detach()) >= 0
    assert relative_error(analytic_gradient(fn, x), fd_gradient(fn, x)) < 1e-4
