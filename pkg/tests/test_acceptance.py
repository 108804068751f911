"""Acceptance checks; each prints one PASS/FAIL line (also repeated in the terminal summary)."""
import hashlib
import itertools
import math
import time

import numpy as np
import pytest
import torch

from covt.alignment import assignment_cost, depth_maps, dice_loss, focal_loss, hungarian_match, total_loss
from covt.cli import main
from covt.core import TokenSchema, validate_config
from covt.datapipe import RecordBase, build_dataset, format_stage, parse_record, read_records, sample_group_subset
from covt.experts import ToyMaskDecoder
from covt.model import CovtModel
from covt.trainer import TargetStore, seg_best_match_iou, train

from .conftest import TOY_CONFIG
from .fd import analytic_gradient, fd_gradient, head_losses, relative_error

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_1_hungarian_oracle():
    rng = np.random.default_rng(0)
    start, bad = time.perf_counter(), 0
    for n in range(2, 9):
        perms = np.array(list(itertools.permutations(range(n))))
        for _ in range(200):
            cost = rng.random((n, n))
            picked = cost[np.arange(n), perms]
            totals = picked[:, 0].copy()
            for i in range(1, n):  # row order, same float summation as the matcher's cost
                totals += picked[:, i]
            sigma = hungarian_match(cost)
            bad += assignment_cost(cost, sigma) != totals.min()
    elapsed = time.perf_counter() - start
    report(1, bad == 0 and elapsed < 60, f"{bad} mismatches over 1400 matrices in {elapsed:.1f}s")


def test_2_gradient_fidelity():
    start, worst = time.perf_counter(), 0.0
    for seed in range(10):
        fns, hiddens, _ = head_losses(seed)
        for group, fn in fns.items():
            x = hiddens[group]
            worst = max(worst, relative_error(analytic_gradient(fn, x), fd_gradient(fn, x)))
    elapsed = time.perf_counter() - start
    report(2, worst < 1e-4 and elapsed < 120, f"max relative error {worst:.2e} in {elapsed:.1f}s")


def test_3_loss_spot_values():
    dice = float(dice_loss(np.ones((2, 2)), np.array([[1.0, 1.0], [0.0, 0.0]])))
    focal = float(focal_loss(np.array([[0.5]]), np.array([[1.0]]), 2.0))
    total = total_loss(1.0, {g: 1.0 for g in ("seg", "depth", "edge", "dino")}, validate_config({"hidden_dim": 64, "image_size": 64}))
    ok = abs(dice - 1 / 3) <= 1e-6 and abs(focal - 0.25 * math.log(2)) <= 1e-9 and total == 5
    report(3, ok, f"dice={dice:.9f} focal={focal:.12f} total={total}")


def test_4_depth_simplex():
    rng = np.random.default_rng(4)
    worst, negative = 0.0, 0
    for _ in range(100):
        c = int(rng.integers(1, 9))
        h, w = (int(v) for v in rng.integers(1, 12, size=2))
        maps = depth_maps(torch.as_tensor(rng.normal(size=(4, c)) * 5),
                          [rng.normal(size=(c, h, w)) * 5 for _ in range(4)])
        worst = max(worst, float((maps.sum(dim=(1, 2)) - 1).abs().max()))
        negative += int((maps < 0).sum())
    report(4, worst <= 1e-5 and negative == 0, f"max |sum-1|={worst:.1e}, negative entries={negative}")


def test_5_grammar_round_trip():
    schema = TokenSchema()
    rng = np.random.default_rng(5)
    bad = 0
    for i in range(1000):
        stage = i % 4 + 1
        rec = format_stage(RecordBase(f"s{i}", f"s{i}", "What is nearest ?", "the disk"), stage, rng, schema)
        groups, answer = parse_record(rec, schema)
        expected = rec.answer if stage in (1, 2) else "the disk"
        bad += groups != rec.groups_present or (stage != 2 and answer.strip() != expected)
    k, n = len(schema.names), 10_000
    sizes = np.array([len(sample_group_subset(schema, rng)) for _ in range(n)])
    p = 1 / (k + 1)
    sigma = math.sqrt(n * p * (1 - p))
    worst_z = max(abs((sizes == s).sum() - n * p) / sigma for s in range(k + 1))
    report(5, bad == 0 and worst_z <= 3, f"{bad} disagreements; worst subset-size deviation {worst_z:.2f} sigma")


@pytest.fixture(scope="module")
def overfit(tmp_path_factory, toy_cfg):
    root = tmp_path_factory.mktemp("overfit")
    start = time.perf_counter()
    build_dataset(32, (1, 1, 1, 1), toy_cfg.seed, root / "data", toy_cfg, replicate=True)
    result = train(toy_cfg, root / "data", root / "run")
    iou = seg_best_match_iou(result.model, read_records(root / "data" / "records.jsonl"),
                             TargetStore(root / "data" / "cache", toy_cfg))
    return root, result, iou, time.perf_counter() - start


def test_6_overfit(overfit, toy_cfg):
    _, result, iou, elapsed = overfit
    assert (toy_cfg.hidden_dim, toy_cfg.layer_count, toy_cfg.stage_steps, toy_cfg.batch_size) == (64, 2, (20, 10, 10, 20), 4)
    first, last = result.reports[0].total, result.reports[-1].total
    ratio = last / first
    ok = ratio < 0.1 and iou >= 0.5 and elapsed < 900
    report(6, ok, f"loss {first:.3f} -> {last:.3f} (ratio {ratio:.4f}), seg IoU {iou:.3f}, {elapsed:.0f}s")


def test_7_frozen_base_and_identity(overfit, toy_cfg):
    _, result, _, _ = overfit
    base, adapted = CovtModel(toy_cfg, adapters=False), CovtModel(toy_cfg)
    ids = np.random.default_rng(7).integers(0, len(base.vocab), size=30).tolist()
    image = np.random.default_rng(8).random((toy_cfg.image_size,) * 2)
    with torch.no_grad():
        identical = torch.equal(base.backbone(ids, image)[0], adapted.backbone(ids, image)[0])
    after = result.model.backbone.base_parameters()
    moved = [n for n, p in adapted.backbone.base_parameters().items() if not torch.equal(p, after[n])]
    report(7, identical and not moved, f"identity at init={identical}, base tensors changed={len(moved)}")


def test_8_inference_purity(overfit):
    root, result, _, _ = overfit
    caches = sorted(p for p in (root / "data" / "cache").iterdir() if p.is_dir())[:20]
    ToyMaskDecoder.reset_counters()
    codes = [main(["infer", "--checkpoint", str(result.checkpoints[-1]), "--cache", str(c),
                   "--question", "How many shapes are there ?"]) for c in caches]
    calls = ToyMaskDecoder.invocations
    report(8, len(codes) == 20 and set(codes) == {0} and calls == 0,
           f"{len(codes)} inferences, {calls} decoder invocations")


def _digest(root, skip=()):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix not in skip:
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def _state_digest(model):
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode() + t.numpy().tobytes())
    return h.hexdigest()


def test_9_determinism(tmp_path, toy_cfg):
    data, trained, decoded = [], [], []
    for run in ("a", "b"):
        out = tmp_path / run
        main(["build-data", "--n", "8", "--replicate", "--config", str(TOY_CONFIG), "--out", str(out / "data")])
        data.append(_digest(out / "data"))
        result = train(toy_cfg, out / "data", out / "run")
        trained.append(((out / "run" / "metrics.jsonl").read_bytes(), _state_digest(result.model)))
        chain = out / "chain.json"
        main(["infer", "--checkpoint", str(out / "run" / "final"), "--cache", str(out / "data" / "cache" / "s00000"),
              "--question", "Which shape is nearest ?", "--save-chain", str(chain)])
        main(["decode", "--chain", str(chain), "--checkpoint", str(out / "run" / "final"),
              "--cache", str(out / "data" / "cache" / "s00000"), "--out", str(out / "dec")])
        decoded.append(_digest(out / "dec") if (out / "dec").exists() else "no-slots")
    same = [data[0] == data[1], trained[0] == trained[1], decoded[0] == decoded[1]]
    report(9, all(same), "identical build-data/train/decode: " + "/".join(str(s) for s in same))
