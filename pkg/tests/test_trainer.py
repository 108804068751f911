import json
import math

import pytest
import torch

from covt import trainer
from covt.alignment import total_loss
from covt.core import validate_config
from covt.datapipe import TrainingRecord, read_records
from covt.errors import MissingExpertCache, NonFiniteLoss
from covt.model import CovtModel, load_checkpoint
from covt.trainer import (TargetStore, TrainState, batch_for_step, lr_multiplier, make_optimizer, stage_schedule,
                          train, train_step)

FULL = validate_config({"hidden_dim": 64, "image_size": 64})


@pytest.mark.parametrize("step, stage", [(0, 1), (3999, 1), (4000, 2), (6999, 2), (7000, 3), (9999, 3),
                                         (10000, 4), (14999, 4), (10 ** 6, 4)])
def test_stage_schedule(step, stage):
    assert stage_schedule(step, FULL) == stage


def test_lr_schedule_restarts_each_stage():
    cfg = FULL.replace(stage_steps=(20, 10, 10, 20))
    mult = [lr_multiplier(s, cfg) for s in range(60)]
    assert mult[0] == 1.0 and mult[20] == 1.0 and mult[30] == 1.0 and mult[40] == 1.0
    assert all(0.0 <= m <= 1.0 for m in mult)
    assert all(mult[s] >= mult[s + 1] for s in range(1, 19))
    assert mult[19] == pytest.approx(0.5 * (1 + math.cos(math.pi * 18 / 19)))
    long = FULL
    assert lr_multiplier(0, long) == pytest.approx(1 / 200)  # warmup over 5% of 4000 steps
    assert lr_multiplier(199, long) == 1.0


def _state(model):
    return TrainState(0, make_optimizer(model), model.cfg)


def _batch(tiny_data, stage):
    return [r for r in read_records(tiny_data / "records.jsonl") if r.stage == stage][:2]


def test_empty_subset_batch_reports_ce_only(tiny_cfg, tiny_data):
    model = CovtModel(tiny_cfg)
    rec = _batch(tiny_data, 4)[0]
    empty = TrainingRecord(rec.sample_id, rec.image_ref, rec.question, "<think></think> yes", 4, ())
    report = train_step(model, [empty, empty], _state(model), TargetStore(tiny_data / "cache", tiny_cfg))
    assert report.parts == {} and report.total == report.ce


def test_gamma_zero_disconnects_heads(tiny_cfg, tiny_data):
    model = CovtModel(tiny_cfg.replace(gamma=0.0))
    store = TargetStore(tiny_data / "cache", model.cfg)
    ce, parts = trainer.compute_losses(model, _batch(tiny_data, 3), store)
    total_loss(ce, parts, model.cfg).backward()
    grads = [p.grad for p in model.projection_parameters()]
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def test_gradient_reaches_every_present_head(tiny_cfg, tiny_data):
    model = CovtModel(tiny_cfg)
    store = TargetStore(tiny_data / "cache", tiny_cfg)
    ce, parts = trainer.compute_losses(model, _batch(tiny_data, 3), store)
    assert set(parts) == {"seg", "depth", "edge", "dino"}
    total_loss(ce, parts, tiny_cfg).backward()
    for group, head in model.heads.items():
        norm = torch.sqrt(sum((p.grad.double() ** 2).sum() for p in head.parameters()))
        assert norm > 1e-12, group


def test_report_reproduces_joint_loss(tiny_cfg, tiny_data):
    cfg = tiny_cfg.replace(gamma=0.7, lambda_seg=2.0, lambda_edge=0.5)
    model = CovtModel(cfg)
    report = train_step(model, _batch(tiny_data, 3), _state(model), TargetStore(tiny_data / "cache", cfg))
    recomputed = report.ce + 0.7 * sum(cfg.lambda_for(g) * v for g, v in report.parts.items())
    assert abs(report.total - recomputed) <= 1e-6


def test_non_finite_loss_names_component(tiny_cfg, tiny_data, monkeypatch):
    model = CovtModel(tiny_cfg)
    real = trainer.compute_losses

    def poisoned(*args):
        ce, parts = real(*args)
        parts["depth"] = parts["depth"] * float("nan")
        return ce, parts

    monkeypatch.setattr(trainer, "compute_losses", poisoned)
    with pytest.raises(NonFiniteLoss) as err:
        train_step(model, _batch(tiny_data, 3), _state(model), TargetStore(tiny_data / "cache", tiny_cfg))
    assert "depth" in str(err.value)


def test_missing_cache(tiny_cfg, tiny_data, tmp_path):
    with pytest.raises(MissingExpertCache):
        train(tiny_cfg, tmp_path / "nowhere", tmp_path / "out")
    model = CovtModel(tiny_cfg)
    with pytest.raises(MissingExpertCache):
        train_step(model, _batch(tiny_data, 3), _state(model), TargetStore(tmp_path, tiny_cfg))


def test_batches_respect_stage(tiny_cfg, tiny_data):
    by_stage = {}
    for r in read_records(tiny_data / "records.jsonl"):
        by_stage.setdefault(r.stage, []).append(r)
    cfg = tiny_cfg.replace(stage_steps=(3, 5, 2, 7))
    for step in range(40):
        stage = stage_schedule(step, cfg)
        assert {r.stage for r in batch_for_step(by_stage, step, cfg)} == {stage}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_cfg, tiny_data):
    out = tmp_path_factory.mktemp("tiny_run")
    return train(tiny_cfg, tiny_data, out), out


def test_run_layout(tiny_run, tiny_cfg):
    result, out = tiny_run
    assert [p.name for p in result.checkpoints] == ["step000000", "step000002", "step000004", "step000006", "final"]
    rows = [json.loads(line) for line in result.metrics_path.read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(1, 9))
    assert [r["stage"] for r in rows] == [1, 1, 2, 2, 3, 3, 4, 4]
    assert set(rows[0]) == {"step", "stage", "total", "ce", "seg", "depth", "edge", "dino", "grad_norm"}
    for r in rows:
        parts = sum(tiny_cfg.lambda_for(g) * (r[g] or 0.0) for g in ("seg", "depth", "edge", "dino"))
        assert abs(r["total"] - (r["ce"] + tiny_cfg.gamma * parts)) <= 1e-6


def test_base_weights_frozen(tiny_run, tiny_cfg):
    result, _ = tiny_run
    fresh = CovtModel(tiny_cfg)
    after = result.model.backbone.base_parameters()
    assert all(torch.equal(p, after[n]) for n, p in fresh.backbone.base_parameters().items())
    moved = result.model.backbone.adapter_parameters()
    assert any(not torch.equal(p, moved[n]) for n, p in fresh.backbone.adapter_parameters().items())


def test_checkpoint_round_trip(tiny_run):
    result, out = tiny_run
    model, info = load_checkpoint(out / "final")
    assert info["step"] == 8
    for (n, a), (_, b) in zip(model.state_dict().items(), result.model.state_dict().items()):
        assert torch.equal(a, b), n


def test_resume_reproduces_next_report(tiny_run, tiny_cfg, tiny_data, tmp_path):
    result, out = tiny_run
    resumed = train(tiny_cfg, tiny_data, tmp_path, resume_from=out / "step000004")
    assert resumed.reports[0].step == 5
    assert [r.to_json() for r in resumed.reports] == [r.to_json() for r in result.reports[4:]]
