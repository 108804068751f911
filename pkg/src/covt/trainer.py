"""Four-stage training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .alignment import total_loss
from .core import GROUP_NAMES, CovtConfig
from .datapipe import TrainingRecord, read_records, resolve_cache_root, RECORDS_FILE
from .errors import IoFailure, MissingExpertCache, NonFiniteLoss
from .experts import ExpertTargets, load_expert_cache
from .model import CovtModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


def stage_schedule(step: int, cfg: CovtConfig) -> int:
    bound = 0
    for stage, n in enumerate(cfg.stage_steps, 1):
        bound += n
        if step < bound:
            return stage
    return 4


def stage_boundaries(cfg: CovtConfig) -> list[int]:
    """Step index at which each stage starts."""
    return [int(x) for x in np.concatenate([[0], np.cumsum(cfg.stage_steps)[:-1]])]


def lr_multiplier(step: int, cfg: CovtConfig) -> float:
    """Linear warmup then cosine decay, restarted at every stage boundary."""
    stage = stage_schedule(step, cfg)
    length = cfg.stage_steps[stage - 1]
    local = step - stage_boundaries(cfg)[stage - 1]
    warm = math.ceil(cfg.warmup_ratio * length)
    if local < warm:
        return (local + 1) / warm
    if local >= length or length <= warm:
        return 0.0 if local >= length else 1.0
    return 0.5 * (1.0 + math.cos(math.pi * (local - warm) / (length - warm)))


@dataclass
class StepReport:
    step: int
    stage: int
    total: float
    ce: float
    parts: dict[str, float | None]
    grad_norm: float

    def to_json(self) -> dict:
        row = {"step": self.step, "stage": self.stage, "total": self.total, "ce": self.ce}
        row.update({g: self.parts.get(g) for g in GROUP_NAMES})
        row["grad_norm"] = self.grad_norm
        return row


@dataclass
class TrainState:
    step: int
    optimizer: torch.optim.Optimizer
    cfg: CovtConfig
    history: list[StepReport] = field(default_factory=list)

    @property
    def stage(self) -> int:
        return stage_schedule(self.step, self.cfg)


def make_optimizer(model: CovtModel) -> torch.optim.AdamW:
    cfg = model.cfg
    opt = torch.optim.AdamW(
        [
            {"params": model.lora_parameters(), "lr": cfg.lr_adapter, "base_lr": cfg.lr_adapter, "name": "adapters"},
            {"params": model.new_token_parameters(), "lr": cfg.lr_new_tokens, "base_lr": cfg.lr_new_tokens,
             "name": "new_tokens"},
            {"params": model.projection_parameters(), "lr": cfg.lr_projection, "base_lr": cfg.lr_projection,
             "name": "projection"},
        ],
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    return opt


class TargetStore:
    """Lazy, memoised access to the expert cache."""

    def __init__(self, root: Path, cfg: CovtConfig):
        self.root = Path(root)
        self.cfg = cfg
        self._cache: dict[str, tuple[np.ndarray, ExpertTargets]] = {}

    def get(self, image_ref: str) -> tuple[np.ndarray, ExpertTargets]:
        if image_ref not in self._cache:
            self._cache[image_ref] = load_expert_cache(self.root / image_ref, self.cfg)
        return self._cache[image_ref]


def _check(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLoss(name, float(value.detach()))


def compute_losses(model: CovtModel, batch: Sequence[TrainingRecord], store: TargetStore):
    """Teacher-forced CE over answer positions plus per-group head losses (batch means).

    Groups whose weight in the joint loss is zero are skipped and stay absent.
    """
    encoded = [model.encode_record(r) for r in batch]
    length = max(len(e.ids) for e in encoded)
    ids = torch.full((len(batch), length), model.vocab.pad_id, dtype=torch.long)
    target_mask = torch.zeros((len(batch), length), dtype=torch.bool)
    images = []
    for b, (rec, enc) in enumerate(zip(batch, encoded)):
        ids[b, : len(enc.ids)] = torch.tensor(enc.ids)
        target_mask[b, enc.answer_start - 1: len(enc.ids) - 1] = True
        images.append(store.get(rec.image_ref)[0])
    dtype = model.backbone.pos_emb.dtype
    logits, hid = model.backbone(ids, torch.as_tensor(np.stack(images), dtype=dtype))
    targets = ids[:, 1:][target_mask[:, :-1]]
    ce = torch.nn.functional.cross_entropy(logits[:, :-1][target_mask[:, :-1]], targets)
    per_group: dict[str, list[torch.Tensor]] = {}
    for b, (rec, enc) in enumerate(zip(batch, encoded)):
        expert = store.get(rec.image_ref)[1]
        for group, positions in enc.slots.items():
            if model.cfg.gamma == 0 or model.cfg.lambda_for(group) == 0:
                continue  # weight zero: the head is not part of the objective
            out = model.head_loss(group, hid[b, positions], expert)
            per_group.setdefault(group, []).append(out.loss)
    parts = {g: torch.stack(v).mean() for g, v in per_group.items()}
    return ce, parts


def train_step(model: CovtModel, batch: Sequence[TrainingRecord], state: TrainState, store: TargetStore) -> StepReport:
    cfg = model.cfg
    opt = state.optimizer
    stage = stage_schedule(state.step, cfg)
    opt.zero_grad(set_to_none=True)
    ce, parts = compute_losses(model, batch, store)
    _check("ce", ce)
    for g, v in parts.items():
        _check(g, v)
    total = total_loss(ce.double(), {g: v.double() for g, v in parts.items()}, cfg)
    _check("total", total)
    total.backward()
    trainable = [p for grp in opt.param_groups for p in grp["params"] if p.grad is not None]
    grad_norm = float(torch.sqrt(sum((p.grad.double() ** 2).sum() for p in trainable))) if trainable else 0.0
    if cfg.max_grad_norm > 0 and grad_norm > cfg.max_grad_norm:
        scale = cfg.max_grad_norm / grad_norm
        for p in trainable:
            p.grad.mul_(scale)
    mult = lr_multiplier(state.step, cfg)
    for grp in opt.param_groups:
        grp["lr"] = grp["base_lr"] * mult
    opt.step()
    state.step += 1
    report = StepReport(state.step, stage, float(total.detach()), float(ce.detach()),
                        {g: float(v.detach()) for g, v in parts.items()}, grad_norm)
    state.history.append(report)
    return report


def batch_for_step(records_by_stage: dict[int, list[TrainingRecord]], step: int, cfg: CovtConfig) -> list[TrainingRecord]:
    """Stateless batch draw: per-stage epochs of seeded permutations."""
    stage = stage_schedule(step, cfg)
    pool = records_by_stage.get(stage, [])
    if not pool:
        raise IoFailure(f"dataset has no stage-{stage} records")
    local = step - stage_boundaries(cfg)[stage - 1]
    out = []
    for k in range(local * cfg.batch_size, (local + 1) * cfg.batch_size):
        epoch, offset = divmod(k, len(pool))
        perm = np.random.default_rng([cfg.seed, stage, epoch]).permutation(len(pool))
        out.append(pool[int(perm[offset])])
    return out


@dataclass
class TrainResult:
    checkpoints: list[Path]
    metrics_path: Path
    reports: list[StepReport]
    model: CovtModel


def _save(model: CovtModel, state: TrainState, path: Path) -> Path:
    return save_checkpoint(model, path, {"step": state.step, "stage": stage_schedule(state.step, model.cfg)},
                           state.optimizer.state_dict())


def train(cfg: CovtConfig, dataset_dir: str | Path, out_dir: str | Path, cache_root: str | Path | None = None,
          resume_from: str | Path | None = None, max_steps: int | None = None,
          on_step: Callable[[StepReport], None] | None = None) -> TrainResult:
    torch.set_num_threads(1)
    dataset_dir = Path(dataset_dir)
    records_path = dataset_dir / RECORDS_FILE
    if not records_path.exists():
        raise MissingExpertCache(f"no dataset at {dataset_dir}")
    records = read_records(records_path)
    by_stage: dict[int, list[TrainingRecord]] = {}
    for r in records:
        by_stage.setdefault(r.stage, []).append(r)
    store = TargetStore(resolve_cache_root(dataset_dir, cache_root), cfg)

    if resume_from is not None:
        model, info = load_checkpoint(resume_from)
        state = TrainState(int(info["step"]), make_optimizer(model), model.cfg)
        if "optimizer" in info:
            state.optimizer.load_state_dict(info["optimizer"])
    else:
        model = CovtModel(cfg)
        state = TrainState(0, make_optimizer(model), cfg)
    cfg = model.cfg
    total_steps = sum(cfg.stage_steps) if max_steps is None else min(max_steps, sum(cfg.stage_steps))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    boundaries = set(stage_boundaries(cfg))
    checkpoints: list[Path] = []
    reports: list[StepReport] = []
    try:
        with open(metrics_path, "a" if resume_from else "w", encoding="utf-8", newline="\n") as fh:
            while state.step < total_steps:
                resumed_here = resume_from is not None and not reports
                if state.step in boundaries and not resumed_here:
                    checkpoints.append(_save(model, state, out / f"step{state.step:06d}"))
                batch = batch_for_step(by_stage, state.step, cfg)
                report = train_step(model, batch, state, store)
                reports.append(report)
                fh.write(json.dumps(report.to_json()) + "\n")
                if on_step:
                    on_step(report)
                log.debug("step %d stage %d total %.4f", report.step, report.stage, report.total)
        if state.step == sum(cfg.stage_steps):
            checkpoints.append(_save(model, state, out / "final"))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return TrainResult(checkpoints, metrics_path, reports, model)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


@torch.no_grad()
def seg_best_match_iou(model: CovtModel, records: Sequence[TrainingRecord], store: TargetStore,
                       n_samples: int = 8, threshold: float = 0.5) -> float:
    """Mean over samples of the mean, over expert masks, of the best IoU among decoded masks.

    Hidden states come from a teacher-forced pass over each sample's first
    record that carries the seg group.
    """
    seen: dict[str, TrainingRecord] = {}
    for rec in records:
        if "seg" in rec.groups_present and rec.image_ref not in seen:
            seen[rec.image_ref] = rec
        if len(seen) == n_samples:
            break
    scores = []
    for ref, rec in seen.items():
        image, expert = store.get(ref)
        enc = model.encode_record(rec)
        dtype = model.backbone.pos_emb.dtype
        _, hid = model.backbone(torch.tensor(enc.ids), torch.as_tensor(image, dtype=dtype))
        masks = model.decode_group("seg", hid[enc.slots["seg"]].numpy(), expert.tap_features) >= threshold
        scores.append(np.mean([max(mask_iou(m, gt.mask) for m in masks) for gt in expert.masks]))
    return float(np.mean(scores))
