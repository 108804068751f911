"""The assembled model: adapted backbone + projection heads, plus checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import alignment
from .backbone import NEW_TOKEN_PARAMS, ToyBackbone, Vocab, apply_low_rank_adapters, is_trainable_name
from .core import CovtConfig, load_config, save_config
from .datapipe import TrainingRecord
from .errors import IoFailure, MissingExpertArtifacts, ShapeMismatch
from .experts import ExpertTargets, ToyMaskDecoder
from .projection import build_heads

CHECKPOINT_FILES = {"base": "base.pt", "adapters": "adapters.pt", "projection": "projection.pt"}


@dataclass
class EncodedRecord:
    ids: list[int]
    answer_start: int  # index of the first answer token
    slots: dict[str, list[int]]  # group -> positions ordered by index_in_group


class CovtModel(nn.Module):
    def __init__(self, cfg: CovtConfig, adapters: bool = True):
        super().__init__()
        self.cfg = cfg
        self.vocab = Vocab(cfg.token_schema, cfg.base_vocab)
        self.backbone = ToyBackbone(cfg, self.vocab)
        if adapters:
            apply_low_rank_adapters(self.backbone, cfg.adapter_rank, cfg.adapter_alpha)
        self.heads = build_heads(cfg, torch.Generator().manual_seed(cfg.seed + 1))
        self._decoder: ToyMaskDecoder | None = None

    @property
    def mask_decoder(self) -> ToyMaskDecoder:
        if self._decoder is None:
            self._decoder = ToyMaskDecoder()
        return self._decoder

    def adapter_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.adapter_parameters().values())

    def lora_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.backbone.adapter_parameters().items() if n not in NEW_TOKEN_PARAMS]

    def new_token_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.backbone.adapter_parameters().items() if n in NEW_TOKEN_PARAMS]

    def projection_parameters(self) -> list[nn.Parameter]:
        return list(self.heads.parameters())

    # -- sequences ---------------------------------------------------------

    def encode_record(self, record: TrainingRecord) -> EncodedRecord:
        prompt = [self.vocab.bos_id] + self.vocab.encode(record.question)
        ids = prompt + self.vocab.encode(record.answer) + [self.vocab.eos_id]
        return EncodedRecord(ids, len(prompt), self.slot_positions(ids))

    def encode_prompt(self, question: str) -> list[int]:
        return [self.vocab.bos_id] + self.vocab.encode(question)

    def slot_positions(self, ids) -> dict[str, list[int]]:
        found: dict[str, list[tuple[int, int]]] = {}
        for pos, tok in enumerate(ids):
            slot = self.vocab.id_to_slot.get(int(tok))
            if slot is not None:
                found.setdefault(slot[0], []).append((slot[1], pos))
        return {g: [p for _, p in sorted(v)] for g, v in found.items()}

    # -- heads -------------------------------------------------------------

    def head_loss(self, group: str, hiddens: torch.Tensor, targets: ExpertTargets) -> alignment.AlignmentOutput:
        head = self.heads[group]
        if group == "seg":
            return alignment.seg_head_loss(hiddens, targets.tap_features["seg"][0], targets.masks, self.cfg,
                                           head, self.mask_decoder)
        if group == "depth":
            return alignment.depth_head_loss(hiddens, targets.tap_features["depth"], targets.depth, head)
        if group == "edge":
            return alignment.edge_head_loss(hiddens, targets.tap_features["edge"], targets.edge, head)
        return alignment.dino_head_loss(hiddens, targets.patch_features, head)

    @torch.no_grad()
    def decode_group(self, group: str, hiddens, features: dict[str, list[np.ndarray]] | None) -> np.ndarray:
        """Reconstruction only: masks (Q,H,W), depth (H,W), edge (H,W) or feature grid (P,d)."""
        h = torch.as_tensor(np.asarray(hiddens), dtype=self.backbone.pos_emb.dtype)
        out = self.heads[group](h)
        if group == "dino":
            return out.numpy()
        if features is None or group not in features:
            raise MissingExpertArtifacts(f"{group} decoding needs expert features")
        if group == "seg":
            dense = torch.as_tensor(features["seg"][0], dtype=out.dtype)
            return self.mask_decoder(out, dense).numpy()
        if group == "depth":
            return alignment.depth_maps(out, features["depth"]).mean(dim=0).numpy()
        return torch.sigmoid(alignment.edge_maps(out, features["edge"]).mean(dim=0)).numpy()


# -- checkpoints -------------------------------------------------------------

def _split_state(model: CovtModel) -> dict[str, dict[str, torch.Tensor]]:
    bb = model.backbone.state_dict()
    adapters = {k: v for k, v in bb.items() if is_trainable_name(k)}
    base = {k: v for k, v in bb.items() if k not in adapters}
    return {"base": base, "adapters": adapters, "projection": model.heads.state_dict()}


def save_checkpoint(model: CovtModel, directory: str | Path, extra: dict | None = None,
                    optimizer_state: dict | None = None) -> Path:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        parts = _split_state(model)
        manifest = {"files": CHECKPOINT_FILES, "shapes": {}}
        for key, state in parts.items():
            state = {k: v.detach().clone().contiguous() for k, v in state.items()}
            torch.save(state, d / CHECKPOINT_FILES[key])
            manifest["shapes"][key] = {k: list(v.shape) for k, v in state.items()}
        if optimizer_state is not None:
            torch.save(optimizer_state, d / "optimizer.pt")
        if extra is not None:
            manifest["state"] = extra
        save_config(model.cfg, d / "config.cfg")
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return d


def load_checkpoint(directory: str | Path) -> tuple[CovtModel, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        cfg = load_config(d / "config.cfg")
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read checkpoint {d}: {exc}") from exc
    model = CovtModel(cfg)
    expected = {k: {n: list(t.shape) for n, t in s.items()} for k, s in _split_state(model).items()}
    for key, shapes in expected.items():
        if manifest["shapes"].get(key) != shapes:
            raise ShapeMismatch(f"checkpoint {key} shapes differ from the configured model")
    try:
        state = {}
        for key in ("base", "adapters"):
            state.update(torch.load(d / CHECKPOINT_FILES[key], weights_only=True))
        model.backbone.load_state_dict(state)
        model.heads.load_state_dict(torch.load(d / CHECKPOINT_FILES["projection"], weights_only=True))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    info = dict(manifest.get("state", {}))
    opt_path = d / "optimizer.pt"
    if opt_path.exists():
        info["optimizer"] = torch.load(opt_path, weights_only=True)
    return model, info
