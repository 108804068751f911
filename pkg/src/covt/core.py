"""Shared domain types, configuration and validation."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import InvalidValue, MissingField, ShapeMismatch

GROUP_NAMES = ("seg", "depth", "edge", "dino")


@dataclass(frozen=True)
class TokenGroup:
    name: str
    count: int
    prefix: str


@dataclass(frozen=True)
class TokenSchema:
    """Ordered visual-token groups; literals are ``<prefix_i>``."""

    groups: tuple[TokenGroup, ...] = (
        TokenGroup("seg", 8, "seg"),
        TokenGroup("depth", 4, "depth"),
        TokenGroup("edge", 4, "edge"),
        TokenGroup("dino", 4, "dino"),
    )

    def __post_init__(self):
        names = [g.name for g in self.groups]
        prefixes = [g.prefix for g in self.groups]
        if len(set(names)) != len(names):
            raise InvalidValue("token_schema", "duplicate group name")
        if len(set(prefixes)) != len(prefixes):
            raise InvalidValue("token_schema", "duplicate literal prefix")
        for g in self.groups:
            if g.name not in GROUP_NAMES:
                raise InvalidValue("token_schema", f"unknown group {g.name!r}")
            if not isinstance(g.count, int) or g.count <= 0:
                raise InvalidValue("token_schema", f"count for {g.name} must be positive")
            if not g.prefix or any(c in g.prefix for c in "<>_ \t"):
                raise InvalidValue("token_schema", f"bad prefix {g.prefix!r}")

    @property
    def total_budget(self) -> int:
        return sum(g.count for g in self.groups)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.groups)

    def group(self, name: str) -> TokenGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def count(self, name: str) -> int:
        return self.group(name).count

    def literal(self, name: str, index: int) -> str:
        g = self.group(name)
        if not 0 <= index < g.count:
            raise IndexError(f"{name} index {index} outside [0, {g.count})")
        return f"<{g.prefix}_{index}>"

    def block(self, name: str) -> list[str]:
        return [self.literal(name, i) for i in range(self.count(name))]

    def literals(self) -> list[str]:
        """All literals in group order, then index order."""
        return [lit for g in self.groups for lit in self.block(g.name)]

    def lookup(self) -> dict[str, tuple[str, int]]:
        """Map literal -> (group, index_in_group)."""
        return {self.literal(g.name, i): (g.name, i) for g in self.groups for i in range(g.count)}

    def to_text(self) -> str:
        parts = []
        for g in self.groups:
            parts.append(f"{g.name}:{g.count}" if g.prefix == g.name else f"{g.name}:{g.count}:{g.prefix}")
        return ",".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "TokenSchema":
        groups = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            bits = item.split(":")
            if len(bits) not in (2, 3):
                raise InvalidValue("token_schema", f"cannot parse {item!r}")
            try:
                count = int(bits[1])
            except ValueError:
                raise InvalidValue("token_schema", f"non-integer count in {item!r}") from None
            groups.append(TokenGroup(bits[0], count, bits[2] if len(bits) == 3 else bits[0]))
        if not groups:
            raise InvalidValue("token_schema", "no groups")
        return cls(tuple(groups))


@dataclass(frozen=True)
class CovtConfig:
    hidden_dim: int
    image_size: int
    token_schema: TokenSchema = field(default_factory=TokenSchema)
    gamma: float = 1.0
    lambda_seg: float = 1.0
    lambda_depth: float = 1.0
    lambda_edge: float = 1.0
    lambda_dino: float = 1.0
    focal_gamma: float = 2.0
    focal_symmetric: bool = False
    match_alpha: float = 1.0
    adapter_rank: int = 16
    adapter_alpha: float = 32.0
    lr_adapter: float = 5e-5
    lr_projection: float = 1e-5
    lr_new_tokens: float = 5e-5  # embedding/output rows of the visual-token literals
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_ratio: float = 0.05
    max_grad_norm: float = 0.0  # 0 disables clipping
    stage_steps: tuple[int, int, int, int] = (4000, 3000, 3000, 5000)
    batch_size: int = 4
    seed: int = 0
    # toy backbone / expert geometry
    layer_count: int = 2
    head_count: int = 4
    patch_size: int = 8
    base_vocab: int = 512
    max_text_len: int = 96
    projection_heads: int = 1
    expert_channels: int = 16
    dino_dim: int = 16
    min_mask_area_frac: float = 0.001
    min_mask_stability: float = 0.5

    @property
    def patch_count(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def lambda_for(self, group: str) -> float:
        return getattr(self, f"lambda_{group}")

    def replace(self, **changes: Any) -> "CovtConfig":
        raw = to_raw(self)
        raw.update(changes)
        return validate_config(raw)


_FIELDS = {f.name: f for f in dataclasses.fields(CovtConfig)}
_REQUIRED = ("hidden_dim", "image_size")
_POSITIVE_INT = {
    "hidden_dim", "image_size", "adapter_rank", "batch_size", "layer_count", "head_count",
    "patch_size", "base_vocab", "max_text_len", "projection_heads", "expert_channels", "dino_dim",
}
_NONNEG_REAL = {
    "gamma", "lambda_seg", "lambda_depth", "lambda_edge", "lambda_dino", "focal_gamma",
    "match_alpha", "weight_decay", "warmup_ratio", "max_grad_norm", "min_mask_area_frac", "min_mask_stability",
}
_POSITIVE_REAL = {"adapter_alpha", "lr_adapter", "lr_projection", "lr_new_tokens"}


def _as_int(key: str, value: Any) -> int:
    if isinstance(value, bool):
        raise InvalidValue(key, "expected integer")
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value.strip())
        except ValueError:
            pass
    raise InvalidValue(key, f"expected integer, got {value!r}")


def _as_float(key: str, value: Any) -> float:
    if isinstance(value, bool):
        raise InvalidValue(key, "expected number")
    try:
        out = float(value.strip() if isinstance(value, str) else value)
    except (TypeError, ValueError):
        raise InvalidValue(key, f"expected number, got {value!r}") from None
    if not math.isfinite(out):
        raise InvalidValue(key, "must be finite")
    return out


def _as_bool(key: str, value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "1", "yes", "false", "0", "no"):
        return value.strip().lower() in ("true", "1", "yes")
    if isinstance(value, int) and value in (0, 1):
        return bool(value)
    raise InvalidValue(key, f"expected boolean, got {value!r}")


def validate_config(raw: Mapping[str, Any]) -> CovtConfig:
    """Build a :class:`CovtConfig` from a loose key/value map.

    Values may be strings (as read from a config file) or native types.
    Unknown keys are rejected so typos fail loudly.
    """
    for key in _REQUIRED:
        if key not in raw:
            raise MissingField(key)
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise InvalidValue(key, "unknown config key")
        if key == "token_schema":
            if isinstance(value, TokenSchema):
                kwargs[key] = value
            elif isinstance(value, str):
                kwargs[key] = TokenSchema.from_text(value)
            else:
                raise InvalidValue(key, "expected TokenSchema or text")
        elif key == "stage_steps":
            items = value.split(",") if isinstance(value, str) else list(value)
            if len(items) != 4:
                raise InvalidValue(key, "need exactly four stage step counts")
            steps = tuple(_as_int(key, v) for v in items)
            if any(s <= 0 for s in steps):
                raise InvalidValue(key, "stage steps must be positive")
            kwargs[key] = steps
        elif key == "focal_symmetric":
            kwargs[key] = _as_bool(key, value)
        elif key == "seed":
            kwargs[key] = _as_int(key, value)
        elif key in _POSITIVE_INT:
            v = _as_int(key, value)
            if v <= 0:
                raise InvalidValue(key, "must be a positive integer")
            kwargs[key] = v
        elif key in _POSITIVE_REAL:
            v = _as_float(key, value)
            if v <= 0:
                raise InvalidValue(key, "must be positive")
            kwargs[key] = v
        elif key in ("beta1", "beta2"):
            v = _as_float(key, value)
            if not 0.0 <= v < 1.0:
                raise InvalidValue(key, "must lie in [0, 1)")
            kwargs[key] = v
        elif key in _NONNEG_REAL:
            v = _as_float(key, value)
            if v < 0:
                raise InvalidValue(key, "must be non-negative")
            kwargs[key] = v
        else:  # pragma: no cover - every field is classified above
            raise InvalidValue(key, "unhandled key")

    cfg = CovtConfig(**kwargs)
    if cfg.image_size % cfg.patch_size:
        raise InvalidValue("patch_size", "must divide image_size")
    if cfg.hidden_dim % cfg.head_count:
        raise InvalidValue("head_count", "must divide hidden_dim")
    if cfg.warmup_ratio >= 1.0:
        raise InvalidValue("warmup_ratio", "must be below 1")
    if cfg.min_mask_stability > 1.0:
        raise InvalidValue("min_mask_stability", "must lie in [0, 1]")
    return cfg


def to_raw(cfg: CovtConfig) -> dict[str, Any]:
    return {f: getattr(cfg, f) for f in _FIELDS}


def _format_value(value: Any) -> str:
    if isinstance(value, TokenSchema):
        return value.to_text()
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: CovtConfig) -> str:
    lines = ["# covt configuration"]
    lines += [f"{k} = {_format_value(v)}" for k, v in to_raw(cfg).items()]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValue(f"line {lineno}", "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidValue(f"line {lineno}", "empty key")
        raw[key] = value
    return raw


def load_config(path: str | Path, **overrides: Any) -> CovtConfig:
    raw: dict[str, Any] = dict(parse_config_text(Path(path).read_text(encoding="utf-8")))
    raw.update(overrides)
    return validate_config(raw)


def save_config(cfg: CovtConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


@dataclass
class VisualSlot:
    position: int
    group: str
    index_in_group: int
    hidden: np.ndarray


@dataclass
class ThoughtChain:
    """Generated token ids plus the hidden vectors captured at visual-token positions."""

    token_ids: list[int]
    visual_slots: list[VisualSlot] = field(default_factory=list)

    def check(self, id_to_slot: Mapping[int, tuple[str, int]], hidden_dim: int) -> None:
        seen = set()
        for slot in self.visual_slots:
            if not 0 <= slot.position < len(self.token_ids):
                raise ShapeMismatch(f"slot position {slot.position} outside chain")
            tok = self.token_ids[slot.position]
            if id_to_slot.get(tok) != (slot.group, slot.index_in_group):
                raise ShapeMismatch(f"token at {slot.position} is not {slot.group}_{slot.index_in_group}")
            key = (slot.group, slot.index_in_group)
            if key in seen:
                raise ShapeMismatch(f"duplicate slot {key}")
            seen.add(key)
            if np.asarray(slot.hidden).shape != (hidden_dim,):
                raise ShapeMismatch("slot hidden has wrong width")

    def slots_for(self, group: str) -> list[VisualSlot]:
        return sorted((s for s in self.visual_slots if s.group == group), key=lambda s: s.index_in_group)

    def groups(self) -> list[str]:
        return sorted({s.group for s in self.visual_slots}, key=GROUP_NAMES.index)

    def to_json(self) -> dict[str, Any]:
        return {
            "token_ids": [int(t) for t in self.token_ids],
            "visual_slots": [
                {
                    "position": s.position,
                    "group": s.group,
                    "index_in_group": s.index_in_group,
                    "hidden": [float(x) for x in np.asarray(s.hidden, dtype=np.float64)],
                }
                for s in self.visual_slots
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ThoughtChain":
        slots = [
            VisualSlot(int(s["position"]), s["group"], int(s["index_in_group"]),
                       np.asarray(s["hidden"], dtype=np.float32))
            for s in obj["visual_slots"]
        ]
        return cls([int(t) for t in obj["token_ids"]], slots)
