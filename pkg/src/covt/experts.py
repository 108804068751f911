"""Expert-target provisioning.

A deterministic synthetic expert suite stands in for the segmentation, depth,
edge and patch-feature models. Real experts plug in by producing the same
artifacts described by :func:`external_expert_contract`.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .core import CovtConfig
from .errors import InvalidScene, IoFailure, MissingExpertCache, ShapeMismatch, UnknownExpert

MAX_SHAPES = 8
# Shape intensities are drawn from k/15, k = 1..14, so they survive 16-bit PGM
# storage exactly (65535 / 15 = 4369) and sit on the seg embedding's bin centres.
PALETTE_LEVELS = 15
DEPTH_TAPS = 4
EDGE_TAPS = 4
MASK_DECODER_GAIN = 30.0


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "disk"
    center: tuple[float, float]  # (y, x) in pixels
    size: tuple[float, float]  # rect: half extents (y, x); disk: (radius, radius)
    depth_value: float
    intensity: float


@dataclass(frozen=True)
class SyntheticScene:
    shapes: tuple[Shape, ...] = ()
    background_depth: float = 1.0

    def to_json(self) -> dict:
        return {"shapes": [asdict(s) for s in self.shapes], "background_depth": self.background_depth}

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticScene":
        shapes = tuple(
            Shape(s["kind"], tuple(s["center"]), tuple(s["size"]), float(s["depth_value"]), float(s["intensity"]))
            for s in obj["shapes"]
        )
        return cls(shapes, float(obj["background_depth"]))


@dataclass
class MaskRecord:
    mask: np.ndarray  # H x W uint8 in {0, 1}
    area: int
    stability: float = 1.0

    def bbox(self) -> tuple[int, int, int, int]:
        ys, xs = np.nonzero(self.mask)
        if len(ys) == 0:
            return (0, 0, 0, 0)
        return (int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()))


@dataclass
class ExpertTargets:
    masks: list[MaskRecord]
    depth: np.ndarray  # H x W
    edge: np.ndarray  # H x W in [0, 1]
    patch_features: np.ndarray  # P x d
    tap_features: dict[str, list[np.ndarray]] = field(default_factory=dict)  # each C x H x W


def validate_scene(scene: SyntheticScene, image_size: int) -> None:
    if len(scene.shapes) > MAX_SHAPES:
        raise InvalidScene(f"{len(scene.shapes)} shapes exceeds {MAX_SHAPES}")
    if not scene.background_depth > 0:
        raise InvalidScene("background depth must be positive")
    for i, s in enumerate(scene.shapes):
        if s.kind not in ("rect", "disk"):
            raise InvalidScene(f"shape {i}: unknown kind {s.kind!r}")
        cy, cx = s.center
        if not (0 <= cy < image_size and 0 <= cx < image_size):
            raise InvalidScene(f"shape {i}: center outside image")
        if min(s.size) <= 0:
            raise InvalidScene(f"shape {i}: size must be positive")
        if not 0 < s.depth_value < scene.background_depth:
            raise InvalidScene(f"shape {i}: depth must lie in (0, background)")
        if not 0 < s.intensity <= 1:
            raise InvalidScene(f"shape {i}: intensity must lie in (0, 1]")


def rasterize_scene(scene: SyntheticScene, image_size: int):
    """Return (labels, depth, image); labels are shape indices, -1 for background."""
    validate_scene(scene, image_size)
    sh = scene.shapes
    kind = np.array([0 if s.kind == "rect" else 1 for s in sh], dtype=np.int64)
    cy = np.array([s.center[0] for s in sh], dtype=np.float64)
    cx = np.array([s.center[1] for s in sh], dtype=np.float64)
    sy = np.array([s.size[0] for s in sh], dtype=np.float64)
    sx = np.array([s.size[1] for s in sh], dtype=np.float64)
    dv = np.array([s.depth_value for s in sh], dtype=np.float64)
    iv = np.array([s.intensity for s in sh], dtype=np.float64)
    return kernels.rasterize(kind, cy, cx, sy, sx, dv, iv, image_size, image_size, scene.background_depth)


# -- toy expert features --------------------------------------------------

def _tap_weights(group: str, tap: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng([zlib.crc32(group.encode()), tap])
    return rng.normal(0.0, 3.0 / np.sqrt(10.0), size=(channels, 10))


def _neighbourhood(image: np.ndarray, dilation: int) -> np.ndarray:
    """9 x H x W stack of the dilated 3x3 neighbourhood (edge padded)."""
    h, w = image.shape
    pad = np.pad(image, dilation, mode="edge")
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            y0 = dilation + dy * dilation
            x0 = dilation + dx * dilation
            out.append(pad[y0:y0 + h, x0:x0 + w])
    return np.stack(out)


def tap_features(image: np.ndarray, group: str, channels: int) -> list[np.ndarray]:
    """Four feature maps (C x H x W): seeded random filters over dilated 3x3 neighbourhoods, tanh-squashed.

    Tap ``t`` uses dilation ``t + 1``; tap 3 plays the role of the final-layer feature.
    """
    taps = []
    for t in range(DEPTH_TAPS if group == "depth" else EDGE_TAPS):
        nb = _neighbourhood(image, t + 1)
        stack = np.concatenate([nb, np.ones((1,) + image.shape)], axis=0)
        w = _tap_weights(group, t, channels)
        taps.append(np.tanh(np.einsum("ck,khw->chw", w, stack)))
    return taps


def seg_embedding(image: np.ndarray, channels: int) -> np.ndarray:
    """Dense embedding for the mask decoder: RBF bins of intensity plus a constant channel."""
    bins = channels - 1
    centers = np.arange(bins) / PALETTE_LEVELS
    width = 0.5 / PALETTE_LEVELS
    feats = np.exp(-((image[None] - centers[:, None, None]) ** 2) / (2 * width * width))
    return np.concatenate([feats, np.ones((1,) + image.shape)], axis=0)


def patch_means(image: np.ndarray, patch: int, dim: int) -> np.ndarray:
    h, w = image.shape
    grid = image.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3)).reshape(-1)
    return np.repeat(grid[:, None], dim, axis=1)


def expert_features(image: np.ndarray, cfg: CovtConfig) -> dict[str, list[np.ndarray]]:
    return {
        "seg": [seg_embedding(image, cfg.expert_channels)],
        "depth": tap_features(image, "depth", cfg.expert_channels),
        "edge": tap_features(image, "edge", cfg.expert_channels),
    }


class ToyMaskDecoder:
    """Prompt-conditioned mask decoder: ``sigmoid(gain * <prompt, embedding>)`` per pixel.

    Class-level counters let callers prove that inference never decodes.
    """

    instances = 0
    invocations = 0

    def __init__(self, gain: float = MASK_DECODER_GAIN):
        type(self).instances += 1
        self.gain = gain

    @classmethod
    def reset_counters(cls) -> None:
        cls.instances = 0
        cls.invocations = 0

    def __call__(self, prompts: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
        """prompts: (n, C); dense: (C, H, W) -> masks (n, H, W) in [0, 1]."""
        if prompts.shape[-1] != dense.shape[0]:
            raise ShapeMismatch(f"prompt width {prompts.shape[-1]} != embedding channels {dense.shape[0]}")
        type(self).invocations += 1
        return torch.sigmoid(self.gain * torch.einsum("nc,chw->nhw", prompts, dense))


# -- rendering -----------------------------------------------------------

def render_scene(scene: SyntheticScene, cfg: CovtConfig) -> tuple[np.ndarray, ExpertTargets]:
    size = cfg.image_size
    labels, depth, image = rasterize_scene(scene, size)
    masks = []
    for s in range(len(scene.shapes)):
        m = (labels == s).astype(np.uint8)
        area = int(m.sum())
        if area:
            masks.append(MaskRecord(m, area, 1.0))
    targets = ExpertTargets(
        masks=masks,
        depth=depth,
        edge=kernels.label_boundaries(labels),
        patch_features=patch_means(image, cfg.patch_size, cfg.dino_dim),
        tap_features=expert_features(image, cfg),
    )
    return image, targets


def random_scene(rng: np.random.Generator, cfg: CovtConfig, min_shapes: int = 1, max_shapes: int = 3) -> SyntheticScene:
    size = cfg.image_size
    n = int(rng.integers(min_shapes, max_shapes + 1))
    levels = rng.choice(np.arange(1, PALETTE_LEVELS), size=n, replace=False)
    depths = rng.choice(np.arange(1, 15), size=n, replace=False) / 16.0
    shapes = []
    for k in range(n):
        kind = "rect" if rng.random() < 0.5 else "disk"
        cy, cx = (float(v) for v in rng.integers(size // 8, size - size // 8, size=2))
        if kind == "rect":
            hs = tuple(float(v) for v in rng.integers(size // 10, size // 4, size=2))
        else:
            r = float(rng.integers(size // 10, size // 4))
            hs = (r, r)
        shapes.append(Shape(kind, (cy, cx), hs, float(depths[k]), float(levels[k]) / PALETTE_LEVELS))
    return SyntheticScene(tuple(shapes), 1.0)


def filter_masks(masks: Sequence[MaskRecord], image_area: int, min_area_frac: float = 0.001,
                 min_stability: float = 0.5, keep: int = 8) -> list[MaskRecord]:
    """Drop small or unstable masks, then keep the ``keep`` largest (ties by bounding box)."""
    ok = [m for m in masks if m.area >= min_area_frac * image_area and m.stability >= min_stability]
    ok.sort(key=lambda m: (-m.area, m.bbox()))
    return ok[:keep]


# -- adapter contract ----------------------------------------------------

@dataclass(frozen=True)
class ArtifactSpec:
    name: str
    shape: str
    value_range: str
    note: str = ""


@dataclass(frozen=True)
class ExpertContract:
    name: str
    stands_in_for: str
    artifacts: tuple[ArtifactSpec, ...]
    prompt_conditioned: bool = False

    @property
    def tap_count(self) -> int:
        return sum(1 for a in self.artifacts if a.name.startswith("tap_"))


_CONTRACTS = {
    "seg": ExpertContract(
        "seg", "SAM",
        (
            ArtifactSpec("dense_embedding", "C x H x W", "real"),
            ArtifactSpec("mask_decoder", "(prompt[C], dense_embedding) -> H x W", "[0, 1]",
                         "one mask per prompt token"),
            ArtifactSpec("masks", "<=8 x H x W", "{0, 1}", "filtered by area and stability"),
        ),
        prompt_conditioned=True,
    ),
    "depth": ExpertContract(
        "depth", "DepthAnything v2",
        tuple(ArtifactSpec(f"tap_{i}", "C x H x W", "real", "final-layer feature" if i == 3 else "intermediate feature")
              for i in range(DEPTH_TAPS))
        + (ArtifactSpec("depth_map", "H x W", "[0, inf)"),),
    ),
    "edge": ExpertContract(
        "edge", "PIDINet",
        tuple(ArtifactSpec(f"tap_{i}", "C x H x W", "real", "intermediate feature") for i in range(EDGE_TAPS))
        + (ArtifactSpec("edge_map", "H x W", "[0, 1]"),),
    ),
    "dino": ExpertContract(
        "dino", "DINOv2",
        (ArtifactSpec("patch_features", "P x d", "real"),),
    ),
}


def external_expert_contract(name: str) -> ExpertContract:
    try:
        return _CONTRACTS[name]
    except KeyError:
        raise UnknownExpert(name) from None


# -- on-disk cache -------------------------------------------------------

def write_pgm(path: Path, data: np.ndarray, maxval: int) -> None:
    data = np.asarray(data)
    h, w = data.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = data.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def read_pgm(path: Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace before raster
    if fields[0] != b"P5":
        raise IoFailure(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.int64), maxval


def write_feature_grid(path: Path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype="<f4")
    p, d = grid.shape
    Path(path).write_bytes(struct.pack("<ii", p, d) + grid.tobytes())


def read_feature_grid(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    p, d = struct.unpack("<ii", raw[:8])
    return np.frombuffer(raw, dtype="<f4", count=p * d, offset=8).reshape(p, d).astype(np.float64)


def _to_u16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 65535.0), 0, 65535).astype(np.int64)


def write_expert_cache(directory: Path, image: np.ndarray, targets: ExpertTargets, scene: SyntheticScene | None = None) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        write_pgm(directory / "image.pgm", _to_u16(image), 65535)
        for j, m in enumerate(targets.masks):
            write_pgm(directory / f"mask_{j:02d}.pgm", m.mask, 1)
        write_pgm(directory / "depth.pgm", _to_u16(targets.depth), 65535)
        write_pgm(directory / "edge.pgm", _to_u16(targets.edge), 65535)
        write_feature_grid(directory / "dino.bin", targets.patch_features)
        meta = {
            "masks": [{"area": m.area, "stability": m.stability} for m in targets.masks],
            "scene": scene.to_json() if scene is not None else None,
        }
        (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_image(directory: Path) -> np.ndarray:
    path = Path(directory) / "image.pgm"
    if not path.exists():
        raise MissingExpertCache(str(directory))
    data, maxval = read_pgm(path)
    return data / float(maxval)


def load_expert_cache(directory: Path, cfg: CovtConfig) -> tuple[np.ndarray, ExpertTargets]:
    directory = Path(directory)
    if not (directory / "meta.json").exists():
        raise MissingExpertCache(str(directory))
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        image = load_image(directory)
        if image.shape != (cfg.image_size, cfg.image_size):
            raise ShapeMismatch(f"cached image {image.shape} vs image_size {cfg.image_size}")
        masks = []
        for j, info in enumerate(meta["masks"]):
            m, _ = read_pgm(directory / f"mask_{j:02d}.pgm")
            masks.append(MaskRecord(m.astype(np.uint8), int(info["area"]), float(info["stability"])))
        depth, dmax = read_pgm(directory / "depth.pgm")
        edge, emax = read_pgm(directory / "edge.pgm")
        dino = read_feature_grid(directory / "dino.bin")
    except FileNotFoundError as exc:
        raise MissingExpertCache(str(exc)) from exc
    targets = ExpertTargets(masks, depth / float(dmax), edge / float(emax), dino, expert_features(image, cfg))
    return image, targets
