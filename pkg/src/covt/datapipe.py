"""Four-stage curriculum formatting, strict thought-grammar parsing, dataset building."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import token_spans
from .core import CovtConfig, TokenSchema
from .errors import IoFailure, MalformedThought, UnknownStage
from .experts import (SyntheticScene, filter_masks, random_scene, rasterize_scene, render_scene,
                      write_expert_cache)

IMAGE = "<image>"
THINK = "<think>"
THINK_END = "</think>"
GENERATION_QUESTION = "Generate the visual thinking tokens for this image."
RECORDS_FILE = "records.jsonl"
CACHE_DIR = "cache"

_NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight")


@dataclass(frozen=True)
class RecordBase:
    sample_id: str
    image_ref: str
    question: str
    answer: str


@dataclass(frozen=True)
class TrainingRecord:
    sample_id: str
    image_ref: str
    question: str
    answer: str
    stage: int
    groups_present: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "stage": self.stage,
            "image_ref": self.image_ref,
            "question": self.question,
            "answer": self.answer,
            "groups": list(self.groups_present),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingRecord":
        return cls(obj["sample_id"], obj["image_ref"], obj["question"], obj["answer"],
                   int(obj["stage"]), tuple(obj["groups"]))


def blocks(schema: TokenSchema, groups: Iterable[str]) -> str:
    wanted = set(groups)
    return "".join("".join(schema.block(g)) for g in schema.names if g in wanted)


def thought(schema: TokenSchema, groups: Iterable[str]) -> str:
    return THINK + blocks(schema, groups) + THINK_END


def sample_group_subset(schema: TokenSchema, rng: np.random.Generator) -> tuple[str, ...]:
    """Size uniform on {0..k}, then a uniform subset of that size, kept in schema order."""
    k = len(schema.groups)
    size = int(rng.integers(0, k + 1))
    picked = set(rng.choice(k, size=size, replace=False).tolist()) if size else set()
    return tuple(g for i, g in enumerate(schema.names) if i in picked)


def format_stage(base: RecordBase, stage: int, rng: np.random.Generator, schema: TokenSchema) -> TrainingRecord:
    if stage not in (1, 2, 3, 4):
        raise UnknownStage(str(stage))
    all_groups = schema.names
    if stage == 1:
        question = f"{IMAGE}{blocks(schema, all_groups)} {base.question}"
        return TrainingRecord(base.sample_id, base.image_ref, question, base.answer, 1, all_groups)
    if stage == 2:
        return TrainingRecord(base.sample_id, base.image_ref, f"{IMAGE} {GENERATION_QUESTION}",
                              blocks(schema, all_groups), 2, all_groups)
    groups = all_groups if stage == 3 else sample_group_subset(schema, rng)
    answer = f"{thought(schema, groups)} {base.answer}"
    return TrainingRecord(base.sample_id, base.image_ref, f"{IMAGE} {base.question}", answer, stage, groups)


def parse_sample(text: str, schema: TokenSchema) -> tuple[tuple[str, ...], str]:
    """Strictly parse visual literals out of ``text``.

    Returns (groups present, remaining text). Literals must form one
    contiguous run of complete groups, each in index order and the groups in
    schema order; a think block, if present, holds exactly that run.
    """
    lookup = schema.lookup()
    order = {g: i for i, g in enumerate(schema.names)}
    spans = token_spans(text)
    groups: list[str] = []
    seen: set[str] = set()
    current: str | None = None
    expect = 0
    run_start = run_end = None
    think_open = think_close = None
    keep = []
    for pos, (tok, a, b) in enumerate(spans):
        if tok in lookup:
            if think_close is not None and run_end is not None and pos > think_close:
                raise MalformedThought(pos, "visual literal after the thought block")
            if run_end is not None and pos != run_end:
                raise MalformedThought(pos, "visual literals split into separate runs")
            if run_start is None:
                run_start = pos
            run_end = pos + 1
            if tok in seen:
                raise MalformedThought(pos, f"duplicate literal {tok}")
            seen.add(tok)
            group, idx = lookup[tok]
            if group != current:
                if current is not None and expect != schema.count(current):
                    raise MalformedThought(pos, f"partial {current} group")
                if group in groups:
                    raise MalformedThought(pos, f"{group} group appears twice")
                if groups and order[group] < order[groups[-1]]:
                    raise MalformedThought(pos, f"{group} group out of order")
                groups.append(group)
                current, expect = group, 0
            if idx != expect:
                raise MalformedThought(pos, f"{tok} out of order (expected index {expect})")
            expect += 1
        elif tok == THINK:
            if think_open is not None:
                raise MalformedThought(pos, "second <think>")
            if run_start is not None:
                raise MalformedThought(pos, "visual literals before <think>")
            think_open = pos
        elif tok == THINK_END:
            if think_open is None or think_close is not None:
                raise MalformedThought(pos, "unmatched </think>")
            if run_start is not None and run_start != think_open + 1:
                raise MalformedThought(pos, "thought block holds non-literal tokens")
            if run_start is None and pos != think_open + 1:
                raise MalformedThought(pos, "thought block holds non-literal tokens")
            if run_end is not None and run_end != pos:
                raise MalformedThought(pos, "thought block holds non-literal tokens")
            think_close = pos
        elif tok.startswith("<") and tok.endswith(">") and tok != IMAGE:
            prefix = tok[1:].split("_", 1)[0]
            if any(g.prefix == prefix for g in schema.groups):
                raise MalformedThought(pos, f"unknown literal {tok}")
            keep.append((a, b))
        elif tok != IMAGE:
            keep.append((a, b))
    if current is not None and expect != schema.count(current):
        raise MalformedThought(len(spans), f"partial {current} group")
    if think_open is not None and think_close is None:
        raise MalformedThought(len(spans), "unclosed <think>")
    remainder = ""
    # tokens adjacent in the source stay glued, any gap collapses to one space
    if keep:
        pieces = [text[keep[0][0]:keep[0][1]]]
        for (pa, pb), (a, b) in zip(keep, keep[1:]):
            gap = text[pb:a]
            pieces.append(("" if gap == "" else " ") + text[a:b])
        remainder = "".join(pieces)
    return tuple(groups), remainder


def parse_record(record: TrainingRecord, schema: TokenSchema) -> tuple[tuple[str, ...], str]:
    """Groups from prompt and answer together, plus the answer's plain text."""
    q_groups, _ = parse_sample(record.question, schema)
    a_groups, answer = parse_sample(record.answer, schema)
    if q_groups and a_groups:
        raise MalformedThought(0, "visual literals in both prompt and answer")
    return q_groups or a_groups, answer


# -- synthetic question answering ----------------------------------------

def describe_scene(scene: SyntheticScene, masks_by_shape: dict[int, int], rng: np.random.Generator) -> tuple[str, str]:
    """A question/answer pair grounded in the visible shapes."""
    visible = [i for i in range(len(scene.shapes)) if masks_by_shape.get(i, 0) > 0]
    kinds = {"rect": "rectangle", "disk": "disk"}
    template = int(rng.integers(0, 4))
    if template == 0:
        return "How many shapes are there ?", _NUMBERS[len(visible)]
    if template == 1:
        near = min(visible, key=lambda i: scene.shapes[i].depth_value)
        return "Which shape is closest to the camera ?", f"the {kinds[scene.shapes[near].kind]}"
    if template == 2:
        big = max(visible, key=lambda i: (masks_by_shape[i], -i))
        return "What is the largest shape ?", f"the {kinds[scene.shapes[big].kind]}"
    has_disk = any(scene.shapes[i].kind == "disk" for i in visible)
    return "Is there a disk in the image ?", "yes" if has_disk else "no"


def record_seed(seed: int, sample_id: str, stage: int = 0) -> list[int]:
    return [seed, zlib.crc32(sample_id.encode("utf-8")), stage]


def allocate_stages(n: int, stage_mix: Sequence[float]) -> list[int]:
    """Deterministic largest-remainder split of n samples over stages 1..4."""
    w = np.asarray(stage_mix, dtype=np.float64)
    if w.shape != (4,) or (w < 0).any() or w.sum() <= 0:
        raise UnknownStage(f"stage mix {tuple(stage_mix)} must be four non-negative weights")
    exact = n * w / w.sum()
    counts = np.floor(exact).astype(int)
    rest = n - counts.sum()
    for i in np.argsort(-(exact - counts), kind="stable")[:rest]:
        counts[i] += 1
    return [s + 1 for s in range(4) for _ in range(counts[s])]


@dataclass(frozen=True)
class DatasetInfo:
    records_path: Path
    cache_root: Path
    n_records: int
    n_cache_dirs: int


def build_dataset(n_samples: int, stage_mix: Sequence[float], seed: int, out_dir: str | Path,
                  cfg: CovtConfig, cache_root: str | Path | None = None,
                  replicate: bool = False, min_shapes: int = 1, max_shapes: int = 3) -> DatasetInfo:
    """Render synthetic scenes, cache expert targets and write the record file.

    With ``replicate`` every sample is formatted once per stage of nonzero
    weight; otherwise samples are split across stages by ``stage_mix``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    out = Path(out_dir)
    cache = Path(cache_root) if cache_root is not None else out / CACHE_DIR
    schema = cfg.token_schema
    area = cfg.image_size ** 2
    if replicate:
        active = [s + 1 for s, w in enumerate(stage_mix) if w > 0]
        if not active:
            raise UnknownStage("stage mix selects no stage")
        plan = [active] * n_samples
    else:
        plan = [[s] for s in allocate_stages(n_samples, stage_mix)]
    records: list[TrainingRecord] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(n_samples):
            sample_id = f"s{i:05d}"
            rng = np.random.default_rng(record_seed(seed, sample_id))
            scene = random_scene(rng, cfg, min_shapes, max_shapes)
            image, targets = render_scene(scene, cfg)
            labels, _, _ = rasterize_scene(scene, cfg.image_size)
            per_shape = {s: int((labels == s).sum()) for s in range(len(scene.shapes))}
            targets.masks = filter_masks(targets.masks, area, cfg.min_mask_area_frac, cfg.min_mask_stability)
            write_expert_cache(cache / sample_id, image, targets, scene)
            question, answer = describe_scene(scene, per_shape, rng)
            base = RecordBase(sample_id, sample_id, question, answer)
            for stage in plan[i]:
                srng = np.random.default_rng(record_seed(seed, sample_id, stage))
                records.append(format_stage(base, stage, srng, schema))
        write_records(out / RECORDS_FILE, records)
        meta = {"n_samples": n_samples, "seed": seed, "stage_mix": list(stage_mix), "replicate": replicate,
                "cache_root": CACHE_DIR if cache_root is None else str(Path(cache_root).resolve())}
        (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DatasetInfo(out / RECORDS_FILE, cache, len(records), n_samples)


def write_records(path: Path, records: Sequence[TrainingRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def read_records(path: str | Path) -> list[TrainingRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [TrainingRecord.from_json(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def resolve_cache_root(dataset_dir: str | Path, override: str | Path | None = None) -> Path:
    if override:
        return Path(override)
    meta_path = Path(dataset_dir) / "dataset.json"
    if meta_path.exists():
        root = json.loads(meta_path.read_text(encoding="utf-8")).get("cache_root", CACHE_DIR)
        root = Path(root)
        return root if root.is_absolute() else Path(dataset_dir) / root
    return Path(dataset_dir) / CACHE_DIR
