"""Command-line entry points: build-data, train, infer, decode.

Exit codes: 0 success, 1 runtime error (the error class name is printed),
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CovtConfig, ThoughtChain, load_config, validate_config
from .datapipe import IMAGE, THINK, THINK_END, build_dataset
from .errors import CovtError, IoFailure, MissingExpertCache, NoVisualSlots
from .experts import expert_features, load_image, read_pgm, write_feature_grid, write_pgm

CACHE_ENV = "COVT_CACHE"
TOY_DEFAULTS = {"hidden_dim": 64, "image_size": 64}
DEPTH_SCALE = 32768


def _config(args: argparse.Namespace, **overrides) -> CovtConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = validate_config(TOY_DEFAULTS)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _stage_mix(args: argparse.Namespace) -> tuple[float, ...]:
    if args.mix:
        parts = [float(x) for x in args.mix.split(",")]
        if len(parts) != 4:
            raise argparse.ArgumentTypeError("--mix takes four comma-separated weights")
        return tuple(parts)
    stages = {int(x) for x in args.stages.split(",")}
    if not stages <= {1, 2, 3, 4}:
        raise argparse.ArgumentTypeError(f"--stages must name stages 1..4, got {args.stages}")
    return tuple(1.0 if s in stages else 0.0 for s in (1, 2, 3, 4))


def _cache_override() -> str | None:
    return os.environ.get(CACHE_ENV) or None


# -- commands ----------------------------------------------------------------

def cmd_build_data(args: argparse.Namespace) -> int:
    cfg = _config(args)
    info = build_dataset(args.n, _stage_mix(args), cfg.seed, args.out, cfg, cache_root=_cache_override(),
                         replicate=args.replicate)
    print(f"records {info.n_records}")
    print(f"cache_dirs {info.n_cache_dirs}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .trainer import train

    overrides = {}
    if args.gamma is not None:
        overrides["gamma"] = args.gamma
    if args.steps:
        overrides["stage_steps"] = args.steps
    cfg = _config(args, **overrides)
    data = Path(args.data)
    if not (data / "records.jsonl").exists():
        raise MissingExpertCache(f"no dataset at {data}")
    result = train(cfg, data, args.out, cache_root=_cache_override(), resume_from=args.resume)
    last = result.reports[-1] if result.reports else None
    for ck in result.checkpoints:
        print(f"checkpoint {ck}")
    if last is not None:
        print(f"step {last.step} total {last.total:.6f}")
    return 0


def _load_model(checkpoint: str):
    from .model import load_checkpoint

    model, _ = load_checkpoint(checkpoint)
    model.eval()
    return model


def _image_from_args(args: argparse.Namespace, size: int) -> np.ndarray:
    if args.image:
        data, maxval = read_pgm(Path(args.image))
        image = data / float(maxval)
    elif args.cache:
        image = load_image(Path(args.cache))
    else:
        raise argparse.ArgumentTypeError("one of --image or --cache is required")
    if image.shape != (size, size):
        from .errors import ShapeMismatch
        raise ShapeMismatch(f"image {image.shape} does not match image_size {size}")
    return image


def answer_text(vocab, ids: Sequence[int], show_thoughts: bool) -> str:
    """Decoded answer; the thought block is elided unless requested."""
    body = [int(t) for t in ids if int(t) not in (vocab.eos_id, vocab.pad_id)]
    if not show_thoughts:
        out, inside = [], False
        for t in body:
            if t == vocab.think_id:
                inside = True
            elif t == vocab.think_end_id:
                inside = False
            elif not inside:
                out.append(t)
        body = out
    return vocab.decode(body)


def cmd_infer(args: argparse.Namespace) -> int:
    from .backbone import generate_with_visual_thoughts

    model = _load_model(args.checkpoint)
    image = _image_from_args(args, model.cfg.image_size)
    question = args.question if IMAGE in args.question else f"{IMAGE} {args.question}"
    prompt = model.encode_prompt(question)
    max_len = args.max_len or model.cfg.max_text_len
    chain = generate_with_visual_thoughts(model.backbone, model.vocab, prompt, image, max_len)
    print(answer_text(model.vocab, chain.token_ids[len(prompt):], args.show_thoughts))
    if args.save_chain:
        try:
            Path(args.save_chain).write_text(json.dumps(chain.to_json()) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
    return 0


def _u16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 65535).astype(np.uint16)


def decode_chain(model, chain: ThoughtChain, image: np.ndarray, out_dir: Path, sample: str) -> list[Path]:
    """Render every visual group in the chain to files; returns the written paths."""
    if not chain.visual_slots:
        raise NoVisualSlots("chain has no visual-token slots to decode")
    chain.check(model.vocab.id_to_slot, model.cfg.hidden_dim)
    features = expert_features(image, model.cfg)
    size = model.cfg.image_size
    written: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for group in chain.groups():
            hiddens = np.stack([s.hidden for s in chain.slots_for(group)])
            rec = model.decode_group(group, hiddens, features)
            if group == "seg":
                for i, mask in enumerate(rec):
                    path = out_dir / f"{sample}_seg_{i}.pgm"
                    write_pgm(path, (mask >= 0.5).astype(np.uint8), 1)
                    written.append(path)
            elif group == "depth":
                path = out_dir / f"{sample}_depth_0.pgm"
                write_pgm(path, _u16(rec.astype(np.float64) * size * size * DEPTH_SCALE), 65535)
                written.append(path)
            elif group == "edge":
                path = out_dir / f"{sample}_edge_0.pgm"
                write_pgm(path, _u16(rec.astype(np.float64) * 65535), 65535)
                written.append(path)
            else:
                path = out_dir / f"{sample}_dino_0.bin"
                write_feature_grid(path, rec)
                written.append(path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return written


def cmd_decode(args: argparse.Namespace) -> int:
    try:
        chain = ThoughtChain.from_json(json.loads(Path(args.chain).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        raise IoFailure(f"cannot read chain {args.chain}: {exc}") from exc
    model = _load_model(args.checkpoint)
    image = _image_from_args(args, model.cfg.image_size)
    sample = args.sample or Path(args.chain).stem
    for path in decode_chain(model, chain, image, Path(args.out), sample):
        print(path)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="covt", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", parents=[common], help="render scenes and write a dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--stages", default="1,2,3,4", help="comma-separated stages, equal weights")
    p.add_argument("--mix", help="four comma-separated stage weights (overrides --stages)")
    p.add_argument("--replicate", action="store_true", help="format every sample for every selected stage")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", parents=[common], help="run the four-stage curriculum")
    p.add_argument("--data", required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", help="four comma-separated stage lengths")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "answer a question, thinking in latent tokens"),
                                 ("decode", cmd_decode, "render a saved chain's visual tokens")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", help="16-bit PGM image")
        p.add_argument("--cache", help="expert cache directory of one sample")
        if name == "infer":
            p.add_argument("--question", required=True)
            p.add_argument("--show-thoughts", action="store_true")
            p.add_argument("--save-chain")
            p.add_argument("--max-len", type=int)
        else:
            p.add_argument("--chain", required=True)
            p.add_argument("--sample", help="file name prefix (default: chain file stem)")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in (("config", None), ("seed", None), ("out", ".")):
        if not hasattr(args, key):
            setattr(args, key, default)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"covt: error: {exc}", file=sys.stderr)
        return 2
    except CovtError as exc:
        print(f"{exc.name}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
