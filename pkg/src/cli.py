"""
Command-line entry points.

    python main.py [--config FILE] [--seed N] [--log-level LEVEL] <command> [options]

Commands: synth, pretrain-recognizer, pretrain-prior, train-sr, infer, eval,
interp-w. Library errors exit with 1, usage errors with 2.
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from src.checkpoint import checkpoint_charset, checkpoint_config, load_checkpoint, restore_models
from src.config import DEVICE, LOG_LEVEL, TrainConfig, load_train_config
from src.dataset import load_image, write_dataset
from src.degrade import resize
from src.errors import GlyphPriorError
from src.priorgan import StructureGenerator
from src.srnet import super_resolve
from src.textgen import read_corpus, synthesize_sample
from src.training import (
    build_fonts,
    load_sr_model,
    pretrain_prior,
    pretrain_recognizer,
    resolve_charset,
    train_sr,
    validate_checkpoint,
)
from src.visualize import contact_sheet, image_grid, interpolation_strip, save_png

logger = logging.getLogger(__name__)

TRAIN_FLAGS = {
    "out_dir": ("--out-dir", str, "directory for checkpoints and logs"),
    "max_steps": ("--max-steps", int, "number of optimization steps"),
    "resume": ("--resume", str, "checkpoint of this stage to continue from"),
    "device": ("--device", str, "torch device"),
    "profile": ("--profile", str, "model profile: desk or tiny"),
    "charset_size": ("--charset-size", int, "use only the first N characters of the charset"),
}


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _add_train_flags(parser: argparse.ArgumentParser, extra: Dict[str, tuple]) -> None:
    for dest, (flag, kind, help_text) in {**TRAIN_FLAGS, **extra}.items():
        parser.add_argument(flag, dest=dest, type=kind, default=None, help=help_text)
    parser.add_argument("--deterministic", action="store_true", default=None, help="single-thread bit-exact mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glyphprior", description="Structure-prior blind text image super-resolution")
    parser.add_argument("--config", help="KEY=value stage configuration file")
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides the config file)")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level (default from GLYPHPRIOR_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    synth = sub.add_parser("synth", help="render a synthetic dataset and its manifest")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--num", type=int, default=100, help="number of samples")
    synth.add_argument("--start-id", type=int, default=0, help="first sample id")
    synth.add_argument("--scale", type=int, default=None, help="also write degraded LR images at this factor")
    synth.add_argument("--charset-size", dest="charset_size", type=int, default=None, help="use the first N characters")

    recog = sub.add_parser("pretrain-recognizer", help="train the structure-mask recognizer")
    _add_train_flags(recog, {})

    prior = sub.add_parser("pretrain-prior", help="pretrain the codebook structure generator")
    _add_train_flags(prior, {"recognizer_ckpt": ("--recognizer-ckpt", str, "frozen recognizer checkpoint")})

    train = sub.add_parser("train-sr", help="train the SR network end to end")
    _add_train_flags(
        train,
        {
            "prior_ckpt": ("--prior-ckpt", str, "pretrained prior checkpoint"),
            "train_manifest": ("--train-manifest", str, "training manifest (default: online synthesis)"),
            "val_manifest": ("--val-manifest", str, "validation manifest"),
            "scale": ("--scale", int, "SR factor: 2 or 4"),
            "fixed_samples": ("--fixed-samples", int, "train on this many fixed synthetic samples"),
        },
    )

    infer = sub.add_parser("infer", help="super-resolve one LR image")
    infer.add_argument("--ckpt", required=True, help="train-sr checkpoint")
    infer.add_argument("--input", required=True, help="LR image")
    infer.add_argument("--out", required=True, help="SR PNG; a JSON sidecar is written next to it")
    infer.add_argument("--sheet", help="also write an LR/SR contact sheet here")
    infer.add_argument("--structures", help="directory for the per-character structure images")
    infer.add_argument("--device", default=DEVICE)

    evaluate = sub.add_parser("eval", help="score a checkpoint on a manifest")
    evaluate.add_argument("--ckpt", required=True, help="train-sr checkpoint")
    evaluate.add_argument("--manifest", required=True, help="manifest with LR/HR pairs")
    evaluate.add_argument("--out", default="metrics.json", help="metrics JSON report")
    evaluate.add_argument("--csv", help="per-sample CSV")
    evaluate.add_argument("--oracle", action="store_true", help="score HR in place of SR")
    evaluate.add_argument("--device", default=DEVICE)

    interp = sub.add_parser("interp-w", help="structure images of one character along a style interpolation")
    interp.add_argument("--ckpt", required=True, help="pretrain-prior or train-sr checkpoint")
    interp.add_argument("--char", type=int, required=True, help="codebook index")
    interp.add_argument("--steps", type=int, default=5, help="number of interpolants (at least 2)")
    interp.add_argument("--out", default="interp.png", help="output grid PNG")

    return parser


def _config(args: argparse.Namespace) -> TrainConfig:
    overrides: Dict[str, Any] = {}
    for key in ("seed", *TRAIN_FLAGS, "deterministic", "recognizer_ckpt", "prior_ckpt", "train_manifest", "val_manifest", "scale", "fixed_samples"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.command in ("pretrain-recognizer", "pretrain-prior", "train-sr"):
        overrides["stage"] = args.command
    return load_train_config(args.config, overrides)


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config(args)
    charset = resolve_charset(config)
    fonts = build_fonts(config, charset)
    corpus = read_corpus(config.corpus_path) if config.corpus_path else None
    samples = (
        synthesize_sample(sid, config.seed, charset, fonts, corpus, config.render)
        for sid in range(args.start_id, args.start_id + args.num)
    )
    path = write_dataset(samples, args.out, config.seed, charset, args.scale, config.degradation)
    charset.to_file(str(Path(args.out) / "charset.txt"))
    print(f"Manifest written to {path}")
    return 0


def cmd_pretrain_recognizer(args: argparse.Namespace) -> int:
    print(f"Recognizer checkpoint: {pretrain_recognizer(_config(args))}")
    return 0


def cmd_pretrain_prior(args: argparse.Namespace) -> int:
    print(f"Prior checkpoint: {pretrain_prior(_config(args))}")
    return 0


def cmd_train_sr(args: argparse.Namespace) -> int:
    print(f"SR checkpoint: {train_sr(_config(args))}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    model, charset, _ = load_sr_model(args.ckpt, args.device)
    lr = load_image(Path(args.input))
    if lr.shape[0] != model.lr_height:
        new_w = max(int(round(lr.shape[1] * model.lr_height / lr.shape[0])), 1)
        logger.info(f"Resizing input from {lr.shape[0]}x{lr.shape[1]} to {model.lr_height}x{new_w}")
        lr = np.clip(resize(lr.astype(np.float64), model.lr_height, new_w, "bicubic"), 0.0, 1.0).astype(np.float32)
    result = super_resolve(lr, model, args.device)

    out = Path(args.out)
    save_png(result.sr_image, str(out))
    sidecar = {
        "text": charset.decode(result.text),
        "codes": result.text,
        "boxes": [list(b) for b in result.boxes],
        "confidences": result.confidences,
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    if args.sheet:
        save_png(contact_sheet(lr, result.sr_image), args.sheet)
    if args.structures:
        for k, structure in enumerate(result.structures):
            save_png(structure, str(Path(args.structures) / f"{k:02d}_{result.text[k]}.png"))
    print(f"Decoded text: {sidecar['text']!r}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    report = validate_checkpoint(args.ckpt, args.manifest, args.device, oracle=args.oracle)
    report.write(args.out, args.csv)
    print(json.dumps(report.summary(), indent=2))
    return 0


def _generator_from_checkpoint(path: str) -> StructureGenerator:
    payload = load_checkpoint(path)
    config = checkpoint_config(payload)
    charset = checkpoint_charset(payload)
    if payload["stage"] == "train-sr":
        model, _, _ = load_sr_model(path)
        return model.generator
    generator = StructureGenerator(charset.M, config.model_profile, config.prior_scales)
    restore_models(payload, {"generator": generator})
    return generator.eval()


def cmd_interp_w(args: argparse.Namespace) -> int:
    generator = _generator_from_checkpoint(args.ckpt)
    seed = args.seed if args.seed is not None else 0
    strip = interpolation_strip(generator, args.char, args.steps, seed)
    save_png(image_grid(strip, 1, len(strip)), args.out)
    print(f"Interpolation grid written to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-recognizer": cmd_pretrain_recognizer,
    "pretrain-prior": cmd_pretrain_prior,
    "train-sr": cmd_train_sr,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "interp-w": cmd_interp_w,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except GlyphPriorError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except ValueError as e:
        logger.error(str(e))
        return 1
