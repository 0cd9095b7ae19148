"""Command-line entry point: train, eval, predict, viz-moe, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checks
from .ablation import parse_l_lists, parse_p_values, run_ablation, variants
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DataError, Sample, _read_png, load_dir, split, synth_generate
from .model import Patcher
from .patching import GeometryError
from .tensor import Tensor, no_grad
from .trainer import CheckpointError, TrainingError, evaluate, load_checkpoint, load_into, train

CONFIG_NAME = "config.cfg"


class UsageError(Exception):
    pass


# -- shared helpers -----------------------------------------------------------------

def _load_cfg(path, seed=None, out=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = load_config(path)
    except (ConfigError, GeometryError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = str(out)
    return cfg


def build_datasets(cfg: RunConfig) -> tuple[list[Sample], list[Sample], list[Sample]]:
    if cfg.data.source == "synth":
        samples = synth_generate(cfg.synth)
    else:
        root = Path(cfg.data.root)
        samples = load_dir(root / "images", root / "masks")
    if not samples:
        raise DataError("dataset is empty")
    if not cfg.data.split:
        return samples, samples, samples
    return split(samples, cfg.data.split, cfg.data.split_seed)


def _model_for(ckpt_path, config_path=None) -> tuple[Patcher, RunConfig]:
    ckpt_path = Path(ckpt_path)
    config_path = Path(config_path) if config_path else ckpt_path.parent / CONFIG_NAME
    cfg = _load_cfg(config_path)
    ckpt = load_checkpoint(ckpt_path, cfg.hash())
    model = Patcher(cfg.model, cfg.decoder, seed=cfg.seed)
    load_into(model, ckpt)
    return model, cfg


def _read_image(path: Path, channels: int) -> np.ndarray:
    image = _read_png(path).astype(np.float32) / 255.0
    if image.shape[0] != channels:
        raise DataError(f"{path.stem}: image has {image.shape[0]} channels, model expects {channels}")
    return image


def _save_gray(path: Path, values: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(values), 0, 255).astype(np.uint8)).save(path)


def probability_png(logits: np.ndarray) -> np.ndarray:
    return np.rint(255.0 / (1.0 + np.exp(-logits.astype(np.float64))))


def weight_map_pngs(weights: list[np.ndarray]) -> list[np.ndarray]:
    """Gate weights in [0, 1] -> 8-bit maps (0 -> 0, 1 -> 255) that sum to exactly 255.

    Each pixel's 255 levels are apportioned by largest remainder, so every map
    stays within one level of ``w * 255`` while the partition of unity survives
    rounding.  Ties go to the lower expert index.
    """
    scaled = np.stack(weights).astype(np.float64) * 255.0
    levels = np.floor(scaled)
    deficit = np.clip(np.rint(255.0 - levels.sum(axis=0)), 0, len(weights)).astype(int)
    order = np.argsort(-(scaled - levels), axis=0, kind="stable")
    rank = np.argsort(order, axis=0, kind="stable")
    levels += rank < deficit[None]
    return list(np.clip(levels, 0, 255))


# -- commands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_cfg(args.config, args.seed, args.out)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, out / CONFIG_NAME)
    if args.seed is not None or args.out is not None:
        # overrides change the effective run, so record it in canonical form
        text = dataclasses.replace(cfg, source_text=None).to_text()
        (out / CONFIG_NAME).write_text(text)
        cfg = parse_config(text)
    train_set, val_set, _ = build_datasets(cfg)
    model = Patcher(cfg.model, cfg.decoder, seed=cfg.seed)
    result = train(model, train_set, val_set, cfg.train, seed=cfg.seed, out_dir=out, config_hash=cfg.hash())
    print(f"trained {result.final_step} steps; best val DSC {result.best_dsc:.4f}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _model_for(args.ckpt, args.config)
    if args.data:
        root = Path(args.data)
        samples = load_dir(root / "images", root / "masks")
    else:
        parts = dict(zip(("train", "val", "test"), build_datasets(cfg)))
        samples = parts[args.split]
    if not samples:
        raise DataError("evaluation dataset is empty")
    result = evaluate(model, samples, cfg.train.batch_size)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    result.to_csv(out)
    print(f"DSC {result.dsc:.4f}  IoU {result.iou:.4f}  ({len(samples)} images) -> {out}")
    return 0


def cmd_predict(args) -> int:
    model, cfg = _model_for(args.ckpt, args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in map(Path, args.images):
        image = _read_image(path, cfg.model.in_channels)
        with no_grad():
            logits = model(Tensor(image[None])).data[0, 0]
        _save_gray(out / f"{path.stem}_mask.png", np.where(logits > 0, 255, 0))
        if args.prob:
            _save_gray(out / f"{path.stem}_prob.png", probability_png(logits))
        print(f"{path} -> {out / (path.stem + '_mask.png')}")
    return 0


def cmd_viz_moe(args) -> int:
    model, cfg = _model_for(args.ckpt, args.config)
    path = Path(args.image)
    image = _read_image(path, cfg.model.in_channels)
    with no_grad():
        _, experts = model.forward_with_experts(Tensor(image[None]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = -(-image.shape[1] // 2), -(-image.shape[2] // 2)
    maps = weight_map_pngs([wt.data[0, 0, :h, :w] for wt in experts.weights])
    for i, m in enumerate(maps, 1):
        _save_gray(out / f"{path.stem}_W{i}.png", m)
    print(f"wrote {len(maps)} weight maps ({maps[0].shape[0]}x{maps[0].shape[1]}) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.preset != "tiny":
        raise UsageError(f"unknown gradcheck preset {args.preset!r}")
    rows = checks.run_all()
    failed = [name for name, _, _, ok in rows if not ok]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args.config, args.seed, args.out)
    try:
        l_lists = parse_l_lists(args.L) if args.L else []
        p_values = parse_p_values(args.P) if args.P else []
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not l_lists and not p_values:
        raise UsageError("ablate needs --L and/or --P")
    try:
        variants(cfg, l_lists, p_values)
    except (GeometryError, ValueError) as exc:
        raise UsageError(f"invalid ablation variant: {exc}") from exc
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, out / CONFIG_NAME)
    rows = run_ablation(cfg, l_lists, p_values, build_datasets(cfg), out)
    for r in rows:
        print(f"{r['sweep']}  L={r['L']}  P={r['P']}  DSC {r['dsc']:.4f}  IoU {r['iou']:.4f}")
    print(f"-> {out / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patcher", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="DSC/IoU of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help=f"defaults to {CONFIG_NAME} next to the checkpoint")
    p.add_argument("--data", help="dataset root with images/ and masks/ (default: the config's data)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="per-image CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write binary mask PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--prob", action="store_true", help="also write sigmoid probability maps")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("viz-moe", help="export the four gating weight maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("image")
    p.set_defaults(func=cmd_viz_moe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--preset", default="tiny")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep large-patch size L and context P")
    p.add_argument("--config", required=True)
    p.add_argument("--L", help="per-stage lists separated by ';', e.g. '32,32,32,32;64,64,32,32'")
    p.add_argument("--P", help="comma-separated context sizes, e.g. '0,4,8,16'")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, TrainingError, GeometryError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
