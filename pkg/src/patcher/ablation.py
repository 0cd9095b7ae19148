"""Large-patch size / padded-context sweeps under a fixed seed and budget."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

from .config import RunConfig
from .encoder import N_STAGES, PatcherConfig
from .model import Patcher
from .trainer import evaluate, train

log = logging.getLogger(__name__)


def parse_l_lists(text: str) -> list[tuple[int, ...]]:
    """``"32,32,32,32;64,64,32,32"`` -> per-stage tuples; a single value fans out to all stages."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip().strip("[]")
        if not chunk:
            continue
        vals = tuple(int(v) for v in chunk.split(","))
        if len(vals) == 1:
            vals = vals * N_STAGES
        if len(vals) != N_STAGES:
            raise ValueError(f"L list {chunk!r} needs 1 or {N_STAGES} entries")
        out.append(vals)
    return out


def parse_p_values(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def variants(cfg: RunConfig, l_lists: list[tuple[int, ...]], p_values: list[int]) -> list[tuple[str, PatcherConfig]]:
    """Variant rows: the P sweep at the base L first, then the L sweep at the base P.

    Every variant is validated up front so a bad (L, P) fails before any training.
    """
    base = cfg.model
    rows = []
    for p in p_values:
        rows.append(("P", dataclasses.replace(base, context=(p,) * N_STAGES)))
    for ls in l_lists:
        rows.append(("L", dataclasses.replace(base, large=ls)))
    return rows


def run_ablation(cfg: RunConfig, l_lists, p_values, datasets, out_dir: str | Path) -> list[dict]:
    train_set, val_set, test_set = datasets
    eval_set = test_set or val_set or train_set
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[tuple, tuple[float, float]] = {}
    rows = []
    for sweep, model_cfg in variants(cfg, l_lists, p_values):
        key = (model_cfg.large, model_cfg.context)
        if key not in results:
            log.info("ablation variant L=%s P=%s", list(model_cfg.large), list(model_cfg.context))
            model = Patcher(model_cfg, cfg.decoder, seed=cfg.seed)
            train(model, train_set, val_set, cfg.train, seed=cfg.seed)
            ev = evaluate(model, eval_set, cfg.train.batch_size)
            results[key] = (ev.dsc, ev.iou)
        d, j = results[key]
        rows.append({"sweep": sweep, "L": list(model_cfg.large), "P": model_cfg.context[0], "dsc": d, "iou": j})
    write_ablation_csv(out / "ablation.csv", rows)
    return rows


def write_ablation_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sweep", "L", "P", "dsc", "iou"])
        for r in rows:
            writer.writerow([r["sweep"], "[" + ",".join(map(str, r["L"])) + "]", r["P"],
                             f"{r['dsc']:.6f}", f"{r['iou']:.6f}"])
