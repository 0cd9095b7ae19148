"""Optimisers, learning-rate schedule, the training loop and checkpoint I/O."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Sample, augment, augment_rng
from .losses import EvalResult, binarize, combined_loss
from .nn import Module
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

MAGIC = b"PTCH"
VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- optimisers ------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam; ``weight_decay > 0`` gives decoupled (AdamW) decay.

    Decay skips 1-D parameters (biases and norm affines).
    """

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = p.data
            if self.weight_decay and p.ndim > 1:
                data = data - np.float32(lr * self.weight_decay) * data
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (data - lr * update).astype(np.float32)

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.step_count], dtype=np.float32)}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["opt.step"][0])
        for name, p in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"opt.{slot}.{name}"
                if key not in state or state[key].shape != p.shape:
                    raise CheckpointError(f"optimizer state {key!r} missing or mis-shaped")
                store[name] = state[key].astype(np.float32).copy()


def AdamW(params: dict[str, Tensor], weight_decay: float = 0.01, **kwargs) -> Adam:
    return Adam(params, weight_decay=weight_decay, **kwargs)


def make_optimizer(kind: str, params: dict[str, Tensor], weight_decay: float = 0.01) -> Adam:
    if kind == "adam":
        return Adam(params)
    if kind == "adamw":
        return AdamW(params, weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- schedule ---------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_steps: int
    power: float = 0.9


def poly_lr(step: int, sched: Schedule) -> float:
    """base * (1 - step/total)^power, 0 once step >= total."""
    if step >= sched.total_steps:
        return 0.0
    return sched.base_lr * (1.0 - step / sched.total_steps) ** sched.power


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    config_hash: int
    tensors: dict[str, np.ndarray]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}

    @property
    def optimizer(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("opt.")}

    @property
    def step(self) -> int:
        s = self.tensors.get("opt.step")
        return 0 if s is None else int(s[0])


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<III", VERSION, ckpt.config_hash & 0xFFFFFFFF, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, chash, count = struct.unpack("<III", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt tensor name at byte {pos}") from exc
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last tensor")
    return Checkpoint(chash, tensors)


def save_checkpoint(path: str | Path, model: Module, optimizer: Adam | None = None,
                    config_hash: int = 0) -> None:
    tensors = {n: p.data for n, p in model.named_parameters().items()}
    if optimizer is not None:
        tensors.update(optimizer.state())
    Path(path).write_bytes(encode_checkpoint(Checkpoint(config_hash, tensors)))


def load_checkpoint(path: str | Path, config_hash: int | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(blob)
    if config_hash is not None and ckpt.config_hash != config_hash & 0xFFFFFFFF:
        raise CheckpointError(f"config hash mismatch: checkpoint {ckpt.config_hash:#010x}, "
                              f"config {config_hash & 0xFFFFFFFF:#010x}")
    return ckpt


def load_into(model: Module, ckpt: Checkpoint) -> None:
    params = model.named_parameters()
    stored = ckpt.params
    for name, p in params.items():
        if name not in stored:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if stored[name].shape != p.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {stored[name].shape} "
                                  f"!= model shape {p.shape}")
    extra = sorted(set(stored) - set(params))
    if extra:
        raise CheckpointError(f"tensor {extra[0]!r} in checkpoint has no model counterpart")
    for name, p in params.items():
        p.data = stored[name].copy()


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 0.01
    power: float = 0.9
    loss: str = "bce"
    augment: bool = True
    crop: int = 256
    scale: tuple[float, float] = (0.7, 2.0)
    clip: float = 0.0


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_dsc: float = float("nan")
    final_step: int = 0

    @property
    def losses(self) -> list[float]:
        return [row["train_loss"] for row in self.history]


def stack_batch(samples: list[Sample]) -> tuple[Tensor, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return Tensor(images), masks


def predict_logits(model: Module, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return model(Tensor(np.asarray(images, dtype=np.float32))).data


def evaluate(model: Module, samples: list[Sample], batch_size: int = 8) -> EvalResult:
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    result = EvalResult()
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        shapes = {s.image.shape for s in chunk}
        groups = [chunk] if len(shapes) == 1 else [[s] for s in chunk]
        for group in groups:
            logits = predict_logits(model, np.stack([s.image for s in group]))
            for s, z in zip(group, logits):
                result.add(s.id, binarize(z), s.mask.astype(bool))
    return result


def _clip_grads(params: dict[str, Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = np.float32(max_norm / (total + 1e-12))
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale


def train(model: Module, train_set: list[Sample], val_set: list[Sample] | None, cfg: TrainConfig,
          seed: int = 0, out_dir: str | Path | None = None, config_hash: int = 0,
          resume: Checkpoint | None = None, stop_at: int | None = None) -> TrainResult:
    """Run the optimisation loop; batches and augmentation depend only on (seed, step).

    ``resume`` restores parameters and optimiser state and continues from its
    step; ``stop_at`` ends the run early without changing the schedule.
    """
    if not train_set:
        raise ValueError("training set is empty")
    n = len(train_set)
    spe = math.ceil(n / cfg.batch_size)
    sched = Schedule(cfg.lr, cfg.epochs * spe, cfg.power)
    params = model.named_parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.weight_decay)
    start = 0
    if resume is not None:
        load_into(model, resume)
        opt.load_state(resume.optimizer)
        start = opt.step_count
    end = sched.total_steps if stop_at is None else min(stop_at, sched.total_steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = TrainResult()
    best = -1.0
    order = None
    for step in range(start, end):
        epoch, pos = divmod(step, spe)
        if pos == 0 or order is None:
            order = np.random.default_rng([seed, epoch]).permutation(n)
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        batch = []
        for i in idx:
            s = train_set[int(i)]
            if cfg.augment:
                s = augment(s, augment_rng(seed, int(i), epoch), crop=cfg.crop, scale_range=cfg.scale)
            batch.append(s)
        images, masks = stack_batch(batch)

        lr = poly_lr(step, sched)
        logits = model(images)
        loss = combined_loss(logits, masks, cfg.loss)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise TrainingError(f"non-finite loss {loss_value} at step {step}")
        model.zero_grad()
        backward(loss)
        if cfg.clip > 0:
            _clip_grads(params, cfg.clip)
        opt.step(lr)

        row = {"step": step, "lr": lr, "train_loss": loss_value, "val_dsc": None, "val_iou": None}
        if pos == spe - 1 and val_set:
            ev = evaluate(model, val_set, cfg.batch_size)
            row["val_dsc"], row["val_iou"] = ev.dsc, ev.iou
            log.info("step %d epoch %d loss %.4f val dsc %.4f iou %.4f", step, epoch, loss_value, ev.dsc, ev.iou)
            if ev.dsc > best:
                best = ev.dsc
                if out is not None:
                    save_checkpoint(out / "best.ckpt", model, opt, config_hash)
        result.history.append(row)

    result.best_dsc = best if best >= 0 else float("nan")
    result.final_step = end
    if out is not None:
        save_checkpoint(out / "last.ckpt", model, opt, config_hash)
        if not (out / "best.ckpt").exists():
            save_checkpoint(out / "best.ckpt", model, opt, config_hash)
        write_log(out / "log.csv", result.history)
    return result


def write_log(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "train_loss", "val_dsc", "val_iou"])
        for row in history:
            writer.writerow([row["step"], repr(row["lr"]), repr(row["train_loss"]),
                             "" if row["val_dsc"] is None else f"{row['val_dsc']:.6f}",
                             "" if row["val_iou"] is None else f"{row['val_iou']:.6f}"])
