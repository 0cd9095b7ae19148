"""Training objectives and overlap metrics for binary segmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .tensor import Tensor


class DataError(ValueError):
    pass


def _binary_target(target, shape) -> np.ndarray:
    t = np.asarray(target)
    if t.shape != tuple(shape):
        raise DataError(f"target shape {t.shape} != logits shape {tuple(shape)}")
    if not np.isin(t, (0, 1)).all():
        raise DataError("target mask must contain only 0 and 1")
    return t


def bce_loss(logits: Tensor, target) -> Tensor:
    return F.bce_with_logits(logits, _binary_target(target, logits.shape))


def iou_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    """Soft Jaccard loss over every pixel of the batch."""
    t = Tensor(_binary_target(target, logits.shape).astype(logits.dtype))
    p = F.sigmoid(logits)
    inter = (p * t).sum()
    union = p.sum() + t.sum() - inter
    return 1.0 - (inter + smooth) / (union + smooth)


def combined_loss(logits: Tensor, target, kind: str = "bce") -> Tensor:
    if kind == "bce":
        return bce_loss(logits, target)
    if kind in ("bce+iou", "bce_iou"):
        return bce_loss(logits, target) + iou_loss(logits, target)
    raise ValueError(f"unknown loss {kind!r}; expected 'bce' or 'bce+iou'")


def dsc(pred, target) -> float:
    a, b = np.asarray(pred, dtype=bool), np.asarray(target, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(pred, target) -> float:
    a, b = np.asarray(pred, dtype=bool), np.asarray(target, dtype=bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def binarize(logits) -> np.ndarray:
    """sigma(z) > 0.5, i.e. z > 0."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data > 0


@dataclass
class EvalResult:
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, sample_id: str, pred, target) -> None:
        self.per_image.append((sample_id, dsc(pred, target), iou(pred, target)))

    @property
    def dsc(self) -> float:
        return float(np.mean([r[1] for r in self.per_image])) if self.per_image else float("nan")

    @property
    def iou(self) -> float:
        return float(np.mean([r[2] for r in self.per_image])) if self.per_image else float("nan")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "dsc", "iou"])
            for sid, d, j in self.per_image:
                writer.writerow([sid, f"{d:.6f}", f"{j:.6f}"])
            writer.writerow(["mean", f"{self.dsc:.6f}", f"{self.iou:.6f}"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "EvalResult":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls([(r[0], float(r[1]), float(r[2])) for r in rows[1:] if r[0] != "mean"])
