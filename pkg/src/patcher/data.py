"""Sample loading, the synthetic blob dataset, augmentation and splitting."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .functional import bilinear_matrix
from .losses import DataError

STROKE_SUFFIXES = ("_eadc", "_dwi")


@dataclass
class Sample:
    id: str
    image: np.ndarray   # (C, H, W) float32 in [0, 1]
    mask: np.ndarray    # (1, H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise DataError(f"{self.id}: bad array ranks image {self.image.shape}, mask {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DataError(f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape[1:]} differ")


# -- PNG ingestion --------------------------------------------------------------

def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path.stem}: cannot read {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise DataError(f"{path.stem}: expected 8-bit image, got {arr.dtype}")
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def _case_id(stem: str) -> tuple[str, int]:
    for order, suffix in enumerate(STROKE_SUFFIXES):
        if stem.endswith(suffix):
            return stem[: -len(suffix)], order
    return stem, -1


def load_dir(images_dir: str | Path, masks_dir: str | Path) -> list[Sample]:
    """Pair ``images_dir/*.png`` with ``masks_dir/<stem>.png``.

    Two grayscale files ``<case>_eadc.png`` and ``<case>_dwi.png`` are merged
    into one 2-channel sample ``<case>``.  Mask pixels >= 128 become 1.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    groups: dict[str, list[tuple[int, Path]]] = {}
    for path in sorted(images_dir.glob("*.png")):
        case, order = _case_id(path.stem)
        groups.setdefault(case, []).append((order, path))
    masks = {p.stem: p for p in masks_dir.glob("*.png")}

    samples = []
    for case in sorted(groups):
        parts = sorted(groups[case])
        orders = [o for o, _ in parts]
        if len(parts) > 1 and orders != list(range(len(STROKE_SUFFIXES))):
            raise DataError(f"{case}: expected exactly {STROKE_SUFFIXES} channel files, got "
                            f"{[p.name for _, p in parts]}")
        if case not in masks:
            raise DataError(f"{case}: no matching mask in {masks_dir}")
        channels = [_read_png(p) for _, p in parts]
        if len({c.shape[1:] for c in channels}) != 1:
            raise DataError(f"{case}: channel files differ in size")
        image = np.concatenate(channels, axis=0).astype(np.float32) / 255.0
        raw = _read_png(masks[case])
        if raw.shape[0] != 1:
            raw = raw[:1]
        if raw.shape[1:] != image.shape[1:]:
            raise DataError(f"{case}: image {image.shape[1:]} and mask {raw.shape[1:]} differ in size")
        samples.append(Sample(case, image, (raw >= 128).astype(np.uint8)))
    unmatched = sorted(set(masks) - set(groups))
    if unmatched:
        raise DataError(f"{unmatched[0]}: mask has no matching image")
    return samples


def save_sample(sample: Sample, images_dir: str | Path, masks_dir: str | Path) -> None:
    """Write a sample as 8-bit PNGs (the inverse of :func:`load_dir` for 1/3 channels)."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 2:
        for ch, suffix in zip(pixels, STROKE_SUFFIXES):
            Image.fromarray(ch).save(images_dir / f"{sample.id}{suffix}.png")
    else:
        arr = pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0)
        Image.fromarray(arr).save(images_dir / f"{sample.id}.png")
    Image.fromarray(sample.mask[0] * 255).save(masks_dir / f"{sample.id}.png")


# -- synthetic blobs --------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 16
    size: int = 32
    blobs: tuple[int, int] = (1, 3)
    noise: float = 0.05
    channels: int = 1


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float
    intensity: float


def ellipse_mask(h: int, w: int, e: Ellipse) -> np.ndarray:
    """Pixels whose centre lies inside the rotated ellipse."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy + 0.5 - e.cy, xx + 0.5 - e.cx
    c, s = np.cos(e.theta), np.sin(e.theta)
    u = (c * dx + s * dy) / e.rx
    v = (-s * dx + c * dy) / e.ry
    return u * u + v * v <= 1.0


def synth_ellipses(spec: SynthSpec, index: int) -> list[Ellipse]:
    rng = np.random.default_rng([spec.seed, index, 0])
    lo, hi = spec.blobs
    n = int(rng.integers(lo, hi + 1))
    size = spec.size
    out = []
    for _ in range(n):
        ry, rx = rng.uniform(size / 10, size / 4, 2)
        cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
        out.append(Ellipse(float(cy), float(cx), float(ry), float(rx),
                           float(rng.uniform(0, np.pi)), float(rng.uniform(0.6, 0.9))))
    return out


def synth_generate(spec: SynthSpec) -> list[Sample]:
    """Dark noisy background with bright random ellipses; mask = their union."""
    samples = []
    size = spec.size
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i, 1])
        image = np.full((size, size), 0.1)
        mask = np.zeros((size, size), dtype=bool)
        for e in synth_ellipses(spec, i):
            inside = ellipse_mask(size, size, e)
            image[inside] = e.intensity
            mask |= inside
        gains = rng.uniform(0.8, 1.0, spec.channels) if spec.channels > 1 else np.ones(1)
        stack = np.stack([image * g for g in gains])
        if spec.noise > 0:
            stack = stack + rng.normal(0.0, spec.noise, stack.shape)
        stack = np.clip(stack, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(f"synth_{i:04d}", stack, mask[None].astype(np.uint8)))
    return samples


# -- augmentation -----------------------------------------------------------------

def augment_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Per-sample generator so augmentation is replayable independent of batching."""
    return np.random.default_rng([seed ^ index, epoch])


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    C, H, W = image.shape
    rh = bilinear_matrix(H, out_h, np.float64)
    rw = bilinear_matrix(W, out_w, np.float64)
    return (rh @ image.astype(np.float64) @ rw.T).astype(np.float32)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = mask.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * H / out_h).astype(int), H - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * W / out_w).astype(int), W - 1)
    return mask[..., rows[:, None], cols[None, :]]


def augment(sample: Sample, rng: np.random.Generator, crop: int = 256,
            scale_range: tuple[float, float] = (0.7, 2.0), scale: float | None = None,
            center: bool = False) -> Sample:
    """Random rescale (bilinear image, nearest mask) followed by a ``crop`` x ``crop`` window."""
    if scale is None:
        scale = float(rng.uniform(*scale_range))
    _, H, W = sample.image.shape
    nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    image = resize_image(sample.image, nh, nw) if (nh, nw) != (H, W) else sample.image
    mask = resize_nearest(sample.mask, nh, nw) if (nh, nw) != (H, W) else sample.mask
    ph, pw = max(0, crop - nh), max(0, crop - nw)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        mask = np.pad(mask, ((0, 0), (0, ph), (0, pw)))
    H2, W2 = image.shape[1:]
    if center:
        y0, x0 = (H2 - crop) // 2, (W2 - crop) // 2
    else:
        y0 = int(rng.integers(0, H2 - crop + 1))
        x0 = int(rng.integers(0, W2 - crop + 1))
    return Sample(sample.id, np.ascontiguousarray(image[:, y0:y0 + crop, x0:x0 + crop]),
                  np.ascontiguousarray(mask[:, y0:y0 + crop, x0:x0 + crop]))


def split(samples: list[Sample], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then contiguous train/val/test slices."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    sizes = (n_train, n_val, n - n_train - n_val)
    if min(sizes) <= 0:
        raise ValueError(f"split of {n} samples with ratios {ratios} leaves an empty part {sizes}")
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]
