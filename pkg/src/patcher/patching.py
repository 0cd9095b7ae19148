"""Overlapping large-patch partition and reassembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import functional as F
from .tensor import Tensor, make


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    """Large patch side ``L``, context ``P`` per side, small patch side ``S``."""

    L: int
    P: int
    S: int

    def __post_init__(self):
        L, P, S = self.L, self.P, self.S
        if L <= 0 or P < 0 or S <= 0:
            raise GeometryError(f"invalid patch spec L={L}, P={P}, S={S}")
        if L % S or (L + 2 * P) % S:
            raise GeometryError(f"L={L} and L+2P={L + 2 * P} must both be divisible by S={S}")
        if P % S:
            # the centre crop must land on the small-patch grid
            raise GeometryError(f"P={P} must be divisible by S={S}")

    @property
    def window(self) -> int:
        return self.L + 2 * self.P

    @property
    def M(self) -> int:
        """Small-patch grid side of one padded large patch."""
        return self.window // self.S

    @property
    def K(self) -> int:
        """Side of the centre crop kept at reassembly."""
        return self.L // self.S

    @property
    def crop_offset(self) -> int:
        return self.P // self.S


@dataclass(frozen=True)
class PatchGrid:
    n_h: int
    n_w: int
    batch: int
    height: int
    width: int
    spec: PatchSpec

    @property
    def stacked(self) -> int:
        return self.batch * self.n_h * self.n_w


def partition(x: Tensor, spec: PatchSpec) -> tuple[Tensor, PatchGrid]:
    """Cut ``x`` into zero-context-padded large patches stacked on the batch axis.

    Patch ``(b, gy, gx)`` lands at stacked index ``(b * n_h + gy) * n_w + gx``
    and covers source rows ``[gy*L - P, gy*L + L + P)`` (likewise columns).
    """
    B0, C, H, W = x.shape
    L, P, win = spec.L, spec.P, spec.window
    if H % L or W % L:
        raise GeometryError(f"input {H}x{W} is not a multiple of L={L}; pad_to_multiple first")
    grid = PatchGrid(H // L, W // L, B0, H, W, spec)
    nh, nw = grid.n_h, grid.n_w
    xp = np.pad(x.data, ((0, 0), (0, 0), (P, P), (P, P)))
    view = sliding_window_view(xp, (win, win), axis=(2, 3))[:, :, ::L, ::L]
    out = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(B0 * nh * nw, C, win, win)

    def bw(g):
        g = g.reshape(B0, nh, nw, C, win, win)
        gxp = np.zeros_like(xp)
        for gy in range(nh):
            for gx in range(nw):
                gxp[:, :, gy * L:gy * L + win, gx * L:gx * L + win] += g[:, gy, gx]
        return (gxp[:, :, P:P + H, P:P + W],)

    return make("partition", out, (x,), bw), grid


def reassemble(feats: Tensor, grid: PatchGrid) -> Tensor:
    """Keep each patch's centre KxK tile and tile them back into a map."""
    spec = grid.spec
    B, C, Mh, Mw = feats.shape
    if B != grid.stacked:
        raise GeometryError(f"reassemble: batch {B} != {grid.stacked} patches in grid")
    if Mh != spec.M or Mw != spec.M:
        raise GeometryError(f"reassemble: feature side {Mh}x{Mw} != M={spec.M}")
    o, K = spec.crop_offset, spec.K
    tile = feats[:, :, o:o + K, o:o + K]
    tile = tile.reshape(grid.batch, grid.n_h, grid.n_w, C, K, K)
    tile = tile.transpose(0, 3, 1, 4, 2, 5)
    return tile.reshape(grid.batch, C, grid.n_h * K, grid.n_w * K)


def pad_to_multiple(x: Tensor, multiple: int) -> tuple[Tensor, tuple[int, int]]:
    """Zero-pad bottom/right so both spatial sides are multiples of ``multiple``."""
    if multiple <= 0:
        raise ValueError(f"multiple must be positive, got {multiple}")
    H, W = x.shape[-2:]
    ph, pw = -H % multiple, -W % multiple
    if ph == 0 and pw == 0:
        return x, (H, W)
    return F.pad2d(x, (0, ph, 0, pw)), (H, W)


def uncrop(x: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`pad_to_multiple`: keep the top-left ``height`` x ``width``."""
    if x.shape[-2:] == (height, width):
        return x
    return x[..., :height, :width]
