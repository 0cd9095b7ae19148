"""Parameter containers and the basic layers the model is assembled from."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Minimal module tree; parameters are named by dotted attribute path."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def _walk(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value._walk(full + ".")

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        """ParameterStore view: lexicographically ordered name -> tensor."""
        items = dict(self._walk())
        return OrderedDict(sorted(items.items()))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Token-wise affine map; weight stored as (in, out).

    ``init="trunc"`` draws N(0, 0.02) truncated at 2 std; ``init="he"`` draws
    N(0, 2/d_in) for layers feeding a ReLU.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "trunc"):
        if init == "trunc":
            w = trunc_normal(rng, (d_in, d_out))
        elif init == "he":
            w = rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_in, d_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1):
        fan_out = kernel * kernel * c_out // groups
        self.weight = param(rng.normal(0.0, math.sqrt(2.0 / fan_out),
                                       size=(c_out, c_in // groups, kernel, kernel)))
        self.bias = param(np.zeros(c_out))
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class PixelMLP(Module):
    """Per-pixel MLP over the channel axis of an NCHW map, ReLU between layers."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng, init="he") for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x: Tensor) -> Tensor:
        h = x.transpose(0, 2, 3, 1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = F.relu(h)
        return h.transpose(0, 3, 1, 2)
