"""Registry of finite-difference checks over every differentiable op and composite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .decoder import Gate
from .encoder import PatcherBlock
from .gradcheck import grad_check
from .losses import iou_loss
from .model import Patcher
from .nn import Module
from .patching import PatchGrid, PatchSpec, partition, reassemble
from .tensor import Tensor
from .transformer import EfficientSelfAttention, MixFFN, StageConfig, TransformerStack

OP_TOL = 1e-3
MODEL_TOL = 1e-2


@dataclass
class Check:
    name: str
    run: Callable[[], float]
    tol: float


def _u(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float32))


def _weights(rng, n):
    """Fixed random weighting so a plain sum does not hide sign errors."""
    return Tensor(rng.uniform(0.5, 1.5, n).astype(np.float32))


def _wsum(t: Tensor, w: Tensor) -> Tensor:
    return (t.reshape(-1) * w).sum()


def randomize_for_check(model: Module, rng: np.random.Generator) -> None:
    """Well-conditioned random parameter point: fan-in scaled uniform weights,
    biases uniform in [-0.5, 0.5], norm scales uniform in [0.5, 1.5]."""
    for name, p in model.named_parameters().items():
        if p.ndim == 1:
            lo, hi = (0.5, 1.5) if "norm" in name and name.endswith("weight") else (-0.5, 0.5)
            p.data = rng.uniform(lo, hi, p.shape).astype(np.float32)
        else:
            fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
            a = np.sqrt(3.0 / fan_in)
            p.data = rng.uniform(-a, a, p.shape).astype(np.float32)


def _unary(fn, shape, lo=-1.0, hi=1.0):
    def run():
        rng = np.random.default_rng(0)
        x = _u(rng, *shape, lo=lo, hi=hi)
        w = _weights(rng, int(np.prod(fn(x).shape)))
        return grad_check(lambda x: _wsum(fn(x), w), x)
    return run


def _binary(fn, sa, sb, lo=-1.0, hi=1.0):
    def run():
        rng = np.random.default_rng(0)
        a, b = _u(rng, *sa), _u(rng, *sb, lo=lo, hi=hi)
        w = _weights(rng, int(np.prod(fn(a, b).shape)))
        return grad_check(lambda a, b: _wsum(fn(a, b), w), [a, b])
    return run


def _module(build, shape, max_elems=None):
    def run():
        rng = np.random.default_rng(0)
        mod, fwd = build(rng)
        randomize_for_check(mod, rng)
        x = _u(rng, *shape)
        w = _weights(rng, int(np.prod(fwd(x).shape)))
        tensors = [x] + mod.parameters()
        return grad_check(lambda *_: _wsum(fwd(x), w), tensors, max_elems=max_elems)
    return run


def _conv(groups):
    def run():
        rng = np.random.default_rng(0)
        x = _u(rng, 2, 3 * (groups if groups > 1 else 1), 5, 5)
        C = x.shape[1]
        wt = _u(rng, C if groups > 1 else 4, C // groups, 3, 3)
        b = _u(rng, wt.shape[0])
        w = _weights(rng, 2 * wt.shape[0] * 25)
        return grad_check(lambda x, wt, b: _wsum(F.conv2d(x, wt, b, padding=1, groups=groups), w), [x, wt, b])
    return run


def _layer_norm():
    rng = np.random.default_rng(0)
    x, g, b = _u(rng, 3, 6), _u(rng, 6, lo=0.5, hi=1.5), _u(rng, 6)
    w = _weights(rng, 18)
    return grad_check(lambda x, g, b: _wsum(F.layer_norm(x, g, b), w), [x, g, b])


def _bce():
    rng = np.random.default_rng(0)
    z = _u(rng, 2, 1, 4, 4, lo=-3, hi=3)
    t = (rng.uniform(size=z.shape) > 0.5).astype(np.float32)
    return grad_check(lambda z: F.bce_with_logits(z, t), z)


def _iou():
    rng = np.random.default_rng(0)
    z = _u(rng, 2, 1, 4, 4, lo=-3, hi=3)
    t = (rng.uniform(size=z.shape) > 0.5).astype(np.float32)
    return grad_check(lambda z: iou_loss(z, t), z)


def _partition():
    rng = np.random.default_rng(0)
    x = _u(rng, 1, 2, 4, 4)
    spec = PatchSpec(2, 1, 1)
    w = _weights(rng, 4 * 2 * 16)
    return grad_check(lambda x: _wsum(partition(x, spec)[0], w), x)


def _reassemble():
    rng = np.random.default_rng(0)
    spec = PatchSpec(4, 2, 2)
    grid = PatchGrid(2, 2, 1, 8, 8, spec)
    f = _u(rng, 4, 3, spec.M, spec.M)
    w = _weights(rng, 3 * 4 * 4)
    return grad_check(lambda f: _wsum(reassemble(f, grid), w), f)


def _end_to_end():
    rng = np.random.default_rng(0)
    model = Patcher.tiny(seed=0)
    randomize_for_check(model, rng)
    x = _u(rng, 1, 1, 16, 16)
    t = (rng.uniform(size=x.shape) > 0.5).astype(np.float32)
    return grad_check(lambda *_: F.bce_with_logits(model(x), t), model.parameters(), max_elems=4)


def _attention(rng):
    m = EfficientSelfAttention(8, 2, 2, rng)
    return m, m


def _mix_ffn(rng):
    m = MixFFN(4, 4, rng)
    return m, m


def _vit_stack(rng):
    m = TransformerStack(StageConfig(8, 2, 2, 2), rng)
    return m, m


def _gate(rng):
    g = Gate(32, (8, 8, 8, 4), rng)
    return g, lambda x: F.concat(g([x[:, i * 8:(i + 1) * 8] for i in range(4)]), axis=1)


def _patcher_block(rng):
    b = PatcherBlock(2, PatchSpec(8, 2, 2), StageConfig(8, 1, 2, 2), rng)
    return b, b


def registry() -> list[Check]:
    return [
        Check("add", _binary(F.add, (3, 4), (4,)), OP_TOL),
        Check("sub", _binary(F.sub, (3, 4), (3, 4)), OP_TOL),
        Check("mul", _binary(F.mul, (2, 3, 4), (3, 4)), OP_TOL),
        Check("div", _binary(F.div, (3, 4), (3, 4), lo=0.5, hi=1.5), OP_TOL),
        Check("neg", _unary(F.neg, (5,)), OP_TOL),
        Check("power", _unary(lambda x: F.power(x, 3.0), (5,)), OP_TOL),
        Check("exp", _unary(F.exp, (5,)), OP_TOL),
        Check("log", _unary(F.log, (5,), lo=0.5, hi=1.5), OP_TOL),
        Check("relu", _unary(F.relu, (4, 5)), OP_TOL),
        Check("gelu", _unary(F.gelu, (4, 5)), OP_TOL),
        Check("sigmoid", _unary(F.sigmoid, (4, 5), lo=-4, hi=4), OP_TOL),
        Check("sum", _unary(lambda x: F.sum(x, axis=1, keepdims=True), (3, 4)), OP_TOL),
        Check("mean", _unary(lambda x: F.mean(x, axis=0), (3, 4)), OP_TOL),
        Check("reshape", _unary(lambda x: F.reshape(x, (4, 3)), (3, 4)), OP_TOL),
        Check("transpose", _unary(lambda x: F.transpose(x, (2, 0, 1)), (2, 3, 4)), OP_TOL),
        Check("expand", _unary(lambda x: F.expand(x, (2, 3, 4)), (2, 1, 4)), OP_TOL),
        Check("getitem", _unary(lambda x: x[:, 1:3], (3, 4)), OP_TOL),
        Check("concat", _binary(lambda a, b: F.concat([a, b], axis=1), (2, 3), (2, 2)), OP_TOL),
        Check("pad2d_zeros", _unary(lambda x: F.pad2d(x, (1, 2, 0, 1)), (1, 2, 3, 3)), OP_TOL),
        Check("pad2d_reflect", _unary(lambda x: F.pad2d(x, (1, 1, 2, 1), "reflect"), (1, 2, 3, 4)), OP_TOL),
        Check("matmul", _binary(F.matmul, (2, 3, 4), (4, 5)), OP_TOL),
        Check("conv2d", _conv(1), OP_TOL),
        Check("conv2d_depthwise", _conv(3), OP_TOL),
        Check("layer_norm", _layer_norm, OP_TOL),
        Check("softmax", _unary(lambda x: F.softmax(x, axis=-1), (3, 4)), OP_TOL),
        Check("bilinear_resize", _unary(lambda x: F.bilinear_resize(x, 4, 4), (1, 1, 2, 2)), OP_TOL),
        Check("bce_with_logits", _bce, OP_TOL),
        Check("iou_loss", _iou, OP_TOL),
        Check("partition", _partition, OP_TOL),
        Check("reassemble", _reassemble, OP_TOL),
        Check("efficient_self_attention", _module(_attention, (2, 16, 8)), OP_TOL),
        Check("mix_ffn", _module(_mix_ffn, (1, 9, 4)), OP_TOL),
        Check("moe_gate", _module(_gate, (1, 32, 4, 4)), OP_TOL),
        Check("vit_stack", _module(_vit_stack, (2, 16, 8)), MODEL_TOL),
        Check("patcher_block", _module(_patcher_block, (1, 2, 16, 16), max_elems=6), MODEL_TOL),
        Check("patcher_end_to_end", _end_to_end, MODEL_TOL),
    ]


def run_all(checks: list[Check] | None = None, echo: Callable[[str], None] | None = print) -> list[tuple[str, float, float, bool]]:
    rows = []
    for check in checks if checks is not None else registry():
        err = check.run()
        ok = err < check.tol
        rows.append((check.name, err, check.tol, ok))
        if echo:
            echo(f"{check.name:<28s} {err:10.3e}  tol {check.tol:.0e}  {'ok' if ok else 'FAIL'}")
    return rows
