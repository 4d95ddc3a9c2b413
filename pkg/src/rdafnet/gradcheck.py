"""Finite-difference checks of every differentiable op and of whole blocks, in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .blocks import RDAFB, AttentionFusionModule, AttentionModule, RDAFBConfig
from .losses import frequency_loss, l1_loss
from .network import NetworkConfig, RDAFNet
from .tensor import Tensor, finite_diff_grad, rel_error

TOLERANCE = 1e-3


def _max_error(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> float:
    for x in inputs:
        x.grad = None
    fn().backward()
    worst = 0.0
    for x in inputs:
        num = finite_diff_grad(lambda _: fn(), x)
        worst = max(worst, rel_error(x.grad, num))
    return worst


def _away_from_zero(rng, shape, lo=0.1):
    # keeps relu/abs kinks out of the difference stencil
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(lo, 1.0, shape)


def _randomize(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(0, scale, p.shape)
    return module


def op_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    def var(*shape, data=None):
        return Tensor(rng.normal(size=shape) if data is None else data, dtype=np.float64, requires_grad=True)

    def head(y):
        r = Tensor(rng.normal(size=y.shape))
        return lambda out: T.sum_(T.mul(out, r))

    out = []

    def check(name, build, inputs):
        w = head(build())
        out.append((name, _max_error(lambda: w(build()), inputs)))

    a, b = var(2, 3, 4, 4), var(2, 3, 4, 4)
    check("add", lambda: T.add(a, b), [a, b])
    check("sub", lambda: T.sub(a, b), [a, b])
    check("mul", lambda: T.mul(a, b), [a, b])
    check("scale", lambda: T.scale(a, -1.7), [a])
    k = var(2, 3, 4, 4, data=_away_from_zero(rng, (2, 3, 4, 4)))
    check("relu", lambda: T.relu(k), [k])
    check("abs", lambda: T.abs_(k), [k])
    check("sigmoid", lambda: T.sigmoid(a), [a])
    pos = var(2, 3, 4, 4, data=rng.uniform(0.2, 2.0, (2, 3, 4, 4)))
    check("sqrt", lambda: T.sqrt(pos), [pos])
    check("square", lambda: T.square(a), [a])
    cl = var(1, 2, 4, 4, data=rng.choice([-2.0, 0.0, 2.0], (1, 2, 4, 4)) + rng.uniform(-0.5, 0.5, (1, 2, 4, 4)))
    check("clamp", lambda: T.clamp(cl, -1.0, 1.0), [cl])
    c = var(2, 5, 4, 4)
    check("concat_channels", lambda: T.concat_channels([a, c]), [a, c])
    check("channel_slice", lambda: T.channel_slice(c, 1, 4), [c])
    out.append(("sum", _max_error(lambda: T.sum_(T.square(a)), [a])))
    out.append(("mean", _max_error(lambda: T.mean(T.square(a)), [a])))

    x, w, bias = var(2, 3, 7, 6), var(4, 3, 3, 3), var(4)
    check("conv2d 3x3", lambda: T.conv2d(x, w, bias, 1, 1), [x, w, bias])
    check("conv2d 3x3 stride 2", lambda: T.conv2d(x, w, bias, 2, 1), [x, w, bias])
    w1 = var(5, 3, 1, 1)
    check("conv2d 1x1", lambda: T.conv2d(x, w1, bias=None), [x, w1])
    xt, wt, bt = var(1, 3, 4, 5), var(3, 2, 4, 4), var(2)
    check("conv_transpose2d", lambda: T.conv_transpose2d(xt, wt, bt, 2, 1), [xt, wt, bt])
    wd, bd = var(3, 1, 3, 3), var(3)
    check("depthwise_conv2d", lambda: T.depthwise_conv2d(x, wd, bd), [x, wd, bd])

    f = var(1, 2, 5, 6)
    rr, ri = rng.normal(size=f.shape), rng.normal(size=f.shape)

    def spectrum():
        g = T.fft2(f)
        return T.add(T.sum_(T.mul(g.real, Tensor(rr))), T.sum_(T.mul(g.imag, Tensor(ri))))

    out.append(("fft2", _max_error(spectrum, [f])))
    p, q = var(1, 3, 6, 6), Tensor(rng.normal(size=(1, 3, 6, 6)))
    out.append(("l1_loss", _max_error(lambda: l1_loss(p, q), [p])))
    out.append(("frequency_loss", _max_error(lambda: frequency_loss(p, q), [p])))
    return out


def block_checks(rng: np.random.Generator, include_stage: bool = True) -> list[tuple[str, float]]:
    out = []
    am = _randomize(AttentionModule(6, dtype=np.float64), rng)
    x = Tensor(rng.normal(size=(1, 6, 5, 5)), requires_grad=True)
    r = Tensor(rng.normal(size=(1, 6, 5, 5)))
    out.append(("attention module", _max_error(lambda: T.sum_(T.mul(am(x), r)),
                                               [x, *am.parameters()])))

    afm = _randomize(AttentionFusionModule(3, 4, dtype=np.float64), rng)
    maps = [Tensor(rng.uniform(0.05, 0.95, (1, 4, 5, 5)), requires_grad=True) for _ in range(3)]
    r = Tensor(rng.normal(size=(1, 4, 5, 5)))
    out.append(("attention fusion module", _max_error(lambda: T.sum_(T.mul(afm(maps), r)),
                                                      [*maps, *afm.parameters()])))

    block = _randomize(RDAFB(RDAFBConfig(conv_layers=3, filters=8), dtype=np.float64), rng)
    xb = Tensor(rng.normal(size=(1, 8, 6, 6)), requires_grad=True)
    rb = Tensor(rng.normal(size=(1, 8, 6, 6)))
    out.append(("RDAFB C=3 F=8 6x6", _max_error(lambda: T.sum_(T.mul(block(xb), rb)),
                                                [xb, *block.parameters()])))

    if include_stage:
        cfg = NetworkConfig(stages=2, blocks_per_stage=(1, 1), block=RDAFBConfig(conv_layers=2, filters=4),
                            base_filters=4, head_kernel=3)
        net = RDAFNet(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
        img = Tensor(rng.uniform(-1, 1, (1, 3, 6, 6)), requires_grad=True)
        rs = [Tensor(rng.normal(size=(1, 3, 6, 6))) for _ in range(2)]

        def loss():
            outs = net(img)
            return T.add(*(T.sum_(T.mul(o.restored, ri)) for o, ri in zip(outs, rs)))

        out.append(("two-stage network", _max_error(loss, [img, *net.parameters()])))
    return out


def run(seed: int = 0, include_stage: bool = True) -> list[tuple[str, float]]:
    """All checks as ``(name, max relative error)``."""
    rng = np.random.default_rng(seed)
    return op_checks(rng) + block_checks(rng, include_stage)
