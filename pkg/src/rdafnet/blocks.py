"""Attention module, attention fusion module and the residual dense attention fusion block.

A block with ``C`` conv layers gates its input with one attention map and
the outputs of convs ``1..C-1`` with fused maps. Attention maps, not
features, are densely connected: the fusion module at position ``i`` sees
the block-input map plus the maps of convs ``1..i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, DepthwiseConv2d, Module
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class RDAFBConfig:
    conv_layers: int = 4
    filters: int = 128
    use_am: bool = True
    use_afm: bool = True
    use_lrl: bool = True
    # gate F_{l,i} with the fused map (False) or the block input F_{l-1} (True)
    eq4_literal: bool = False
    # also gate the last conv output before the residual add
    gate_last_conv: bool = False

    def __post_init__(self):
        if self.conv_layers < 1 or self.filters < 1:
            raise ValueError(f"conv_layers and filters must be positive, got {self.conv_layers}, {self.filters}")
        if self.use_afm and not self.use_am:
            raise ValueError("use_afm requires use_am: the fusion module consumes attention-module maps")

    @property
    def n_gated_convs(self) -> int:
        if not self.use_am:
            return 0
        return self.conv_layers if self.gate_last_conv else self.conv_layers - 1

    @classmethod
    def from_variant(cls, variant: str, **kw) -> RDAFBConfig:
        """Parse an ablation tag such as ``am1_afm0_lrl1``."""
        parts = variant.lower().split("_")
        keys = ("am", "afm", "lrl")
        if len(parts) != 3 or any(not p.startswith(k) or p[len(k):] not in ("0", "1") for p, k in zip(parts, keys)):
            raise ValueError(f"unknown variant {variant!r}; expected amX_afmY_lrlZ with X,Y,Z in {{0,1}}")
        am, afm, lrl = (p[-1] == "1" for p in parts)
        return cls(use_am=am, use_afm=afm, use_lrl=lrl, **kw)

    @property
    def variant(self) -> str:
        return f"am{int(self.use_am)}_afm{int(self.use_afm)}_lrl{int(self.use_lrl)}"


class AttentionModule(Module):
    """Pixel attention: 1x1 conv then sigmoid, one gate per channel and pixel.

    Weights start at zero so every gate opens at 0.5.
    """

    def __init__(self, filters: int, dtype=np.float32):
        self.filters = filters
        self.conv = Conv2d(filters, filters, 1, zero_init=True, dtype=dtype)

    def __call__(self, feature: Tensor) -> Tensor:
        if feature.data.ndim != 4 or feature.shape[1] != self.filters:
            raise ShapeError(f"attention module expects {self.filters} channels, got feature {feature.shape}")
        return T.sigmoid(self.conv(feature))

    def flops(self, h, w):
        macs = self.conv.flops(h, w)[0]
        return macs, self.filters * h * w, h, w


class AttentionFusionModule(Module):
    """Fuse ``k`` attention maps: concat, 1x1 conv to ``filters``, 3x3 depthwise, sigmoid."""

    def __init__(self, n_maps: int, filters: int, rng=None, dtype=np.float32):
        if n_maps < 2:
            raise ValueError(f"fusion needs at least 2 maps, got {n_maps}")
        self.n_maps, self.filters = n_maps, filters
        self.fuse = Conv2d(n_maps * filters, filters, 1, rng=rng, dtype=dtype)
        self.depthwise = DepthwiseConv2d(filters, rng=rng, dtype=dtype)

    def __call__(self, maps: list[Tensor]) -> Tensor:
        if len(maps) != self.n_maps:
            raise ShapeError(f"fusion module built for {self.n_maps} maps, got {len(maps)}")
        ref = maps[0].shape
        for m in maps:
            if m.shape != ref:
                raise ShapeError(f"attention maps must share a shape: {m.shape} vs {ref}")
        return T.sigmoid(self.depthwise(self.fuse(T.concat_channels(maps))))

    def flops(self, h, w):
        macs = self.fuse.flops(h, w)[0] + self.depthwise.flops(h, w)[0]
        return macs, self.filters * h * w, h, w


class RDAFB(Module):
    """Residual dense attention fusion block.

    With ``record`` set on a call, every attention map produced is appended
    to ``self.last_maps`` as ``(label, map)``; labels are ``"input"``,
    ``"am{i}"`` and ``"afm{i}"``.
    """

    def __init__(self, cfg: RDAFBConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        f = cfg.filters
        self.convs = [Conv2d(f, f, 3, rng=rng, dtype=dtype) for _ in range(cfg.conv_layers)]
        n_gated = cfg.n_gated_convs
        if cfg.use_am:
            # index 0 gates the block input; index i gates conv i
            self.ams = [AttentionModule(f, dtype=dtype) for _ in range(n_gated + 1)]
        else:
            self.ams = []
        if cfg.use_afm:
            self.afms = [AttentionFusionModule(i + 1, f, rng=rng, dtype=dtype) for i in range(1, n_gated + 1)]
        else:
            self.afms = []
        self.last_maps: list[tuple[str, Tensor]] = []

    def __call__(self, x: Tensor, record: bool = False) -> Tensor:
        cfg = self.cfg
        if x.data.ndim != 4 or x.shape[1] != cfg.filters:
            raise ShapeError(f"RDAFB expects (N, {cfg.filters}, H, W), got {x.shape}")
        self.last_maps = []
        maps: list[Tensor] = []
        h = x
        if cfg.use_am:
            m0 = self.ams[0](x)
            maps.append(m0)
            h = T.mul(m0, x)
            if record:
                self.last_maps.append(("input", m0))

        n = cfg.conv_layers
        for i in range(1, n + 1):
            last = i == n
            f_i = self.convs[i - 1](h)
            if not last:
                f_i = T.relu(f_i)
            if cfg.use_am and i <= cfg.n_gated_convs:
                m_i = self.ams[i](f_i)
                maps.append(m_i)
                gate = self.afms[i - 1](list(maps)) if cfg.use_afm else m_i
                if record:
                    self.last_maps.append((f"am{i}", m_i))
                    if cfg.use_afm:
                        self.last_maps.append((f"afm{i}", gate))
                target = x if cfg.eq4_literal else f_i
                f_i = T.mul(gate, target)
            h = f_i

        return T.add(x, h) if cfg.use_lrl else h

    def flops(self, h, w):
        macs = elem = 0
        for m in (*self.convs, *self.ams, *self.afms):
            a, e, _, _ = m.flops(h, w)
            macs, elem = macs + a, elem + e
        # relus, gating products, residual add
        elem += self.cfg.filters * h * w * ((self.cfg.conv_layers - 1) + len(self.ams) + int(self.cfg.use_lrl))
        return macs, elem, h, w


class RDB(Module):
    """Residual dense block: densely concatenated conv features, 1x1 local fusion, local residual."""

    def __init__(self, filters: int, growth: int, conv_layers: int = 4, rng=None, dtype=np.float32):
        self.filters, self.growth, self.conv_layers = filters, growth, conv_layers
        self.convs = [Conv2d(filters + i * growth, growth, 3, rng=rng, dtype=dtype) for i in range(conv_layers)]
        self.fusion = Conv2d(filters + conv_layers * growth, filters, 1, rng=rng, dtype=dtype)
        self.last_maps: list[tuple[str, Tensor]] = []

    def __call__(self, x: Tensor, record: bool = False) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(T.relu(conv(T.concat_channels(feats))))
        return T.add(x, self.fusion(T.concat_channels(feats)))

    def flops(self, h, w):
        macs = sum(m.flops(h, w)[0] for m in (*self.convs, self.fusion))
        return macs, (self.growth * self.conv_layers + self.filters) * h * w, h, w
