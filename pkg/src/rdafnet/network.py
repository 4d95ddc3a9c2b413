"""Single- and multi-stage deblurring networks assembled from attention fusion blocks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import RDAFB, RDB, RDAFBConfig
from .nn import Conv2d, ConvTranspose2d, Module
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 1
    blocks_per_stage: tuple[int, ...] = (16,)
    block: RDAFBConfig = field(default_factory=RDAFBConfig)
    base_filters: int = 128
    in_channels: int = 3
    head_kernel: int = 7
    variant: str = "rdaf"
    # growth rate for variant="rdb"; None picks the one matching the RDAFB size
    rdb_growth: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if not 1 <= self.stages <= 3:
            raise ValueError(f"stages must be 1..3, got {self.stages}")
        if len(self.blocks_per_stage) != self.stages:
            raise ValueError(f"blocks_per_stage {self.blocks_per_stage} does not have {self.stages} entries")
        if self.head_kernel % 2 == 0:
            raise ValueError(f"head_kernel must be odd, got {self.head_kernel}")
        if self.variant not in ("rdaf", "rdb"):
            raise ValueError(f"variant must be 'rdaf' or 'rdb', got {self.variant!r}")
        if self.block.filters != self.base_filters:
            object.__setattr__(self, "block", replace(self.block, filters=self.base_filters))


def single_stage_config(**kw) -> NetworkConfig:
    return NetworkConfig(stages=1, blocks_per_stage=(16,), **kw)


def multi_stage_config(**kw) -> NetworkConfig:
    return NetworkConfig(stages=3, blocks_per_stage=(10, 10, 12), **kw)


@dataclass
class StageOutput:
    restored: Tensor
    features: Tensor
    attention_snapshots: list[tuple[int, str, Tensor]] | None = None


class Stage(Module):
    """conv7x7 -> stride-2 conv -> blocks -> transposed conv -> conv7x7 residual head."""

    def __init__(self, cfg: NetworkConfig, n_blocks: int, rng=None, dtype=np.float32, receives_carry: bool = False):
        f, k = cfg.base_filters, cfg.head_kernel
        self.head = Conv2d(cfg.in_channels, f, k, rng=rng, dtype=dtype)
        self.down = Conv2d(f, f, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        if receives_carry:
            self.csff = Conv2d(f, f, 1, rng=rng, dtype=dtype)
        if cfg.variant == "rdb":
            growth = cfg.rdb_growth or matched_rdb_growth(cfg.block)
            self.blocks = [RDB(f, growth, cfg.block.conv_layers, rng=rng, dtype=dtype) for _ in range(n_blocks)]
        else:
            self.blocks = [RDAFB(cfg.block, rng=rng, dtype=dtype) for _ in range(n_blocks)]
        self.up = ConvTranspose2d(f, f, 4, 2, 1, rng=rng, dtype=dtype)
        self.tail = Conv2d(f, cfg.in_channels, k, rng=rng, dtype=dtype)

    def __call__(self, image: Tensor, carried: tuple[Tensor, Tensor] | None = None,
                 record: bool = False) -> tuple[Tensor, Tensor, Tensor, list]:
        x = self.head(image)
        if carried is not None:
            sam_feat, prev_feat = carried
            x = T.add(x, sam_feat)
        x = self.down(x)
        if carried is not None:
            x = T.add(x, self.csff(prev_feat))
        snaps = []
        for b, block in enumerate(self.blocks):
            x = block(x, record=record)
            if record:
                snaps.extend((b, label, m) for label, m in block.last_maps)
        pre_up = x
        full = self.up(x)
        restored = T.add(image, self.tail(full))
        return restored, pre_up, full, snaps

    def flops(self, h, w):
        f = self.down.cout
        macs, elem, hh, ww = self.head.flops(h, w)
        a, _, hd, wd = self.down.flops(hh, ww)
        macs += a
        if hasattr(self, "csff"):
            macs += self.csff.flops(hd, wd)[0]
            elem += f * (hh * ww + hd * wd)
        for block in self.blocks:
            a, e, _, _ = block.flops(hd, wd)
            macs, elem = macs + a, elem + e
        a, _, hu, wu = self.up.flops(hd, wd)
        macs += a + self.tail.flops(hu, wu)[0]
        return macs, elem + self.tail.cout * h * w, h, w


class SAM(Module):
    """Supervised attention between stages.

    The stage's restored image is turned into a per-channel gate on the
    full-resolution decoder features, which are forwarded to the next stage.
    """

    def __init__(self, filters: int, in_channels: int = 3, rng=None, dtype=np.float32):
        self.filters = filters
        self.feat = Conv2d(filters, filters, 3, rng=rng, dtype=dtype)
        self.gate = Conv2d(in_channels, filters, 1, rng=rng, dtype=dtype)

    def __call__(self, features: Tensor, restored: Tensor) -> Tensor:
        attn = T.sigmoid(self.gate(restored))
        return T.add(T.mul(self.feat(features), attn), features)

    def flops(self, h, w):
        macs = self.feat.flops(h, w)[0] + self.gate.flops(h, w)[0]
        # sigmoid, product, residual add
        return macs, 3 * self.filters * h * w, h, w


class RDAFNet(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32, init: bool = True):
        self.cfg = cfg
        # init=False leaves every weight at zero
        rng = np.random.default_rng(seed) if init else None
        self.stages = [
            Stage(cfg, n, rng=rng, dtype=dtype, receives_carry=s > 0) for s, n in enumerate(cfg.blocks_per_stage)
        ]
        self.sams = [SAM(cfg.base_filters, cfg.in_channels, rng=rng, dtype=dtype) for _ in range(cfg.stages - 1)]

    def forward_stages(self, image: Tensor, record: bool = False) -> list[StageOutput]:
        if image.data.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W) image, got {image.shape}")
        h, w = image.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"image height and width must be even, got {h}x{w}; "
                             "reflect-pad to even size (see rdafnet.data.pad_to_even)")
        outputs = []
        carried = None
        for s, stage in enumerate(self.stages):
            restored, pre_up, full, snaps = stage(image, carried, record=record)
            outputs.append(StageOutput(restored, pre_up, [(b, lbl, m) for b, lbl, m in snaps] if record else None))
            if s < len(self.sams):
                carried = (self.sams[s](full, restored), pre_up)
        return outputs

    __call__ = forward_stages

    def deblur(self, image: Tensor) -> Tensor:
        """Inference: last stage's output clamped to [-1, 1]."""
        out = self.forward_stages(Tensor(image.data))[-1].restored
        return Tensor(np.clip(out.data, -1.0, 1.0))

    def flops(self, h, w):
        macs = elem = 0
        for m in (*self.stages, *self.sams):
            a, e, _, _ = m.flops(h, w)
            macs, elem = macs + a, elem + e
        return macs, elem, h, w

    def conv_layer_count(self) -> int:
        """Number of 3x3 convolutions inside the stacked blocks."""
        return sum(len(b.convs) for st in self.stages for b in st.blocks)


def stage_forward(net: RDAFNet, image: Tensor, stage: int = 0, carried=None) -> StageOutput:
    restored, pre_up, _, _ = net.stages[stage](image, carried)
    return StageOutput(restored, pre_up)


def multi_stage_forward(net: RDAFNet, image: Tensor, record: bool = False) -> list[StageOutput]:
    return net.forward_stages(image, record=record)


def count_params(cfg: NetworkConfig) -> int:
    """Exact scalar parameter count, biases included."""
    # zero-filled allocation is lazy, so even the full-size build is cheap
    return RDAFNet(cfg, init=False).num_parameters()


def estimate_flops(cfg: NetworkConfig, h: int = 256, w: int = 256, flops_per_mac: int = 1) -> int:
    """Analytic operation count for one ``h`` x ``w`` forward pass.

    Each multiply-accumulate counts ``flops_per_mac``: 1 is the convention
    of common layer profilers, 2 counts the multiply and the add
    separately. Elementwise operations count once per element either way.
    """
    if h % 2 or w % 2:
        raise ValueError(f"input dims must be even, got {h}x{w}")
    macs, elem, _, _ = RDAFNet(cfg, init=False).flops(h, w)
    return int(macs * flops_per_mac + elem)


def matched_rdb_growth(block: RDAFBConfig) -> int:
    """Growth rate whose RDB parameter count is closest to an RDAFB of ``block``."""
    target = RDAFB(block, rng=None).num_parameters()
    f, c = block.filters, block.conv_layers
    best, best_diff = 1, None
    for g in range(1, 4 * f + 1):
        diff = abs(_rdb_params(f, g, c) - target)
        if best_diff is None or diff < best_diff:
            best, best_diff = g, diff
    return best


def _rdb_params(f: int, g: int, c: int) -> int:
    convs = sum(9 * (f + i * g) * g + g for i in range(c))
    return convs + (f + c * g) * f + f


def build_rdb_variant(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> RDAFNet:
    if cfg.variant != "rdb":
        cfg = replace(cfg, variant="rdb")
    return RDAFNet(cfg, seed=seed, dtype=dtype)
