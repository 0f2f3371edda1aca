"""Residual feature-reutilization inception blocks (ResFRI and Split-ResFRI).

Branch order is 1x1, 1x1->3x3, 1x1->5x5, pool->1x1. With transverse
passages on, the output of branch i goes through a cmbr unit (1x1 conv,
3x3 stride-1 pool, batch norm, ReLU) and is fused with the input group of
branch i+1, either by addition or by channel concatenation. An optional
cmbr projection of the block input is added onto the concatenated branch
outputs as the residual path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analysis import LayerStat
from .layers import ConvBNReLU, Module, Pool2d, bn_stat, conv_stat, make_bn, make_conv
from .tensor import (
    ShapeError, Tensor, add, batchnorm2d, concat_channels, conv2d, pool2d, relu,
    slice_channels,
)

FUSIONS = ("addition", "concatenation")
POOL_KINDS = ("max", "avg")

# (in_channels, n1x1, n3x3_reduce, n3x3, n5x5_reduce, n5x5, pool_proj)
GOOGLENET_INCEPTIONS = {
    "3a": (192, 64, 96, 128, 16, 32, 32),
    "3b": (256, 128, 128, 192, 32, 96, 64),
    "4a": (480, 192, 96, 208, 16, 48, 64),
    "4b": (512, 160, 112, 224, 24, 64, 64),
    "4c": (512, 128, 128, 256, 24, 64, 64),
    "4d": (512, 112, 144, 288, 32, 64, 64),
    "4e": (528, 256, 160, 320, 32, 128, 128),
    "5a": (832, 256, 160, 320, 32, 128, 128),
    "5b": (832, 384, 192, 384, 48, 128, 128),
}


def split_widths(c: int) -> tuple[int, int, int, int]:
    """3:3:1:1 channel split; the last group takes the floor-division remainder."""
    a = 3 * c // 8
    b = c // 8
    return a, a, b, c - 2 * a - b


@dataclass(frozen=True)
class ResFRIConfig:
    in_channels: int
    widths: tuple  # n1x1, n3x3_reduce, n3x3, n5x5_reduce, n5x5, pool_proj
    fusion: str = "addition"
    split: bool = False
    use_residual: bool = True
    use_transverse: bool = True
    passage_prune_ratio: float = 0.0
    branch4_pool: str = "max"
    cmbr_pool: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 6:
            raise ValueError(f"widths needs 6 entries, got {len(self.widths)}")
        if self.in_channels < 1 or min(self.widths) < 1:
            raise ValueError("all widths must be >= 1")
        if self.split and self.in_channels < 8:
            raise ValueError(f"split needs in_channels >= 8, got {self.in_channels}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not 0 <= self.passage_prune_ratio <= 1:
            raise ValueError(f"passage_prune_ratio {self.passage_prune_ratio} outside [0, 1]")
        for kind in (self.branch4_pool, self.cmbr_pool):
            if kind not in POOL_KINDS:
                raise ValueError(f"pool kind must be max or avg, got {kind!r}")

    @classmethod
    def googlenet(cls, name: str, **kwargs) -> "ResFRIConfig":
        c, *w = GOOGLENET_INCEPTIONS[name]
        return cls(c, tuple(w), **kwargs)

    @property
    def branch_specs(self) -> tuple:
        n1, r3, n3, r5, n5, pp = self.widths
        return ((n1,), (r3, n3), (r5, n5), (pp,))

    def group_widths(self) -> tuple[int, int, int, int]:
        c = self.in_channels
        return split_widths(c) if self.split else (c, c, c, c)

    def branch_outputs(self) -> tuple[int, int, int, int]:
        n1, _, n3, _, n5, pp = self.widths
        return n1, n3, n5, pp

    def passage_widths(self) -> list[tuple[int, int]]:
        """(inC, outC) of the cmbr passage feeding branches 2..4."""
        outs, groups = self.branch_outputs(), self.group_widths()
        return [(outs[i], groups[i + 1]) for i in range(3)]

    def branch_inputs(self) -> tuple[int, int, int, int]:
        groups = self.group_widths()
        if not self.use_transverse or self.fusion == "addition":
            return groups
        return (groups[0],) + tuple(2 * g for g in groups[1:])

    def with_(self, **changes) -> "ResFRIConfig":
        return replace(self, **changes)


def output_channels(cfg: ResFRIConfig) -> int:
    return sum(cfg.branch_outputs())


def split_input(x: Tensor, split: bool) -> tuple:
    if not split:
        return (x, x, x, x)
    c = x.shape[1]
    if c < 8:
        raise ShapeError(f"split needs at least 8 channels, got {c}")
    parts, start = [], 0
    for w in split_widths(c):
        parts.append(slice_channels(x, start, start + w))
        start += w
    return tuple(parts)


class CmbrUnit(Module):
    """1x1 conv -> 3x3 stride-1 pool -> batch norm -> ReLU; spatial extents preserved."""

    def __init__(self, in_c: int, out_c: int, rng, dtype=np.float32, pool_kind: str = "max"):
        self.conv = make_conv(in_c, out_c, 1, rng, dtype)
        self.pool_kind = pool_kind
        self.bn = make_bn(out_c, dtype)

    def forward(self, x):
        return cmbr_forward(x, self)

    def trace(self, in_shape, prefix=""):
        out, cs = conv_stat(prefix + "conv", self.conv, in_shape)
        return out, [cs, LayerStat(prefix + "pool", 0, 0, out), bn_stat(prefix + "bn", self.bn, out)]


def cmbr_forward(delta: Tensor, unit: CmbrUnit) -> Tensor:
    if delta.shape[1] != unit.conv.in_channels:
        raise ShapeError(f"cmbr: input C={delta.shape[1]} but unit expects {unit.conv.in_channels}")
    y = conv2d(delta, unit.conv)
    y = pool2d(y, unit.pool_kind, 3, 1, 1)
    return relu(batchnorm2d(y, unit.bn))


def fuse(delta: Tensor, kappa: Tensor, mode: str, unit: CmbrUnit) -> Tensor:
    """Merge the previous branch's output into the next branch's input group."""
    moved = cmbr_forward(delta, unit)
    if moved.shape[0] != kappa.shape[0] or moved.shape[2:] != kappa.shape[2:]:
        raise ShapeError(f"fuse: spatial mismatch {moved.shape} vs {kappa.shape}")
    if mode == "addition":
        if moved.shape[1] != kappa.shape[1]:
            raise ShapeError(f"fuse: addition needs passage outC {moved.shape[1]} == group C {kappa.shape[1]}")
        return add(moved, kappa)
    if mode == "concatenation":
        return concat_channels([moved, kappa])
    raise ValueError(f"unknown fusion mode {mode!r}")


class ResFRIBlock(Module):
    def __init__(self, cfg: ResFRIConfig, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        n1, r3, n3, r5, n5, pp = cfg.widths
        i1, i2, i3, i4 = cfg.branch_inputs()
        self.branch1 = [ConvBNReLU(i1, n1, 1, rng, dtype)]
        self.branch2 = [ConvBNReLU(i2, r3, 1, rng, dtype), ConvBNReLU(r3, n3, 3, rng, dtype)]
        self.branch3 = [ConvBNReLU(i3, r5, 1, rng, dtype), ConvBNReLU(r5, n5, 5, rng, dtype)]
        self.branch4_pool = Pool2d(cfg.branch4_pool, 3, 1, 1)
        self.branch4 = [ConvBNReLU(i4, pp, 1, rng, dtype)]
        self.passages = []
        if cfg.use_transverse:
            self.passages = [CmbrUnit(i, o, rng, dtype, cfg.cmbr_pool) for i, o in cfg.passage_widths()]
        self.residual = CmbrUnit(cfg.in_channels, output_channels(cfg), rng, dtype, cfg.cmbr_pool) \
            if cfg.use_residual else None

    @property
    def out_channels(self) -> int:
        return output_channels(self.cfg)

    def branches(self) -> list[list[ConvBNReLU]]:
        return [self.branch1, self.branch2, self.branch3, self.branch4]

    def validate(self) -> None:
        """Check every conv/bn width against the config; raises ValueError naming the branch."""
        cfg = self.cfg
        outs = cfg.branch_outputs()
        for b, (units, cin) in enumerate(zip(self.branches(), cfg.branch_inputs()), start=1):
            expect_in = cin
            for j, unit in enumerate(units):
                if unit.conv.in_channels != expect_in:
                    raise ValueError(f"branch {b} conv {j}: inC {unit.conv.in_channels} != expected {expect_in}")
                if unit.bn.channels != unit.conv.out_channels:
                    raise ValueError(f"branch {b} conv {j}: bn width {unit.bn.channels} != conv outC")
                expect_in = unit.conv.out_channels
            if expect_in != outs[b - 1]:
                raise ValueError(f"branch {b}: output width {expect_in} != configured {outs[b - 1]}")
        if cfg.use_transverse:
            for i, (unit, (ci, co)) in enumerate(zip(self.passages, cfg.passage_widths()), start=1):
                if (unit.conv.in_channels, unit.conv.out_channels) != (ci, co):
                    raise ValueError(f"passage {i}->{i + 1}: conv {unit.conv.in_channels}->"
                                     f"{unit.conv.out_channels} != expected {ci}->{co}")
        if self.residual is not None:
            if (self.residual.conv.in_channels, self.residual.conv.out_channels) != (cfg.in_channels, self.out_channels):
                raise ValueError("residual cmbr width does not match block input/output")

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"block input C={x.shape[1]} but config expects {cfg.in_channels}")
        groups = split_input(x, cfg.split)
        outs, prev = [], None
        for i, units in enumerate(self.branches()):
            try:
                h = groups[i]
                if i > 0 and cfg.use_transverse:
                    h = fuse(prev, h, cfg.fusion, self.passages[i - 1])
                if i == 3:
                    h = self.branch4_pool(h)
                for unit in units:
                    h = unit(h)
            except ShapeError as e:
                raise ShapeError(f"branch {i + 1}: {e}") from e
            outs.append(h)
            prev = h
        y = concat_channels(outs)
        if self.residual is not None:
            y = add(y, cmbr_forward(x, self.residual))
        return y

    def trace(self, in_shape, prefix=""):
        cfg = self.cfg
        c, h, w = in_shape
        if c != cfg.in_channels:
            raise ValueError(f"{prefix.rstrip('.')}: input C={c} but block expects {cfg.in_channels}")
        stats = []
        outs = cfg.branch_outputs()
        ins = cfg.branch_inputs()
        for i, units in enumerate(self.branches()):
            if i > 0 and cfg.use_transverse:
                _, s = self.passages[i - 1].trace((outs[i - 1], h, w), f"{prefix}passages.{i - 1}.")
                stats.extend(s)
            shape = (ins[i], h, w)
            if i == 3:
                shape, s = self.branch4_pool.trace(shape, f"{prefix}branch4_pool")
                stats.extend(s)
            for j, unit in enumerate(units):
                shape, s = unit.trace(shape, f"{prefix}branch{i + 1}.{j}.")
                stats.extend(s)
        if self.residual is not None:
            _, s = self.residual.trace(in_shape, f"{prefix}residual.")
            stats.extend(s)
        return (self.out_channels, h, w), stats


def resfri_forward(x: Tensor, block: ResFRIBlock) -> Tensor:
    return block(x)
