"""GoogLeNet-layout networks built from ResFRI / Split-ResFRI blocks."""

from __future__ import annotations

import numpy as np

from .block import ResFRIBlock
from .config import ConfigError, NetworkConfig, load_config
from .layers import ConvBNReLU, Dropout, GlobalAvgPool, Linear, Module, Pool2d
from .tensor import ShapeError, Tensor, flatten, pool2d


class Stage(Module):
    def __init__(self, blocks: list[ResFRIBlock], pool: Pool2d | None):
        self.blocks = blocks
        self.pool = pool

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.pool(x) if self.pool is not None else x

    def trace(self, in_shape, prefix=""):
        stats = []
        for i, block in enumerate(self.blocks):
            in_shape, s = block.trace(in_shape, f"{prefix}blocks.{i}.")
            stats.extend(s)
        if self.pool is not None:
            in_shape, s = self.pool.trace(in_shape, f"{prefix}pool")
            stats.extend(s)
        return in_shape, stats


class GlobalMaxPool(Module):
    def forward(self, x):
        return flatten(pool2d(x, "max", x.shape[2]))

    def trace(self, in_shape, prefix=""):
        return (in_shape[0],), []


class Network(Module):
    """Stem, stages of blocks with inter-stage pools, global pool, dropout, linear classifier."""

    def __init__(self, cfg: NetworkConfig, dtype=np.float32):
        self.config = cfg
        self.input_shape = tuple(cfg.input_shape)
        self.dtype = np.dtype(dtype)
        self.masks: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(cfg.seed)
        channels = cfg.input_shape[0]
        self.stem = []
        for spec in cfg.stem:
            k = int(spec["kernel"])
            self.stem.append(ConvBNReLU(channels, int(spec["out_channels"]), k, rng, dtype,
                                        stride=int(spec.get("stride", 1)), padding=int(spec.get("padding", k // 2))))
            channels = int(spec["out_channels"])
        self.stages = []
        for si, st in enumerate(cfg.stages):
            blocks = []
            for bi, bc in enumerate(st.blocks):
                if bc.in_channels != channels:
                    raise ConfigError(f"stage {si} block {bi}: in_channels {bc.in_channels} != {channels}")
                blocks.append(ResFRIBlock(bc, rng, dtype))
                channels = blocks[-1].out_channels
            pool = None
            if st.pool is not None:
                pool = Pool2d(st.pool["kind"] or cfg.pool_kind, int(st.pool["kernel"]),
                              int(st.pool["stride"]), int(st.pool["padding"]))
            self.stages.append(Stage(blocks, pool))
        self.head_pool = GlobalAvgPool() if cfg.head["pool"] == "avg" else GlobalMaxPool()
        self.dropout = Dropout(float(cfg.head["dropout"]), np.random.default_rng([cfg.seed, 1]))
        self.fc = Linear(channels, cfg.classes, rng, dtype)

    def blocks(self) -> list[tuple[str, ResFRIBlock]]:
        return [(name, m) for name, m in self.named_modules() if isinstance(m, ResFRIBlock)]

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input_shape {self.input_shape}")
        for unit in self.stem:
            x = unit(x)
        for stage in self.stages:
            x = stage(x)
        x = self.head_pool(x)
        x = self.dropout(x)
        return self.fc(x)

    def trace(self, in_shape, prefix=""):
        stats = []
        shape = tuple(in_shape)
        for i, unit in enumerate(self.stem):
            shape, s = unit.trace(shape, f"{prefix}stem.{i}.")
            stats.extend(s)
        for i, stage in enumerate(self.stages):
            shape, s = stage.trace(shape, f"{prefix}stages.{i}.")
            stats.extend(s)
        shape, s = self.head_pool.trace(shape, f"{prefix}head_pool")
        stats.extend(s)
        shape, s = self.fc.trace(shape, f"{prefix}fc")
        stats.extend(s)
        return shape, stats

    def validate(self) -> None:
        """Shape-chase from input to logits; raises naming the first inconsistent stage."""
        shape = self.input_shape
        for i, unit in enumerate(self.stem):
            try:
                shape, _ = unit.trace(shape)
            except ValueError as e:
                raise ConfigError(f"stem {i}: {e}") from e
        for i, stage in enumerate(self.stages):
            for block in stage.blocks:
                block.validate()
            try:
                shape, _ = stage.trace(shape)
            except ValueError as e:
                raise ConfigError(f"stage {i}: {e}") from e
            if min(shape[1:]) < 1:
                raise ConfigError(f"stage {i}: spatial extent collapsed to {shape}")
        self.fc.trace((shape[0],))


def build_network(cfg, dtype=np.float32, prune: bool = True) -> Network:
    """Build, validate and (per block config) prune a network.

    ``cfg`` may be a NetworkConfig, a dict document, or a preset name/path.
    """
    if isinstance(cfg, dict):
        cfg = NetworkConfig.from_dict(cfg)
    elif not isinstance(cfg, NetworkConfig):
        cfg = load_config(cfg)
    model = Network(cfg, dtype)
    model.validate()
    if prune:
        from .pruning import apply_masks, build_masks

        masks = build_masks(model)
        if any(m.ratio > 0 for m in masks):
            apply_masks(model, masks)
    return model


def forward(model: Network, batch: Tensor, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    model.train(mode == "train")
    return model(batch)
