"""Unstructured magnitude pruning of transverse-passage weights.

Masks are same-shape 0/1 arrays; tensor shapes never change. The residual
cmbr projection is never a pruning target. Masks are registered on the model
and re-applied after every optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np


@dataclass
class PruneMask:
    target: str
    mask: np.ndarray
    ratio: float

    @property
    def zeros(self) -> int:
        return int(self.mask.size - np.count_nonzero(self.mask))


def prune_count(ratio: float, n: int) -> int:
    """floor(ratio * n) with the ratio read as the decimal it prints as."""
    return math.floor(Fraction(repr(float(ratio))) * n)


def passage_targets(model) -> list[tuple[str, object, float]]:
    """(name, weight tensor, configured ratio) for every transverse-passage conv."""
    out = []
    for name, block in model.blocks():
        for i, unit in enumerate(block.passages):
            out.append((f"{name}.passages.{i}.conv.weight", unit.conv.weight, block.cfg.passage_prune_ratio))
    return out


def magnitude_mask(weight: np.ndarray, ratio: float) -> np.ndarray:
    k = prune_count(ratio, weight.size)
    mask = np.ones(weight.size, dtype=weight.dtype)
    if k:
        order = np.argsort(np.abs(weight).reshape(-1), kind="stable")
        mask[order[:k]] = 0
    return mask.reshape(weight.shape)


def build_masks(model, ratio: Optional[float] = None) -> list[PruneMask]:
    """One mask per passage weight; ``ratio=None`` uses each block's configured ratio."""
    if ratio is not None and not 0 <= ratio <= 1:
        raise ValueError(f"prune ratio {ratio} outside [0, 1]")
    masks = []
    for name, weight, block_ratio in passage_targets(model):
        r = block_ratio if ratio is None else ratio
        masks.append(PruneMask(name, magnitude_mask(weight.data, r), float(r)))
    return masks


def apply_masks(model, masks: list[PruneMask]):
    params = dict(model.named_parameters())
    for m in masks:
        if m.target not in params:
            raise KeyError(f"mask target {m.target!r} not found in model")
        w = params[m.target].data
        if w.shape != m.mask.shape:
            raise ValueError(f"mask for {m.target}: shape {m.mask.shape} != weight {w.shape}")
    for m in masks:
        w = params[m.target].data
        w *= m.mask.astype(w.dtype)
        model.masks[m.target] = m.mask.astype(w.dtype)
    return model


def enforce_masks(model) -> None:
    if not model.masks:
        return
    params = dict(model.named_parameters())
    for name, mask in model.masks.items():
        params[name].data *= mask


@dataclass
class SparsityRow:
    target: str
    zeros: int
    numel: int

    @property
    def fraction(self) -> float:
        return self.zeros / self.numel


@dataclass
class SparsityReport:
    rows: list[SparsityRow]

    @property
    def zeros(self) -> int:
        return sum(r.zeros for r in self.rows)

    @property
    def numel(self) -> int:
        return sum(r.numel for r in self.rows)

    @property
    def aggregate(self) -> float:
        return self.zeros / self.numel if self.numel else 0.0

    def to_csv(self) -> str:
        lines = ["target,zeros,numel,fraction"]
        lines += [f"{r.target},{r.zeros},{r.numel},{r.fraction:.6f}" for r in self.rows]
        lines.append(f"TOTAL,{self.zeros},{self.numel},{self.aggregate:.6f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len(r.target) for r in self.rows] + [6])
        lines = [f"{'target':<{width}}  {'zeros':>9}  {'numel':>9}  fraction"]
        for r in self.rows:
            lines.append(f"{r.target:<{width}}  {r.zeros:>9}  {r.numel:>9}  {r.fraction:.4f}")
        lines.append(f"{'TOTAL':<{width}}  {self.zeros:>9}  {self.numel:>9}  {self.aggregate:.4f}")
        return "\n".join(lines) + "\n"


def sparsity_report(model) -> SparsityReport:
    """Zeros counted at masked positions only, so incidental exact zeros are excluded."""
    rows = []
    for name, weight, _ in passage_targets(model):
        mask = model.masks.get(name)
        zeros = 0 if mask is None else int(mask.size - np.count_nonzero(mask))
        rows.append(SparsityRow(name, zeros, weight.data.size))
    return SparsityReport(rows)
