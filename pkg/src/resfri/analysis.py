"""Analytic parameter and multiply-accumulate accounting.

Counts come from walking the model's layers with per-sample shapes, so no
forward pass is needed. Convention: "FLOPs" are reported as MACs; batch
norm, ReLU and pooling cost nothing; batch-norm running statistics are not
parameters; masked (pruned) weights still count.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass


@dataclass(frozen=True)
class LayerStat:
    name: str
    params: int
    macs: int
    output_shape: tuple

    def __post_init__(self):
        if self.params < 0 or self.macs < 0:
            raise ValueError(f"{self.name}: negative count")

    @property
    def shape_str(self) -> str:
        return "x".join(str(s) for s in self.output_shape)


def layer_stats(model, input_shape=None) -> list[LayerStat]:
    shape = tuple(input_shape if input_shape is not None else model.input_shape)
    _, stats = model.trace(shape, "")
    return stats


def count_params(model) -> tuple[int, list[LayerStat]]:
    stats = layer_stats(model)
    return sum(s.params for s in stats), stats


def count_flops(model, input_shape=None) -> tuple[int, list[LayerStat]]:
    stats = layer_stats(model, input_shape)
    return sum(s.macs for s in stats), stats


@dataclass
class Summary:
    rows: list[LayerStat]
    total_params: int
    total_macs: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "params", "macs", "out_shape"])
        for r in self.rows:
            writer.writerow([r.name, r.params, r.macs, r.shape_str])
        writer.writerow(["TOTAL", self.total_params, self.total_macs, ""])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MACs':>15}  out_shape",
                 "-" * (width + 46)]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>12,}  {r.macs:>15,}  {r.shape_str}")
        lines.append("-" * (width + 46))
        lines.append(f"{'TOTAL':<{width}}  {self.total_params:>12,}  {self.total_macs:>15,}")
        lines.append(f"params {self.total_params / 1e6:.3f} M   MACs {self.total_macs / 1e9:.3f} G")
        return "\n".join(lines) + "\n"


def summary(model, input_shape=None) -> Summary:
    rows = layer_stats(model, input_shape)
    return Summary(rows, sum(r.params for r in rows), sum(r.macs for r in rows))
