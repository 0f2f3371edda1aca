"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

import re
from collections import OrderedDict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _unit_of(name: str) -> str:
    m = re.match(r"(stages\.\d+\.blocks\.\d+|stages\.\d+\.pool|stem\.\d+|[a-z_]+)", name)
    return m.group(1) if m else name


def group_costs(rows) -> "OrderedDict[str, tuple[int, int]]":
    """Sum params and MACs per block (or stem/head unit), in network order."""
    out: OrderedDict[str, tuple[int, int]] = OrderedDict()
    for r in rows:
        key = _unit_of(r.name)
        p, m = out.get(key, (0, 0))
        out[key] = (p + r.params, m + r.macs)
    return out


def plot_layer_costs(summary, path, title: str = "") -> None:
    groups = group_costs(summary.rows)
    labels = [k.replace("stages.", "s").replace(".blocks.", ".b") for k in groups]
    params = [v[0] / 1e6 for v in groups.values()]
    macs = [v[1] / 1e9 for v in groups.values()]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 5.5), sharex=True)
    xs = range(len(labels))
    ax1.bar(xs, params, color="tab:blue")
    ax1.set_ylabel("params (M)")
    ax2.bar(xs, macs, color="tab:orange")
    ax2.set_ylabel("MACs (G)")
    ax2.set_xticks(list(xs))
    ax2.set_xticklabels(labels, rotation=60, ha="right", fontsize=8)
    fig.suptitle(title or f"{summary.total_params / 1e6:.2f} M params, {summary.total_macs / 1e9:.3f} G MACs")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(metrics, path, title: str = "") -> None:
    recs = metrics.records
    epochs = [r.epoch for r in recs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r.train_loss for r in recs], "o-", label="train")
    ax1.plot(epochs, [r.val_loss for r in recs], "s-", label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [100 * r.top1 for r in recs], "o-", label="top-1")
    ax2.plot(epochs, [100 * r.top5 for r in recs], "s-", label="top-5")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation error (%)")
    ax2.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
