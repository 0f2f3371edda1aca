"""SGD training with momentum, weight decay and a plateau-halving LR schedule."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt
from .config import TrainingConfig
from .data import ChannelStats, Dataset, batches, channel_stats, num_batches
from .tensor import log_softmax, no_grad, softmax_cross_entropy

METRIC_FIELDS = ["epoch", "train_loss", "val_loss", "top1", "top5", "lr", "wall_seconds"]


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)
    plateau_counter: int = 0
    best_val_loss: float = math.inf
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def scalars(self) -> dict[str, float]:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "plateau_counter": self.plateau_counter, "best_val_loss": self.best_val_loss,
                "patience": self.patience, "factor": self.factor, "min_lr": self.min_lr}

    @classmethod
    def from_scalars(cls, s: dict, velocity: dict) -> "OptimState":
        return cls(lr=s["lr"], momentum=s["momentum"], weight_decay=s["weight_decay"], velocity=velocity,
                   plateau_counter=int(s["plateau_counter"]), best_val_loss=s["best_val_loss"],
                   patience=int(s["patience"]), factor=s["factor"], min_lr=s["min_lr"])


def decays(name: str) -> bool:
    # conv and linear weights only; bn gamma/beta and biases are exempt
    return name.split(".")[-1] == "weight"


def sgd_step(params: dict, grads: dict, state: OptimState, masks: Optional[dict] = None,
             decay: Callable[[str], bool] = decays) -> OptimState:
    """In-place update: g += wd*w; v = momentum*v + g; w -= lr*v; then re-zero masked weights."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient in {name} ({bad} of {g.size} entries)")
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay and decay(name):
            g = g + state.weight_decay * w
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        v *= state.momentum
        v += g
        w -= state.lr * v
        if masks and name in masks:
            w *= masks[name]
    return state


def schedule_step(state: OptimState, val_loss: float) -> OptimState:
    """Halve the LR after ``patience`` consecutive epochs without a new best validation loss."""
    if not math.isfinite(val_loss):
        raise FloatingPointError(f"non-finite validation loss {val_loss}")
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.plateau_counter = 0
    else:
        state.plateau_counter += 1
        if state.plateau_counter >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.plateau_counter = 0
    return state


# ---------------------------------------------------------------- evaluation


def topk_error(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is not among the k largest logits (ties: lower index wins)."""
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(1.0 - (top == np.asarray(labels)[:, None]).any(axis=1).mean())


@dataclass
class EvalResult:
    top1_err: float
    top5_err: float
    mean_loss: float


def predict(model, dataset: Dataset, stats: Optional[ChannelStats], batch_size: int = 250) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for b in batches(dataset, batch_size, stats=stats, dtype=model.dtype):
            out.append(model(b.images).data)
    return np.concatenate(out)


def evaluate(model, dataset: Dataset, stats: Optional[ChannelStats] = None, batch_size: int = 250) -> EvalResult:
    logits = predict(model, dataset, stats, batch_size).astype(np.float64)
    labels = dataset.labels
    loss = -log_softmax(logits)[np.arange(len(labels)), labels].mean()
    return EvalResult(topk_error(logits, labels, 1), topk_error(logits, labels, 5), float(loss))


# ---------------------------------------------------------------- metrics


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    top1: float
    top5: float
    lr: float
    wall_seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS[1:]]


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        if not (math.isfinite(rec.train_loss) and math.isfinite(rec.val_loss)):
            raise FloatingPointError(f"non-finite loss recorded at epoch {rec.epoch}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        lines = [",".join(METRIC_FIELDS)] + [",".join(r.row()) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def read_csv(cls, path) -> "RunMetrics":
        m = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                m.append(EpochRecord(int(row["epoch"]), *(float(row[k]) for k in METRIC_FIELDS[1:])))
        return m


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model, state: OptimState, path, progress: Optional[dict] = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update({f"mask:{k}": v for k, v in model.masks.items()})
    tensors.update({f"velocity:{k}": v for k, v in state.velocity.items()})
    scalars = {f"optim:{k}": v for k, v in state.scalars().items()}
    scalars.update({f"progress:{k}": v for k, v in (progress or {}).items()})
    ckpt.write(path, tensors, scalars)


def load_checkpoint(path, model):
    """Restore parameters, buffers, masks and optimizer state into ``model``.

    Returns ``(model, state, progress)``.
    """
    tensors, scalars = ckpt.read(path)
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("velocity:")}
    ckpt.restore_model(model, model_tensors)
    velocity = {k[9:]: v.astype(model.dtype) for k, v in tensors.items() if k.startswith("velocity:")}
    optim = {k[6:]: v for k, v in scalars.items() if k.startswith("optim:")}
    progress = {k[9:]: v for k, v in scalars.items() if k.startswith("progress:")}
    state = OptimState.from_scalars(optim, velocity) if optim else OptimState()
    return model, state, progress


# ---------------------------------------------------------------- loop


class Trainer:
    """Owns one model for a run. Batch order, augmentation and dropout draw from
    (seed, epoch, batch) so a run resumed from a checkpoint replays exactly."""

    def __init__(self, model, train_set: Dataset, val_set: Optional[Dataset], cfg: TrainingConfig,
                 seed: int = 0, out_dir=None, stats: Optional[ChannelStats] = None, log=print):
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.cfg = cfg
        self.seed = int(seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.stats = stats if stats is not None else channel_stats(train_set)
        self.state = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                                patience=cfg.patience, factor=cfg.lr_factor, min_lr=cfg.min_lr)
        self.epoch = 0
        self.batch_index = 0
        self.global_step = 0
        self.epoch_loss_sum = 0.0
        self.epoch_batches = 0
        self.epoch_started = None
        self.metrics = RunMetrics()
        self.step_losses: list[float] = []
        self.log = log or (lambda *a, **k: None)

    # progress bookkeeping travels in the checkpoint scalar section
    def progress(self) -> dict:
        return {"epoch": self.epoch, "batch_index": self.batch_index, "global_step": self.global_step,
                "epoch_loss_sum": self.epoch_loss_sum, "epoch_batches": self.epoch_batches,
                "seed": self.seed}

    def save(self, path) -> None:
        save_checkpoint(self.model, self.state, path, self.progress())

    def restore(self, path) -> None:
        _, self.state, p = load_checkpoint(path, self.model)
        self.epoch = int(p.get("epoch", 0))
        self.batch_index = int(p.get("batch_index", 0))
        self.global_step = int(p.get("global_step", 0))
        self.epoch_loss_sum = float(p.get("epoch_loss_sum", 0.0))
        self.epoch_batches = int(p.get("epoch_batches", 0))
        if "seed" in p:
            self.seed = int(p["seed"])
        if self.out_dir is not None and (self.out_dir / "metrics.csv").is_file():
            self.metrics = RunMetrics.read_csv(self.out_dir / "metrics.csv")

    def _params(self) -> dict:
        return {name: p.data for name, p in self.model.named_parameters()}

    def train_step(self, batch) -> float:
        model = self.model
        model.train()
        model.dropout.rng = np.random.default_rng([self.seed, self.epoch, self.batch_index, 7])
        logits = model(batch.images)
        loss = softmax_cross_entropy(logits, batch.labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at epoch {self.epoch + 1} batch {self.batch_index}")
        model.zero_grad()
        loss.backward()
        grads = {name: p.grad for name, p in model.named_parameters()}
        sgd_step(self._params(), grads, self.state, model.masks)
        return value

    def _epoch_batches(self):
        return batches(self.train_set, self.cfg.batch_size, shuffle_seed=[self.seed, self.epoch],
                       policy="train" if self.cfg.augment else "eval", stats=self.stats,
                       flip=self.cfg.use_flip, aug_seed=[self.seed, self.epoch], start=self.batch_index,
                       dtype=self.model.dtype)

    def run_steps(self, n: int) -> list[float]:
        """Take ``n`` optimizer steps, crossing epoch boundaries as needed."""
        losses = []
        while len(losses) < n:
            if self.epoch_started is None:
                self.epoch_started = time.perf_counter()
            for batch in self._epoch_batches():
                value = self.train_step(batch)
                losses.append(value)
                self.step_losses.append(value)
                self.epoch_loss_sum += value
                self.epoch_batches += 1
                self.batch_index += 1
                self.global_step += 1
                if len(losses) == n:
                    break
            if self.batch_index == num_batches(len(self.train_set), self.cfg.batch_size):
                self.finish_epoch()
        return losses

    def finish_epoch(self) -> EpochRecord:
        lr_used = self.state.lr
        if self.val_set is not None:
            res = evaluate(self.model, self.val_set, self.stats)
        else:
            res = EvalResult(math.nan, math.nan, self.epoch_loss_sum / max(self.epoch_batches, 1))
        improved = res.mean_loss < self.state.best_val_loss
        schedule_step(self.state, res.mean_loss)
        elapsed = time.perf_counter() - (self.epoch_started or time.perf_counter())
        rec = EpochRecord(self.epoch + 1, self.epoch_loss_sum / max(self.epoch_batches, 1),
                          res.mean_loss, res.top1_err, res.top5_err, lr_used, elapsed)
        self.metrics.append(rec)
        self.epoch += 1
        self.batch_index = 0
        self.epoch_loss_sum = 0.0
        self.epoch_batches = 0
        self.epoch_started = None
        self.log(f"epoch {rec.epoch}: train_loss {rec.train_loss:.4f} val_loss {rec.val_loss:.4f} "
                 f"top1_err {rec.top1:.4f} top5_err {rec.top5:.4f} lr {rec.lr:g} ({rec.wall_seconds:.1f}s)")
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.csv", "a") as f:
                f.write(",".join(rec.row()) + "\n")
            self.save(self.out_dir / "last.rfri")
            if improved:
                self.save(self.out_dir / "best.rfri")
        return rec

    def start(self, document: Optional[dict] = None) -> None:
        """Prepare the output directory: run description, empty metrics, initial checkpoint."""
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "metrics.csv").write_text(",".join(METRIC_FIELDS) + "\n")
        run = {"seed": self.seed, "stats": self.stats.to_dict(), "config": document or {}}
        (self.out_dir / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
        self.save(self.out_dir / "last.rfri")

    def fit(self, epochs: int) -> RunMetrics:
        steps_per_epoch = num_batches(len(self.train_set), self.cfg.batch_size)
        while self.epoch < epochs:
            self.run_steps(steps_per_epoch - self.batch_index)
        return self.metrics


def train(model, train_set: Dataset, val_set: Optional[Dataset], epochs: int, seed: int = 0,
          cfg: Optional[TrainingConfig] = None, out_dir=None, stats=None, log=print) -> Trainer:
    """Run ``epochs`` epochs of minibatch SGD; returns the trainer (metrics in ``.metrics``)."""
    trainer = Trainer(model, train_set, val_set, cfg or TrainingConfig(), seed, out_dir, stats, log)
    trainer.start(model.config.to_dict() if hasattr(model, "config") else None)
    trainer.fit(epochs)
    return trainer
