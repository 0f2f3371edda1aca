"""Command-line entry point.

    resfri summary      --config resfri-addition-cifar [--out-dir DIR]
    resfri gradcheck    [--seed 7] [--precision f64]
    resfri train        --config toy-mnist --data-dir DATA --out-dir RUN [--epochs N] [--checkpoint RUN/last.rfri]
    resfri eval         --config toy-mnist --data-dir DATA --checkpoint RUN/best.rfri
    resfri prune-report --config resfri-addition-cifar [--checkpoint FILE]

Failures print one line ``error: <Kind>: <message>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import summary as model_summary
from .backbone import build_network
from .checkpoint import CheckpointError
from .config import ConfigError, NetworkConfig, apply_overrides, normalize, read_document
from .data import ChannelStats, DataError, channel_stats, prepare_splits
from .gradcheck import DTYPES, run_all
from .pruning import sparsity_report
from .tensor import ShapeError
from .training import Trainer, evaluate, load_checkpoint

SUBCOMMANDS = ("summary", "gradcheck", "train", "eval", "prune-report")
DEFAULT_CONFIG = {"summary": "resfri-addition-cifar", "prune-report": "resfri-addition-cifar",
                  "train": "toy-mnist", "eval": "toy-mnist"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resfri", description="ResFRI / Split-ResFRI networks: build, count, check, train.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="preset name or JSON path")
        p.add_argument("--data-dir", default="data", help="directory holding MNIST IDX or CIFAR-10 binary files")
        p.add_argument("--out-dir", help="directory for CSV reports, figures and checkpoints")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--epochs", type=int, help="overrides training.epochs")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value); repeatable")
        p.add_argument("--precision", choices=sorted(DTYPES), help="f32 (default) or f64; gradcheck defaults to f64")
        p.add_argument("--checkpoint", help="checkpoint to load (eval, prune-report) or resume from (train)")
    return parser


def _document(args) -> dict:
    doc = apply_overrides(normalize(read_document(args.config or DEFAULT_CONFIG[args.command])), args.overrides)
    if args.seed is not None:
        doc["seed"] = int(args.seed)
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        doc["training"]["epochs"] = int(args.epochs)
    return doc


def _out_dir(args) -> Path | None:
    if args.out_dir is None:
        return None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(args, doc):
    model = build_network(doc, DTYPES[args.precision or "f32"])
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model)
    return model


def cmd_summary(args) -> int:
    from .plotting import plot_layer_costs

    doc = _document(args)
    model = build_network(doc, prune=False)
    s = model_summary(model)
    sys.stdout.write(s.to_text())
    out = _out_dir(args)
    if out is not None:
        (out / "summary.csv").write_text(s.to_csv())
        plot_layer_costs(s, out / "summary.png", title=f"{doc['name']}: {s.total_params / 1e6:.2f} M params, "
                                                       f"{s.total_macs / 1e9:.3f} G MACs")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.precision or "f64", seed=args.seed or 0)
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'PASS' if ok else 'FAIL'} overall max_rel_error={max(r.max_rel_error for r in results):.3e}")
    sys.stdout.write("\n".join(lines) + "\n")
    out = _out_dir(args)
    if out is not None:
        rows = ["check,max_rel_error,tolerance,passed"]
        rows += [f"{r.name},{r.max_rel_error:.6e},{r.tolerance:g},{int(r.passed)}" for r in results]
        (out / "gradcheck.csv").write_text("\n".join(rows) + "\n")
    return 0 if ok else 1


def cmd_train(args) -> int:
    from .plotting import plot_metrics

    doc = _document(args)
    out = _out_dir(args)
    if out is None:
        raise UsageError("train needs --out-dir")
    cfg = NetworkConfig.from_dict(doc)
    model = build_network(cfg, DTYPES[args.precision or "f32"])
    tcfg = cfg.training
    if tcfg.epochs == 0 and not args.checkpoint:
        # nothing to fit: record the run and the initial weights without touching data
        trainer = Trainer(model, None, None, tcfg, cfg.seed, out,
                          stats=ChannelStats(np.zeros(cfg.input_shape[0]), np.ones(cfg.input_shape[0])), log=None)
        trainer.start(doc)
        print("trained 0 epochs; metrics empty")
        return 0
    train_set, val_set, test_set = prepare_splits(tcfg, args.data_dir, cfg.seed)
    trainer = Trainer(model, train_set, val_set, tcfg, cfg.seed, out)
    if args.checkpoint:
        trainer.restore(args.checkpoint)
    else:
        trainer.start(doc)
    metrics = trainer.fit(tcfg.epochs)
    if len(metrics):
        plot_metrics(metrics, out / "metrics.png", title=doc["name"])
    res = evaluate(model, test_set, trainer.stats)
    report = {"split": "test", "n": len(test_set), "top1_error": res.top1_err, "top5_error": res.top5_err,
              "mean_loss": res.mean_loss, "epochs": trainer.epoch}
    (out / "test.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"test top1_error {res.top1_err:.4f} top5_error {res.top5_err:.4f} loss {res.mean_loss:.4f} (n={len(test_set)})")
    return 0


def _stats_for(args, train_set) -> ChannelStats:
    if args.checkpoint:
        run = Path(args.checkpoint).parent / "run.json"
        if run.is_file():
            s = json.loads(run.read_text())["stats"]
            return ChannelStats(np.asarray(s["mean"]), np.asarray(s["std"]))
    return channel_stats(train_set)


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    doc = _document(args)
    cfg = NetworkConfig.from_dict(doc)
    model = _model(args, doc)
    train_set, _, test_set = prepare_splits(cfg.training, args.data_dir, cfg.seed)
    res = evaluate(model, test_set, _stats_for(args, train_set))
    line = f"top1_error,{res.top1_err!r}\ntop5_error,{res.top5_err!r}\nmean_loss,{res.mean_loss!r}\nn,{len(test_set)}\n"
    sys.stdout.write("metric,value\n" + line)
    out = _out_dir(args)
    if out is not None:
        (out / "eval.csv").write_text("metric,value\n" + line)
    return 0


def cmd_prune_report(args) -> int:
    doc = _document(args)
    model = _model(args, doc)
    rep = sparsity_report(model)
    sys.stdout.write(rep.to_text())
    out = _out_dir(args)
    if out is not None:
        (out / "sparsity.csv").write_text(rep.to_csv())
    return 0


COMMANDS = {"summary": cmd_summary, "gradcheck": cmd_gradcheck, "train": cmd_train,
            "eval": cmd_eval, "prune-report": cmd_prune_report}


def _fail(kind: str, message) -> int:
    text = " ".join(str(message).split())
    print(f"error: {kind}: {text}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand (one of {', '.join(SUBCOMMANDS)})")
        return COMMANDS[args.command](args)
    except UsageError as e:
        return _fail("UsageError", e)
    except (ConfigError, DataError, CheckpointError, ShapeError, ValueError, KeyError,
            FloatingPointError, OSError) as e:
        return _fail(type(e).__name__, e)


if __name__ == "__main__":
    sys.exit(main())
