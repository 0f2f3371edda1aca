"""Finite-difference gradient checks for every differentiable op and a tiny block.

Each check builds its leaves in the working precision, back-propagates a
randomly weighted sum of the output, and compares every leaf gradient against
central differences evaluated in float64 at two step sizes. Per entry the
closer estimate is kept, so a step that straddles a ReLU or max-pool kink does
not register as a backward error while a wrong gradient still misses both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .block import ResFRIBlock, ResFRIConfig
from .tensor import BatchNormState, ConvParams, Tensor, finite_diff_grad

TOLERANCE = {"f64": 1e-6, "f32": 1e-3}
DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:g}"


FINE_STEP = 1e-2


def numeric_grads(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> tuple:
    return finite_diff_grad(f, x, h), finite_diff_grad(f, x, h * FINE_STEP)


def rel_error(pairs) -> float:
    """max |a - n| over all (analytic, numeric) pairs, scaled by the largest
    gradient magnitude among them. A leaf whose true gradient is zero (a conv
    bias feeding train-mode batch norm) is then judged against the rest.
    ``numeric`` may be a tuple of estimates; each entry uses the closest."""
    pairs = [(np.asarray(a, dtype=np.float64), n if isinstance(n, tuple) else (n,)) for a, n in pairs]
    pairs = [(a, tuple(np.asarray(e, dtype=np.float64) for e in n)) for a, n in pairs]
    diff = max(np.min([np.abs(a - e) for e in n], axis=0).max(initial=0.0) for a, n in pairs)
    pairs = [(a, n[0]) for a, n in pairs]
    scale = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs)
    return float(diff / max(scale, 1e-12))


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(weights.astype(out.dtype).reshape(out.shape))))


def check_leaves(fn: Callable[[dict], Tensor], leaves: dict[str, np.ndarray], dtype, h: float = 1e-5) -> float:
    """Worst relative error over all leaves of a scalar ``fn`` of named tensors."""
    live = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in leaves.items()}
    fn(live).backward()
    ref = {k: np.asarray(v, dtype=np.float64) for k, v in leaves.items()}
    pairs = []
    for name in leaves:
        def f(t, name=name):
            args = {k: Tensor(v, dtype=np.float64) for k, v in ref.items() if k != name}
            args[name] = t
            return fn(args)

        numeric = numeric_grads(f, ref[name], h)
        analytic = live[name].grad if live[name].grad is not None else np.zeros_like(ref[name])
        pairs.append((analytic, numeric))
    return rel_error(pairs)


# ---------------------------------------------------------------- op cases
# Each case draws (fn, leaves) from an rng; fn must be pure in its leaves.


def _loss(out: Tensor, rng_seed: int) -> Tensor:
    return weighted_sum(out, np.random.default_rng(rng_seed).standard_normal(out.shape))


def _case_add(rng):
    s = (2, 3, 4, 4)
    return (lambda L: _loss(T.add(L["a"], L["b"]), 1)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}


def _case_neg(rng):
    return (lambda L: _loss(T.neg(L["a"]), 1)), {"a": rng.standard_normal((3, 5))}


def _case_mul(rng):
    s = (2, 3, 3)
    return (lambda L: _loss(T.mul(T.mul(L["a"], L["b"]), 1.5), 1)), \
        {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}


def _case_sum(rng):
    return (lambda L: T.tsum(T.mul(L["a"], L["a"]))), {"a": rng.standard_normal((2, 3, 2, 2))}


def _case_reshape(rng):
    return (lambda L: _loss(T.reshape(L["a"], (4, 6)), 1)), {"a": rng.standard_normal((2, 3, 2, 2))}


def _case_relu(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    a[np.abs(a) < 1e-3] += 1e-2
    return (lambda L: _loss(T.relu(L["a"]), 1)), {"a": a}


def _case_concat(rng):
    return (lambda L: _loss(T.concat_channels([L["a"], L["b"]]), 1)), \
        {"a": rng.standard_normal((2, 2, 3, 3)), "b": rng.standard_normal((2, 3, 3, 3))}


def _case_slice(rng):
    return (lambda L: _loss(T.slice_channels(L["a"], 1, 3), 1)), {"a": rng.standard_normal((2, 4, 3, 3))}


def _case_conv(rng):
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.integers(0, k // 2 + 1))
    size = max(k, 5)

    def fn(L):
        return _loss(T.conv2d(L["x"], ConvParams(L["w"], L["b"], stride, padding)), 1)

    return fn, {"x": rng.standard_normal((2, 3, size, size)), "w": rng.standard_normal((2, 3, k, k)),
                "b": rng.standard_normal(2)}


def _distinct(rng, shape):
    # well-separated values keep max-pool argmax away from ties
    return (rng.permutation(int(np.prod(shape))).reshape(shape) + rng.random(shape) * 0.5) / 10.0


def _case_maxpool(rng):
    k, stride = int(rng.choice([2, 3])), int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    return (lambda L: _loss(T.pool2d(L["x"], "max", k, stride, pad), 1)), {"x": _distinct(rng, (2, 2, 5, 5))}


def _case_avgpool(rng):
    k, stride = int(rng.choice([2, 3])), int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    return (lambda L: _loss(T.pool2d(L["x"], "avg", k, stride, pad), 1)), {"x": rng.standard_normal((2, 2, 5, 5))}


def _case_gap(rng):
    return (lambda L: _loss(T.global_avg_pool(L["x"]), 1)), {"x": rng.standard_normal((2, 3, 4, 4))}


def _bn_state(L, mode, c):
    return BatchNormState(L["gamma"], L["beta"], np.zeros(c), np.ones(c) * 1.3, mode=mode)


def _case_bn_train(rng):
    c = 3
    return (lambda L: _loss(T.batchnorm2d(L["x"], _bn_state(L, "train", c)), 1)), \
        {"x": rng.standard_normal((2, c, 3, 3)), "gamma": rng.standard_normal(c), "beta": rng.standard_normal(c)}


def _case_bn_eval(rng):
    c = 3
    return (lambda L: _loss(T.batchnorm2d(L["x"], _bn_state(L, "eval", c)), 1)), \
        {"x": rng.standard_normal((2, c, 3, 3)), "gamma": rng.standard_normal(c), "beta": rng.standard_normal(c)}


def _case_linear(rng):
    return (lambda L: _loss(T.linear(L["x"], L["w"], L["b"]), 1)), \
        {"x": rng.standard_normal((3, 5)), "w": rng.standard_normal((5, 4)), "b": rng.standard_normal(4)}


def _case_dropout(rng):
    seed = int(rng.integers(1 << 31))
    return (lambda L: _loss(T.dropout(L["x"], 0.3, np.random.default_rng(seed)), 1)), \
        {"x": rng.standard_normal((4, 6))}


def _case_xent(rng):
    labels = rng.integers(0, 5, size=4)
    return (lambda L: T.softmax_cross_entropy(L["z"], labels)), {"z": rng.standard_normal((4, 5))}


def _case_chain(rng):
    labels = rng.integers(0, 3, size=2)

    def fn(L):
        y = T.conv2d(L["x"], ConvParams(L["w"], L["b"], 1, 1))
        y = T.pool2d(y, "avg", 2, 2)
        y = T.relu(T.batchnorm2d(y, _bn_state(L, "train", 2)))
        return T.softmax_cross_entropy(T.linear(y, L["fw"], L["fb"]), labels)

    return fn, {"x": rng.standard_normal((2, 2, 4, 4)), "w": rng.standard_normal((2, 2, 3, 3)),
                "b": rng.standard_normal(2), "gamma": rng.standard_normal(2), "beta": rng.standard_normal(2),
                "fw": 0.3 * rng.standard_normal((8, 3)), "fb": rng.standard_normal(3)}


OP_CASES = {
    "add": _case_add, "neg": _case_neg, "mul": _case_mul, "sum": _case_sum, "reshape": _case_reshape,
    "relu": _case_relu, "concat_channels": _case_concat, "slice_channels": _case_slice,
    "conv2d": _case_conv, "maxpool": _case_maxpool, "avgpool": _case_avgpool,
    "global_avg_pool": _case_gap, "batchnorm_train": _case_bn_train, "batchnorm_eval": _case_bn_eval,
    "linear": _case_linear, "dropout": _case_dropout, "softmax_cross_entropy": _case_xent,
    "chain": _case_chain,
}


def check_op(name: str, precision: str = "f64", trials: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, sorted(OP_CASES).index(name)])
    worst = 0.0
    for _ in range(trials):
        fn, leaves = OP_CASES[name](rng)
        worst = max(worst, check_leaves(fn, leaves, DTYPES[precision]))
    return CheckResult(f"op:{name}", worst, TOLERANCE[precision])


# ---------------------------------------------------------------- block


TINY_WIDTHS = (2, 2, 3, 2, 3, 2)


def tiny_block(fusion: str, split: bool, dtype, seed: int = 0, in_channels: int = 8) -> ResFRIBlock:
    cfg = ResFRIConfig(in_channels, TINY_WIDTHS, fusion=fusion, split=split)
    return ResFRIBlock(cfg, np.random.default_rng(seed), dtype)


def check_block(fusion: str = "addition", split: bool = False, precision: str = "f64", seed: int = 0,
                input_shape=(2, 8, 6, 6)) -> CheckResult:
    """Input and every parameter gradient of a tiny train-mode block."""
    dtype = DTYPES[precision]
    rng = np.random.default_rng([seed, 99])
    x = rng.standard_normal(input_shape)
    weights = rng.standard_normal((input_shape[0], tiny_block(fusion, split, dtype).out_channels) + input_shape[2:])

    live = tiny_block(fusion, split, dtype, seed)
    ref = tiny_block(fusion, split, np.float64, seed)
    xt = Tensor(x, requires_grad=True, dtype=dtype)
    weighted_sum(live(xt), weights).backward()

    ref_params = dict(ref.named_parameters())
    pairs = [(xt.grad, numeric_grads(lambda t: weighted_sum(ref(t), weights), x))]
    for name, p in live.named_parameters():
        target = ref_params[name]
        base = target.data.copy()

        def f(t, target=target):
            target.data = t.data
            return weighted_sum(ref(Tensor(x, dtype=np.float64)), weights)

        numeric = numeric_grads(f, base)
        target.data = base
        pairs.append((p.grad, numeric))
    worst = rel_error(pairs)
    tag = f"block:{'SRI' if split else 'RI'}-{fusion}"
    return CheckResult(tag, worst, TOLERANCE[precision])


def run_all(precision: str = "f64", trials: int = 20, seed: int = 0, blocks: bool = True) -> list[CheckResult]:
    if precision not in TOLERANCE:
        raise ValueError(f"precision must be one of {sorted(TOLERANCE)}, got {precision!r}")
    results = [check_op(name, precision, trials, seed) for name in OP_CASES]
    if blocks:
        for split in (False, True):
            for fusion in ("addition", "concatenation"):
                results.append(check_block(fusion, split, precision, seed))
    return results
