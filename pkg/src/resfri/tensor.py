"""Dense tensors with a small reverse-mode differentiation engine.

Every differentiable primitive used by the network lives here: convolution,
pooling, batch normalization, ReLU, channel concatenation, addition, the
linear head and the softmax cross-entropy loss. Each primitive records a
closure that maps the output gradient to its parents' gradients; ``backward``
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-d float array (rank <= 4) with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape), dtype=like.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list:
    """Iterative DFS post-order; raises on a revisited gray node."""
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            pm = state.get(id(p))
            if pm == 1:
                raise RuntimeError("cycle detected in computation graph")
            if pm is None and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``root``.

    Gradients from multiple uses of one tensor are summed. A second call
    without resetting leaf gradients raises instead of accumulating, and the
    graph is released once traversed.
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("backward already called on this graph")
    if not root.requires_grad:
        raise RuntimeError("output does not require grad")
    order = _topological_order(root)
    for node in order:
        if node.is_leaf and node.grad is not None:
            raise RuntimeError(
                f"leaf {node.name or node.shape} already holds a gradient; reset grads before backward"
            )
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
        node._parents = ()
        node._backward = None
        node._consumed = True


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    s = float(b)
    return _result(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:]))))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- channel ops


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts):
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: part {i} has shape {p.shape}, expected N,H,W = {(n, h, w)}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    c = a.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside 0..{c}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop].copy(), (a,), bw)


# ---------------------------------------------------------------- convolution


def conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


@dataclass(eq=False)
class ConvParams:
    """Weights of one convolution: weight is outC x inC x kH x kW."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({self.weight.shape[0]},)")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride/padding {self.stride}/{self.padding}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple:
        return self.weight.shape[2:]


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation with symmetric zero padding via im2col.

    Each sample gets its own GEMM (a stacked matmul), so a sample's output
    does not depend on what else is in the batch.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be N x C x H x W, got {x.shape}")
    w, b, s, p = params.weight, params.bias, params.stride, params.padding
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ShapeError(f"conv2d: input channels C={c} but weight expects inC={ic}")
    oh, ow = conv_output_extent(h, kh, s, p), conv_output_extent(wd, kw, s, p)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output extent {oh}x{ow} < 1 for input {h}x{wd}, kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if kh == 1 and kw == 1 and s == 1:
        cols = xp.reshape(n, c, oh * ow)
    else:
        cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
        cols = cols.reshape(n, c * kh * kw, oh * ow)
    wm = w.data.reshape(oc, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, oc, oh, ow)

    def bw(g):
        g2 = g.reshape(n, oc, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2)
            if kh == 1 and kw == 1 and s == 1:
                dxp = dcols.reshape(xp.shape)
            else:
                dcols = dcols.reshape(n, c, kh, kw, oh, ow)
                dxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
            gx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw)


# ---------------------------------------------------------------- pooling


def pool2d(x: Tensor, kind: str, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max or average pooling over k x k windows.

    Average pooling divides by k*k, counting zero padding. Max pooling pads
    with -inf and breaks ties toward the first window position.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: invalid kind {kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d: input must be rank 4, got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"pool2d: invalid k/stride/padding {k}/{stride}/{padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"pool2d: window {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if kind == "max" and padding > k // 2:
        raise ShapeError(f"pool2d: max padding {padding} would allow all-padding windows for k={k}")
    oh, ow = conv_output_extent(h, k, stride, padding), conv_output_extent(w, k, stride, padding)
    fill = -np.inf if kind == "max" else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=fill) if padding else x.data
    windows = [(i, j) for i in range(k) for j in range(k)]

    def view(arr, i, j):
        return arr[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]

    if kind == "avg":
        out = np.zeros((n, c, oh, ow), dtype=x.dtype)
        for i, j in windows:
            out += view(xp, i, j)
        out /= x.dtype.type(k * k)

        def bw(g):
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            gs = g / g.dtype.type(k * k)
            for i, j in windows:
                view(dxp, i, j)[...] += gs
            return (dxp[:, :, padding:padding + h, padding:padding + w],)

        return _result(out, (x,), bw)

    out = view(xp, 0, 0).copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    for idx, (i, j) in enumerate(windows[1:], start=1):
        v = view(xp, i, j)
        better = v > out
        np.copyto(out, v, where=better)
        arg[better] = idx

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for idx, (i, j) in enumerate(windows):
            view(dxp, i, j)[...] += np.where(arg == idx, g, 0)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return _result(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W, giving N x C."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g / g.dtype.type(h * w))[:, :, None, None], x.shape).copy(),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- batch norm


@dataclass(eq=False)
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        c = self.gamma.shape[0]
        if not (self.beta.shape == (c,) and self.running_mean.shape == (c,) and self.running_var.shape == (c,)):
            raise ShapeError("batchnorm: per-channel arrays must all have length C")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"batchnorm momentum {self.momentum} outside (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"batchnorm mode {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization over N, H, W.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be rank 4, got {x.shape}")
    c = x.shape[1]
    if c != state.channels:
        raise ShapeError(f"batchnorm2d: input C={c} but state has {state.channels} channels")
    gamma, beta = state.gamma, state.beta
    eps = x.dtype.type(state.epsilon)
    shape = (1, c, 1, 1)
    if state.mode == "train":
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * invstd.reshape(shape)
        mom = state.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased

        def bw(g):
            gg = g * gamma.data.reshape(shape)
            s1 = gg.sum(axis=(0, 2, 3)).reshape(shape)
            s2 = (gg * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            gx = (invstd.reshape(shape) / m) * (m * gg - s1 - xhat * s2)
            return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))
    else:
        invstd = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(shape)) * invstd.reshape(shape)

        def bw(g):
            gx = g * (gamma.data * invstd).reshape(shape)
            return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------- head


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of an N x D input by a D x K weight."""
    if x.data.ndim != 2:
        x = flatten(x)
    d, k = weight.shape
    if x.shape[1] != d:
        raise ShapeError(f"linear: input D={x.shape[1]} but weight expects D={d}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({k},)")
    # stacked row-vector products keep each row independent of the batch size
    out = np.matmul(x.data[:, None, :], weight.data)[:, 0, :]
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate {p} outside [0, 1)")
    if p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1
        return (probs * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------- oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)

    def evaluate(arr):
        with no_grad():
            out = f(Tensor(arr.reshape(base.shape), dtype=np.float64))
        return float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(flat)
        flat[i] = orig - h
        fm = evaluate(flat)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(base.shape)
