"""Parameter containers and the small module system the network is built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .analysis import LayerStat
from .tensor import (
    BatchNormState, ConvParams, Tensor, batchnorm2d, conv2d, conv_output_extent,
    dropout, global_avg_pool, linear, pool2d, relu,
)


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator, dtype, gain: float = 2.0) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


def make_conv(in_c: int, out_c: int, k: int, rng, dtype=np.float32, stride=1, padding=0, bias=True) -> ConvParams:
    w = Tensor(kaiming_normal((out_c, in_c, k, k), in_c * k * k, rng, dtype), requires_grad=True)
    b = Tensor(np.zeros(out_c, dtype), requires_grad=True) if bias else None
    return ConvParams(w, b, stride=stride, padding=padding)


def make_bn(c: int, dtype=np.float32, momentum=0.1, epsilon=1e-5) -> BatchNormState:
    return BatchNormState(
        gamma=Tensor(np.ones(c, dtype), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype), requires_grad=True),
        running_mean=np.zeros(c, dtype),
        running_var=np.ones(c, dtype),
        momentum=momentum,
        epsilon=epsilon,
    )


def _is_node(v) -> bool:
    return isinstance(v, (Module, ConvParams, BatchNormState))


class Module:
    """Minimal container: attribute traversal gives names to parameters and buffers."""

    training = True

    def _items(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if _is_node(value) or isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if _is_node(item):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._items():
            name = prefix + key
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, ConvParams):
                yield name + ".weight", value.weight
                if value.bias is not None:
                    yield name + ".bias", value.bias
            elif isinstance(value, BatchNormState):
                yield name + ".gamma", value.gamma
                yield name + ".beta", value.beta
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._items():
            name = prefix + key
            if isinstance(value, BatchNormState):
                yield name + ".running_mean", value.running_mean
                yield name + ".running_var", value.running_var
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in self._items():
            if isinstance(value, Module):
                yield from value.named_modules(prefix + key + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._items():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, BatchNormState):
                value.mode = "train" if mode else "eval"
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state dict missing {sorted(missing)[:3]}")
        for name, arr in state.items():
            target = own[name].data if name in own else buffers.get(name)
            if target is None:
                raise KeyError(f"unexpected key {name!r} in state dict")
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {target.shape}")
            target[...] = arr

    def trace(self, in_shape: tuple, prefix: str = "") -> tuple[tuple, list[LayerStat]]:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def conv_stat(name: str, conv: ConvParams, in_shape: tuple) -> tuple[tuple, LayerStat]:
    c, h, w = in_shape
    kh, kw = conv.kernel
    if c != conv.in_channels:
        raise ValueError(f"{name}: input C={c} but conv expects {conv.in_channels}")
    oh = conv_output_extent(h, kh, conv.stride, conv.padding)
    ow = conv_output_extent(w, kw, conv.stride, conv.padding)
    params = conv.weight.data.size + (conv.bias.data.size if conv.bias is not None else 0)
    macs = conv.out_channels * c * kh * kw * oh * ow
    out = (conv.out_channels, oh, ow)
    return out, LayerStat(name, params, macs, out)


def bn_stat(name: str, bn: BatchNormState, in_shape: tuple) -> LayerStat:
    return LayerStat(name, 2 * bn.channels, 0, tuple(in_shape))


class Conv2d(Module):
    def __init__(self, in_c, out_c, k, rng, dtype=np.float32, stride=1, padding=0, bias=True):
        self.conv = make_conv(in_c, out_c, k, rng, dtype, stride, padding, bias)

    def forward(self, x):
        return conv2d(x, self.conv)

    def trace(self, in_shape, prefix=""):
        out, cs = conv_stat(prefix + "conv", self.conv, in_shape)
        return out, [cs]


class ConvBNReLU(Module):
    """Convolution followed by batch normalization and ReLU."""

    def __init__(self, in_c, out_c, k, rng, dtype=np.float32, stride=1, padding=None):
        self.conv = make_conv(in_c, out_c, k, rng, dtype, stride, k // 2 if padding is None else padding)
        self.bn = make_bn(out_c, dtype)

    def forward(self, x):
        return relu(batchnorm2d(conv2d(x, self.conv), self.bn))

    def trace(self, in_shape, prefix=""):
        out, cs = conv_stat(prefix + "conv", self.conv, in_shape)
        return out, [cs, bn_stat(prefix + "bn", self.bn, out)]


class Pool2d(Module):
    def __init__(self, kind: str, k: int, stride: int = 1, padding: int = 0):
        if kind not in ("max", "avg"):
            raise ValueError(f"invalid pool kind {kind!r}")
        self.kind, self.k, self.stride, self.padding = kind, k, stride, padding

    def forward(self, x):
        return pool2d(x, self.kind, self.k, self.stride, self.padding)

    def trace(self, in_shape, prefix=""):
        c, h, w = in_shape
        out = (c, conv_output_extent(h, self.k, self.stride, self.padding),
               conv_output_extent(w, self.k, self.stride, self.padding))
        return out, [LayerStat(prefix.rstrip(".") or "pool", 0, 0, out)]


class GlobalAvgPool(Module):
    def forward(self, x):
        return global_avg_pool(x)

    def trace(self, in_shape, prefix=""):
        return (in_shape[0],), [LayerStat(prefix.rstrip(".") or "gap", 0, 0, (in_shape[0],))]


class Dropout(Module):
    def __init__(self, p: float, rng: Optional[np.random.Generator] = None):
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        if not self.training or self.p == 0:
            return x
        return dropout(x, self.p, self.rng)

    def trace(self, in_shape, prefix=""):
        return tuple(in_shape), []


class Linear(Module):
    """Affine head; weight stored D x K."""

    def __init__(self, d: int, k: int, rng, dtype=np.float32):
        self.weight = Tensor(kaiming_normal((d, k), d, rng, dtype, gain=1.0), requires_grad=True)
        self.bias = Tensor(np.zeros(k, dtype), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)

    def trace(self, in_shape, prefix=""):
        d, k = self.weight.shape
        size = int(np.prod(in_shape))
        if size != d:
            raise ValueError(f"{prefix}linear: input width {size} but weight expects {d}")
        return (k,), [LayerStat(prefix.rstrip(".") or "linear", d * k + k, d * k, (k,))]


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def trace(self, in_shape, prefix=""):
        stats = []
        for i, layer in enumerate(self.layers):
            in_shape, s = layer.trace(in_shape, f"{prefix}layers.{i}.")
            stats.extend(s)
        return in_shape, stats
