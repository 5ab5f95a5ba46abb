"""Parameter containers and the small layer vocabulary the networks use.

A `Module` is a plain attribute tree; `named_parameters()` walks it in
attribute-insertion order, which gives every parameter a stable path name
("encoder.stages.0.blocks.0.in_proj.w").  Initialization is decoupled from
construction: `init_model(model, seed)` fills each parameter from its
declared `init_spec` using an RNG derived from (seed, crc32(path)), so
values do not depend on construction order.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Base class: tracks child modules and parameters by attribute name."""

    def __setattr__(self, name, value):
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def init_model(model: Module, seed: int) -> None:
    """Fill every parameter from its init_spec, deterministically per name."""
    names = set()
    for name, p in model.named_parameters():
        if name in names:
            raise ValueError(f"duplicate parameter name {name!r}")
        names.add(name)
        rng = _param_rng(seed, name)
        kind = p.init_spec[0]
        if kind == "zeros":
            arr = np.zeros(p.shape)
        elif kind == "identity":
            arr = np.ones(p.shape)
        elif kind == "uniform":
            _, lo, hi = p.init_spec
            arr = rng.uniform(lo, hi, size=p.shape)
        elif kind == "s4_log":
            mode = p.init_spec[1]
            if mode == "a_log":
                # state column n holds log(n + 1); stacked identically per channel
                n = p.shape[-1]
                arr = np.broadcast_to(np.log(np.arange(1, n + 1, dtype=np.float64)), p.shape).copy()
            elif mode == "dt_bias":
                # softplus(bias) lands log-uniformly in [1e-3, 1e-1]
                dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=p.shape))
                arr = dt + np.log(-np.expm1(-dt))
            else:
                raise ValueError(f"unknown s4_log mode {mode!r}")
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        p.data = np.ascontiguousarray(arr, dtype=T.default_dtype())
        p.grad = None


def uniform_param(shape, fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return Parameter(shape, ("uniform", -bound, bound))


class Linear(Module):
    """y = x @ w + b over the trailing axis."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.w = uniform_param((in_features, out_features), in_features)
        self.b = Parameter((out_features,), ("zeros",)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, T.reshape(self.b, (1,) * (y.data.ndim - 1) + (self.b.shape[0],)))
        return y


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Parameter((channels,), ("identity",))
        self.beta = Parameter((channels,), ("zeros",))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class DepthwiseConv3x3(Module):
    def __init__(self, channels: int):
        self.w = uniform_param((3, 3, channels), 9)
        self.b = Parameter((channels,), ("zeros",))

    def __call__(self, x: Tensor) -> Tensor:
        return T.depthwise_conv3x3(x, self.w, self.b)


class Conv3x3(Module):
    """Full 3x3 convolution composed of nine shifted 1x1 projections."""

    def __init__(self, in_channels: int, out_channels: int):
        self.w = uniform_param((3, 3, in_channels, out_channels), 9 * in_channels)
        self.b = Parameter((out_channels,), ("zeros",))
        self.in_channels = in_channels
        self.out_channels = out_channels

    def __call__(self, x: Tensor) -> Tensor:
        H, W = x.shape[-3], x.shape[-2]
        xp = T.pad2d(x, 1, 1, 1, 1)
        out = None
        for dy in range(3):
            for dx in range(3):
                patch = T.crop2d(xp, dy, dy + H, dx, dx + W)
                term = T.matmul(patch, T.reshape(T.slice_axis(T.slice_axis(self.w, 0, dy, dy + 1), 1, dx, dx + 1), (self.in_channels, self.out_channels)))
                out = term if out is None else T.add(out, term)
        return T.add(out, T.reshape(self.b, (1,) * (out.data.ndim - 1) + (self.out_channels,)))
