"""Layers, initialization and the Adam optimizer."""
from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, as_tensor, make_op


class Parameter(Tensor):
    """Trainable tensor tagged with how it should be initialized.

    ``init`` is one of ``he``, ``xavier``, ``zeros``, ``ones``, ``normal``.
    """

    def __init__(self, shape, init: str, fan_in: int | None = None, fan_out: int | None = None):
        # constant initializers apply immediately; random ones wait for init_params
        data = np.ones(shape) if init == "ones" else np.zeros(shape)
        super().__init__(data, requires_grad=True, copy=False)
        self.init = init
        self.fan_in = fan_in
        self.fan_out = fan_out


class Module:
    """Container that discovers parameters through its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


def init_params(seed: int, module: Module) -> dict[str, Parameter]:
    """Fill every parameter of ``module`` deterministically from ``seed``.

    Each parameter draws from its own generator keyed by (seed, name), so a
    tensor's initial value does not depend on which other layers exist.
    """
    params = module.parameters()
    for name, p in params.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if p.init == "zeros":
            values = np.zeros(p.shape)
        elif p.init == "ones":
            values = np.ones(p.shape)
        elif p.init == "he":
            bound = np.sqrt(6.0 / p.fan_in)
            values = rng.uniform(-bound, bound, p.shape)
        elif p.init == "xavier":
            bound = np.sqrt(6.0 / (p.fan_in + p.fan_out))
            values = rng.uniform(-bound, bound, p.shape)
        elif p.init == "normal":
            values = rng.normal(0.0, 0.02, p.shape)
        else:
            raise ConfigurationError(f"unknown initializer {p.init!r} for {name}")
        p.data = values.astype(np.float64)
        p.grad = None
    return params


# ---------------------------------------------------------------- convolution

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d_raw(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (O,C,kh,kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects N×C×H×W input, got {x.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # (N, C, Ho, Wo, kh, kw) strided view
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(patches, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    out = out.transpose(0, 3, 1, 2)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)

    def bw(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, patches, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gpatch = np.tensordot(g, kernel.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gpatch[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb)[: len(inputs)]

    return make_op(np.ascontiguousarray(out), inputs, bw)


def conv_transpose2d_raw(x, kernel, bias=None) -> Tensor:
    """Transposed convolution with kernel size equal to stride.

    ``kernel`` is (C_in, C_out, k, k); each input pixel scatters a k×k block,
    so the output is exactly k times larger per spatial axis.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"transposed conv expects N×C×H×W input, got {x.shape}")
    n, c, h, w = x.shape
    ci, o, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"transposed conv channel mismatch: input {x.shape}, kernel {kernel.shape}")
    out = np.einsum("nchw,coij->nohiwj", x.data, kernel.data, optimize=True)
    out = out.reshape(n, o, h * kh, w * kw)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)

    def bw(g):
        g6 = g.reshape(n, o, h, kh, w, kw)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.einsum("nohiwj,coij->nchw", g6, kernel.data, optimize=True)
        if kernel.requires_grad:
            gk = np.einsum("nchw,nohiwj->coij", x.data, g6, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb)[: len(inputs)]

    return make_op(out, inputs, bw)


def _squeeze0(t: Tensor) -> Tensor:
    return t.reshape(t.shape[1:])


class Conv2D(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        if stride < 1 or padding < 0 or kernel_size < 1:
            raise ConfigurationError("conv2d needs kernel >= 1, stride >= 1, padding >= 0")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel_size * kernel_size
        self.kernel = Parameter((out_ch, in_ch, kernel_size, kernel_size), "he", fan_in=fan_in)
        self.bias = Parameter((out_ch,), "zeros") if bias else None

    def __call__(self, x):
        return conv2d(x, self)


class TransposedConv2D(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 2, stride: int = 2, bias: bool = True):
        if kernel_size != stride:
            raise ConfigurationError("transposed conv supports kernel_size == stride only")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride = stride
        # every output pixel receives exactly one input pixel per channel
        self.kernel = Parameter((in_ch, out_ch, kernel_size, kernel_size), "he", fan_in=in_ch)
        self.bias = Parameter((out_ch,), "zeros") if bias else None

    def __call__(self, x):
        return transposed_conv2d(x, self)


def conv2d(x, layer: Conv2D) -> Tensor:
    """Zero-padded cross-correlation. Accepts (C,H,W) or (N,C,H,W)."""
    x = as_tensor(x)
    fn = lambda t: conv2d_raw(t, layer.kernel, layer.bias, layer.stride, layer.padding)
    return _squeeze0(fn(x.reshape((1,) + x.shape))) if x.ndim == 3 else fn(x)


def transposed_conv2d(x, layer: TransposedConv2D) -> Tensor:
    x = as_tensor(x)
    fn = lambda t: conv_transpose2d_raw(t, layer.kernel, layer.bias)
    return _squeeze0(fn(x.reshape((1,) + x.shape))) if x.ndim == 3 else fn(x)


# ---------------------------------------------------------------- normalization

def layer_norm_raw(x, scale, shift, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    ax = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    s = scale.data.reshape(bshape)
    out = xhat * s + shift.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        gx = gs = gb = None
        if x.requires_grad:
            gh = g * s
            gx = inv * (gh - gh.mean(axis=ax, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=ax, keepdims=True))
        if scale.requires_grad:
            gs = (g * xhat).sum(axis=red).reshape(scale.shape)
        if shift.requires_grad:
            gb = g.sum(axis=red).reshape(shift.shape)
        return gx, gs, gb

    return make_op(out, (x, scale, shift), bw)


class LayerNorm(Module):
    """Normalizes over one axis (channels) at every other position."""

    def __init__(self, channels: int, axis: int = -1, eps: float = 1e-5):
        self.axis = axis
        self.eps = eps
        self.scale = Parameter((channels,), "ones")
        self.shift = Parameter((channels,), "zeros")

    def __call__(self, x):
        return layer_norm(x, self)


def layer_norm(x, layer: LayerNorm) -> Tensor:
    return layer_norm_raw(x, layer.scale, layer.shift, layer.axis, layer.eps)


class Linear(Module):
    """Dense map over the last axis: x @ W + b, W of shape (in, out)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.weight = Parameter((in_features, out_features), "xavier",
                                fan_in=in_features, fan_out=out_features)
        self.bias = Parameter((out_features,), "zeros") if bias else None

    def __call__(self, x):
        y = as_tensor(x) @ self.weight
        return y + self.bias if self.bias is not None else y


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState):
    """One Adam update with bias correction, then decoupled weight decay.

    Parameters whose gradient is ``None`` are treated as receiving a zero
    gradient. ``params`` and ``state`` are updated in place and returned.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractError(f"moment for {name} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        theta = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = theta - state.lr * state.weight_decay * theta
    return params, state
