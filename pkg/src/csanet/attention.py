"""Cross-slice and in-slice attention, and their aggregation.

Feature maps are channels-last (..., h, w, C). Attention flattens the spatial
grid to hw tokens, so for a single head the cross-slice output is

    softmax((f_n W_theta)(f_c W_phi)^T) (f_c W_psi) W_g

with queries taken from the neighbor map and keys/values from the center map.
In-slice attention is the same computation with all three projections read
from the center map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Module, Parameter
from .tensor import Tensor


@dataclass
class FeatureMap:
    """Channels-last slice features; ``values`` has shape (..., h, w, C)."""

    values: Tensor

    @property
    def h(self) -> int:
        return self.values.shape[-3]

    @property
    def w(self) -> int:
        return self.values.shape[-2]

    @property
    def C(self) -> int:
        return self.values.shape[-1]

    @property
    def extent(self) -> tuple[int, int, int]:
        return self.h, self.w, self.C

    def flat(self) -> Tensor:
        lead = self.values.shape[:-3]
        return self.values.reshape(lead + (self.h * self.w, self.C))

    @classmethod
    def from_flat(cls, tokens: Tensor, h: int, w: int) -> "FeatureMap":
        lead = tokens.shape[:-2]
        return cls(tokens.reshape(lead + (h, w, tokens.shape[-1])))


def _check_heads(C: int, heads: int):
    if heads < 1 or C % (2 * heads) != 0:
        raise ConfigurationError(f"channels C={C} must be divisible by 2*heads={2 * heads}")


def multihead_attention(query_tokens: Tensor, kv_tokens: Tensor, w_q: Tensor, w_k: Tensor,
                        w_v: Tensor, w_out: Tensor, scale: float = 1.0,
                        return_weights: bool = False):
    """Multi-head attention over token matrices.

    ``query_tokens``/``kv_tokens``: (..., n, C). Per-head projections have
    shape (k, C, d); ``w_out`` maps the concatenated k*d head outputs. Each
    row of the (..., k, n, n) weight tensor is a softmax over key positions.
    """
    xq = T.reshape(query_tokens, query_tokens.shape[:-2] + (1,) + query_tokens.shape[-2:])
    xkv = T.reshape(kv_tokens, kv_tokens.shape[:-2] + (1,) + kv_tokens.shape[-2:])
    q = xq @ w_q                      # (..., k, n, d)
    k = xkv @ w_k
    v = xkv @ w_v
    scores = q @ T.swapaxes(k, -1, -2)
    if scale != 1.0:
        scores = scores * scale
    weights = T.softmax(scores, axis=-1)
    heads = weights @ v               # (..., k, n, d)
    nd = heads.ndim
    merged = T.swapaxes(heads, nd - 3, nd - 2)   # (..., n, k, d)
    merged = merged.reshape(merged.shape[:-2] + (merged.shape[-2] * merged.shape[-1],))
    out = merged @ w_out
    return (out, weights) if return_weights else out


class _SliceAttention(Module):
    def __init__(self, channels: int, heads: int = 1, scaled: bool = False):
        _check_heads(channels, heads)
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // (2 * heads)
        self.scaled = scaled

    def _proj(self):
        d = self.head_dim
        return Parameter((self.heads, self.channels, d), "xavier", fan_in=self.channels, fan_out=d)

    def _out(self):
        half = self.channels // 2
        return Parameter((half, self.channels), "xavier", fan_in=half, fan_out=self.channels)

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim) if self.scaled else 1.0


class CSAModule(_SliceAttention):
    """Cross-slice attention weights: theta (query), phi (key), psi (value), g (output)."""

    def __init__(self, channels: int, heads: int = 1, scaled: bool = False):
        super().__init__(channels, heads, scaled)
        self.w_theta = self._proj()
        self.w_phi = self._proj()
        self.w_psi = self._proj()
        self.w_g = self._out()


class ISAModule(_SliceAttention):
    """In-slice attention weights: alpha (query), beta (key), gamma (value), epsilon (output)."""

    def __init__(self, channels: int, heads: int = 1, scaled: bool = False):
        super().__init__(channels, heads, scaled)
        self.w_alpha = self._proj()
        self.w_beta = self._proj()
        self.w_gamma = self._proj()
        self.w_epsilon = self._out()


def _check_maps(*maps: FeatureMap):
    ref = maps[0].values.shape
    for m in maps[1:]:
        if m.values.shape != ref:
            raise DimensionError(f"feature map extents differ: {ref} vs {m.values.shape}")


def csa_forward(f_c: FeatureMap, f_n: FeatureMap, m: CSAModule, return_weights: bool = False):
    """Cross-slice attention: neighbor positions query the center slice."""
    _check_maps(f_c, f_n)
    _check_heads(f_c.C, m.heads)
    if f_c.C != m.channels:
        raise ConfigurationError(f"module built for C={m.channels}, feature map has C={f_c.C}")
    kv = f_c.flat()
    out = multihead_attention(f_n.flat(), kv, m.w_theta, m.w_phi, m.w_psi, m.w_g,
                              scale=m.scale, return_weights=return_weights)
    if return_weights:
        out, weights = out
        return FeatureMap.from_flat(out, f_c.h, f_c.w), weights
    return FeatureMap.from_flat(out, f_c.h, f_c.w)


def isa_forward(f_c: FeatureMap, m: ISAModule, return_weights: bool = False):
    """In-slice self-attention over the center slice's positions."""
    _check_heads(f_c.C, m.heads)
    if f_c.C != m.channels:
        raise ConfigurationError(f"module built for C={m.channels}, feature map has C={f_c.C}")
    x = f_c.flat()
    out = multihead_attention(x, x, m.w_alpha, m.w_beta, m.w_gamma, m.w_epsilon,
                              scale=m.scale, return_weights=return_weights)
    if return_weights:
        out, weights = out
        return FeatureMap.from_flat(out, f_c.h, f_c.w), weights
    return FeatureMap.from_flat(out, f_c.h, f_c.w)


class AttentionAggregator(Module):
    """1×1 projection of [a_prev | a_self | a_next | f_c] (4C channels) down to C."""

    def __init__(self, channels: int):
        self.channels = channels
        self.weight = Parameter((4 * channels, channels), "xavier",
                                fan_in=4 * channels, fan_out=channels)
        self.bias = Parameter((channels,), "zeros")


def aggregate_attention(a_prev: FeatureMap, a_self: FeatureMap, a_next: FeatureMap,
                        f_c: FeatureMap, agg: AttentionAggregator) -> FeatureMap:
    _check_maps(a_prev, a_self, a_next, f_c)
    if f_c.C != agg.channels:
        raise DimensionError(f"aggregator built for C={agg.channels}, inputs have C={f_c.C}")
    stacked = T.concat([a_prev.values, a_self.values, a_next.values, f_c.values], axis=-1)
    return FeatureMap(stacked @ agg.weight + agg.bias)
