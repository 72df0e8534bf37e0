"""CSA-Net: shared slice encoder, slice attention, ViT encoder, decoder, loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionAggregator, CSAModule, FeatureMap, ISAModule,
                        aggregate_attention, csa_forward, isa_forward, multihead_attention)
from .errors import ConfigurationError, InputError
from .nn import Conv2D, LayerNorm, Linear, Module, Parameter, TransposedConv2D, init_params
from .tensor import Tensor

CENTER_ROLES = ("keyvalue", "query")


@dataclass(frozen=True)
class EncoderConfig:
    height: int = 256
    width: int = 256
    r: int = 4
    channels: int = 64
    blocks_per_stage: int = 1
    in_channels: int = 1

    def __post_init__(self):
        if self.r < 1:
            raise ConfigurationError("downsampling exponent r must be >= 1")
        step = 2 ** self.r
        if self.height % step or self.width % step:
            raise ConfigurationError(
                f"input {self.height}x{self.width} is not divisible by 2^r = {step}")
        if self.blocks_per_stage < 1:
            raise ConfigurationError("blocks_per_stage must be >= 1")

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.height >> self.r, self.width >> self.r

    def stage_channels(self) -> list[int]:
        floor = min(8, self.channels)
        return [max(self.channels >> (self.r - 1 - i), floor) for i in range(self.r)]


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    tokens: int = 256
    width: int = 64

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigurationError("transformer layers must be >= 0")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class CSANetConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    layers: int = 2
    heads: int = 4
    classes: int = 2
    attn_scaling: bool = False
    center_role: str = "keyvalue"
    no_csa: bool = False
    no_isa: bool = False

    def __post_init__(self):
        C = self.encoder.channels
        if self.heads < 1 or C % (2 * self.heads):
            raise ConfigurationError(f"C={C} must be divisible by 2k={2 * self.heads}")
        if self.classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.center_role not in CENTER_ROLES:
            raise ConfigurationError(f"center_role must be one of {CENTER_ROLES}")

    @property
    def transformer(self) -> TransformerConfig:
        h, w = self.encoder.feature_size
        return TransformerConfig(layers=self.layers, heads=self.heads, tokens=h * w,
                                 width=self.encoder.channels)


@dataclass(frozen=True)
class LossWeights:
    ce_weight: float = 0.5
    dice_weight: float = 0.5
    smooth: float = 1e-5

    def __post_init__(self):
        if self.ce_weight < 0 or self.dice_weight < 0 or self.smooth < 0:
            raise ConfigurationError("loss weights must be non-negative")


# ---------------------------------------------------------------- encoder

class ResidualBlock(Module):
    """conv3x3-LN-ReLU-conv3x3-LN plus a shortcut, then ReLU.

    The shortcut is a plain 1x1 projection when shape changes. It is left
    unnormalized: per-position LN over the channels of a 1-channel stem
    would discard absolute intensity.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        self.conv1 = Conv2D(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = LayerNorm(out_ch, axis=1)
        self.conv2 = Conv2D(out_ch, out_ch, 3, padding=1)
        self.norm2 = LayerNorm(out_ch, axis=1)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2D(in_ch, out_ch, 1, stride=stride)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        sc = self.proj(x) if self.proj is not None else x
        return T.relu(y + sc)


class SliceEncoder(Module):
    """r stride-2 stages mapping 1×H×W slices to (H/2^r)×(W/2^r)×C features."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        blocks = []
        prev = cfg.in_channels
        for ch in cfg.stage_channels():
            blocks.append(ResidualBlock(prev, ch, stride=2))
            blocks.extend(ResidualBlock(ch, ch) for _ in range(cfg.blocks_per_stage - 1))
            prev = ch
        self.blocks = blocks

    def __call__(self, x) -> FeatureMap:
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, 1, *x.shape)
        elif x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        H, W = x.shape[-2:]
        if H != self.cfg.height or W != self.cfg.width:
            raise ConfigurationError(
                f"slice {H}x{W} does not match encoder input {self.cfg.height}x{self.cfg.width}")
        for block in self.blocks:
            x = block(x)
        return FeatureMap(T.transpose(x, (0, 2, 3, 1)))


def encode_slice(slice_, encoder: SliceEncoder) -> FeatureMap:
    """Encode one H×W (or 1×H×W) slice into an h×w×C feature map."""
    x = T.as_tensor(slice_)
    if x.ndim == 3:
        x = x.reshape(x.shape[1:])
    fm = encoder(x.reshape((1, 1) + x.shape))
    return FeatureMap(fm.values.reshape(fm.values.shape[1:]))


# ---------------------------------------------------------------- transformer

class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)); x + MLP(LN(x))."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        d = width // heads
        self.heads = heads
        self.norm1 = LayerNorm(width)
        self.w_q = Parameter((heads, width, d), "xavier", fan_in=width, fan_out=d)
        self.w_k = Parameter((heads, width, d), "xavier", fan_in=width, fan_out=d)
        self.w_v = Parameter((heads, width, d), "xavier", fan_in=width, fan_out=d)
        self.w_o = Parameter((heads * d, width), "xavier", fan_in=heads * d, fan_out=width)
        self.b_o = Parameter((width,), "zeros")
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width)
        self.fc2 = Linear(mlp_ratio * width, width)
        self.scale = 1.0 / np.sqrt(d)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm1(x)
        x = x + multihead_attention(y, y, self.w_q, self.w_k, self.w_v, self.w_o,
                                    scale=self.scale) + self.b_o
        y = self.norm2(x)
        return x + self.fc2(T.gelu(self.fc1(y)))


class VisionTransformer(Module):
    """1×1-patch ViT: each feature position is one token."""

    def __init__(self, cfg: TransformerConfig):
        self.cfg = cfg
        self.pos_embedding = Parameter((cfg.tokens, cfg.width), "normal")
        self.blocks = [TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio)
                       for _ in range(cfg.layers)]

    def __call__(self, f: FeatureMap) -> FeatureMap:
        return vit_encode(f, self)


def vit_encode(f: FeatureMap, vit: VisionTransformer) -> FeatureMap:
    if f.h * f.w != vit.cfg.tokens or f.C != vit.cfg.width:
        raise ConfigurationError(
            f"feature map {f.h}x{f.w}x{f.C} does not match {vit.cfg.tokens} tokens of width {vit.cfg.width}")
    x = f.flat() + vit.pos_embedding
    for block in vit.blocks:
        x = block(x)
    return FeatureMap.from_flat(x, f.h, f.w)


# ---------------------------------------------------------------- decoder

class DecoderBlock(Module):
    """Transposed conv (x2, halves channels) -> conv3x3-LN, residual, ReLU.

    Halving stops at ``floor`` channels, matching the encoder's narrowest stage.
    """

    def __init__(self, in_ch: int, out_ch: int | None = None, floor: int = 8):
        mid = max(in_ch // 2, min(floor, in_ch))
        out_ch = mid if out_ch is None else out_ch
        self.up = TransposedConv2D(in_ch, mid, 2, 2)
        self.conv = Conv2D(mid, out_ch, 3, padding=1)
        self.norm = LayerNorm(out_ch, axis=1)
        self.proj = Conv2D(mid, out_ch, 1) if mid != out_ch else None
        self.out_ch = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        u = self.up(x)
        sc = self.proj(u) if self.proj is not None else u
        return T.relu(self.norm(self.conv(u)) + sc)


class Decoder(Module):
    def __init__(self, channels: int, r: int, classes: int):
        blocks = []
        ch = channels
        for _ in range(r):
            blocks.append(DecoderBlock(ch))
            ch = blocks[-1].out_ch
        self.blocks = blocks
        self.head = Conv2D(ch, classes, 1)

    def __call__(self, f: FeatureMap) -> Tensor:
        return decode(f, self)


def decode(f: FeatureMap, dec: Decoder) -> Tensor:
    """Upsample an (N,)h×w×C map to (N,)K×H×W logits."""
    single = f.values.ndim == 3
    x = T.transpose(f.values, (2, 0, 1) if single else (0, 3, 1, 2))
    if single:
        x = x.reshape((1,) + x.shape)
    for block in dec.blocks:
        x = block(x)
    logits = dec.head(x)
    return logits.reshape(logits.shape[1:]) if single else logits


# ---------------------------------------------------------------- full network

class CSANet(Module):
    def __init__(self, cfg: CSANetConfig, seed: int = 0):
        self.cfg = cfg
        C = cfg.encoder.channels
        self.encoder = SliceEncoder(cfg.encoder)
        self.csa_prev = CSAModule(C, cfg.heads, cfg.attn_scaling)
        self.csa_next = CSAModule(C, cfg.heads, cfg.attn_scaling)
        self.isa = ISAModule(C, cfg.heads, cfg.attn_scaling)
        self.aggregator = AttentionAggregator(C)
        self.vit = VisionTransformer(cfg.transformer)
        self.decoder = Decoder(C, cfg.encoder.r, cfg.classes)
        init_params(seed, self)

    def frozen_prefixes(self) -> tuple[str, ...]:
        """Parameter name prefixes excluded from optimization by ablation flags."""
        out = []
        if self.cfg.no_csa:
            out += ["csa_prev.", "csa_next."]
        if self.cfg.no_isa:
            out.append("isa.")
        return tuple(out)

    def trainable_parameters(self) -> dict[str, Parameter]:
        frozen = self.frozen_prefixes()
        return {k: v for k, v in self.parameters().items() if not k.startswith(frozen)}

    def _cross(self, f_c: FeatureMap, f_nb: FeatureMap, module: CSAModule) -> FeatureMap:
        if self.cfg.center_role == "keyvalue":
            return csa_forward(f_c, f_nb, module)
        return csa_forward(f_nb, f_c, module)

    def attend(self, f_prev: FeatureMap | None, f_c: FeatureMap, f_next: FeatureMap | None) -> FeatureMap:
        zeros = FeatureMap(Tensor(np.zeros(f_c.values.shape)))
        if self.cfg.no_csa:
            a_prev = a_next = zeros
        else:
            a_prev = self._cross(f_c, f_prev, self.csa_prev)
            a_next = self._cross(f_c, f_next, self.csa_next)
        a_self = zeros if self.cfg.no_isa else isa_forward(f_c, self.isa)
        return aggregate_attention(a_prev, a_self, a_next, f_c, self.aggregator)

    def forward_batch(self, prev, center, next_) -> Tensor:
        """(N,H,W) slice stacks -> (N,K,H,W) logits."""
        prev, center, next_ = (np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
                               for a in (prev, center, next_))
        if not (prev.shape == center.shape == next_.shape) or center.ndim != 3:
            raise InputError(f"slice stacks must share an N×H×W shape, got "
                             f"{prev.shape}, {center.shape}, {next_.shape}")
        n = center.shape[0]
        if self.cfg.no_csa:
            f_c = self.encoder(center)
            f_prev = f_next = None
        else:
            feats = self.encoder(np.concatenate([prev, center, next_], axis=0)).values
            f_prev, f_c, f_next = (FeatureMap(feats[i * n:(i + 1) * n]) for i in range(3))
        g = self.attend(f_prev, f_c, f_next)
        return decode(vit_encode(g, self.vit), self.decoder)

    def __call__(self, prev, center, next_) -> Tensor:
        return self.forward_batch(prev, center, next_)


def forward(triplet, net: CSANet) -> Tensor:
    """Segment the center slice of one triplet; returns K×H×W logits."""
    shapes = {np.shape(triplet.prev), np.shape(triplet.center), np.shape(triplet.next)}
    if len(shapes) != 1:
        raise InputError(f"triplet slices differ in extent: {sorted(shapes)}")
    logits = net.forward_batch(np.asarray(triplet.prev)[None], np.asarray(triplet.center)[None],
                               np.asarray(triplet.next)[None])
    return logits.reshape(logits.shape[1:])


# ---------------------------------------------------------------- loss

def loss_terms(logits, labels, w: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, cross-entropy, dice loss) for (N,)K×H×W logits.

    Dice is computed per sample and class on softmax probabilities, then
    averaged over classes (background included) and samples.
    """
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = logits.reshape((1,) + logits.shape)
        labels = labels[None]
    K = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise InputError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K})")
    onehot = np.moveaxis(np.eye(K)[labels.astype(np.int64)], -1, 1)

    logp = T.log_softmax(logits, axis=1)
    ce = -(logp * onehot).sum(axis=1).mean()
    p = T.exp(logp)
    inter = (p * onehot).sum(axis=(2, 3))
    denom = p.sum(axis=(2, 3)) + onehot.sum(axis=(2, 3)) + w.smooth
    dice = (inter * 2.0 + w.smooth) / denom
    dice_loss = 1.0 - dice.mean()
    total = ce * w.ce_weight + dice_loss * w.dice_weight
    return total, ce, dice_loss


def compute_loss(logits, labels, w: LossWeights = LossWeights()) -> Tensor:
    return loss_terms(logits, labels, w)[0]
