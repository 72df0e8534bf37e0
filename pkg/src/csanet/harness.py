"""Training, evaluation, prediction, gradient checking and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .attention import (AttentionAggregator, CSAModule, FeatureMap, ISAModule,
                        aggregate_attention, csa_forward, isa_forward)
from .data import (LabelVolume, SliceTriplet, Volume, add_center_noise, augment,
                   extract_triplets, preprocess, read_manifest, read_volume, resize_volume,
                   write_volume)
from .errors import ConfigurationError, FormatError, InputError
from .metrics import evaluate_volume
from .model import (CSANet, CSANetConfig, Decoder, EncoderConfig, TransformerBlock,
                    loss_terms)
from .nn import (AdamState, Conv2D, LayerNorm, TransposedConv2D, adam_step, conv2d,
                 init_params, layer_norm, transposed_conv2d)
from .tensor import Tensor, finite_diff_grad, no_grad, rel_error

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 50
    batch_size: int = 8
    max_steps: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    image_size: int = 256
    r: int = 4
    channels: int = 64
    heads: int = 4
    layers: int = 2
    classes: int = 2
    blocks_per_stage: int = 1
    no_csa: bool = False
    no_isa: bool = False
    center_role: str = "keyvalue"
    attn_scaling: bool = False
    clahe: bool = False
    augment: bool = True
    center_noise: float = 0.0
    manifest: str = ""
    checkpoint: str = "checkpoint.ckpt"
    log: str = "train_log.csv"

    def validate(self) -> "RunConfig":
        for name in ("epochs", "batch_size", "image_size", "r", "channels", "heads", "classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.max_steps < 0 or self.layers < 0 or self.center_noise < 0:
            raise ConfigurationError("max_steps, layers and center_noise must be non-negative")
        model_config(self)
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = dataclasses.asdict(base or cls())
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(types[key], value, key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _parse_value(kind: str, value: str, key: str):
    try:
        if kind == "bool":
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigurationError(f"bad value {value!r} for {key} ({kind})") from None


ARCH_KEYS = ("image_size", "r", "channels", "heads", "layers", "classes", "blocks_per_stage",
             "no_csa", "no_isa", "center_role", "attn_scaling", "clahe")


def model_config(cfg: RunConfig) -> CSANetConfig:
    enc = EncoderConfig(cfg.image_size, cfg.image_size, cfg.r, cfg.channels, cfg.blocks_per_stage)
    return CSANetConfig(encoder=enc, layers=cfg.layers, heads=cfg.heads, classes=cfg.classes,
                        attn_scaling=cfg.attn_scaling, center_role=cfg.center_role,
                        no_csa=cfg.no_csa, no_isa=cfg.no_isa)


def check_compatible(saved: RunConfig, requested: RunConfig):
    """Refuse to reuse a checkpoint under a different architecture or ablation."""
    diff = [k for k in ARCH_KEYS if getattr(saved, k) != getattr(requested, k)]
    if diff:
        detail = ", ".join(f"{k}: checkpoint={getattr(saved, k)!r} requested={getattr(requested, k)!r}"
                           for k in diff)
        raise ConfigurationError(f"checkpoint incompatible with requested config ({detail})")


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_training(cls, cfg: RunConfig, net: CSANet, state: AdamState) -> "Checkpoint":
        return cls(cfg, {k: p.data.copy() for k, p in net.parameters().items()},
                   {k: a.copy() for k, a in state.m.items()},
                   {k: a.copy() for k, a in state.v.items()}, state.step)

    def build_model(self) -> CSANet:
        net = CSANet(model_config(self.config), seed=self.config.seed)
        params = net.parameters()
        if set(params) != set(self.params):
            missing = sorted(set(params) ^ set(self.params))
            raise FormatError(f"checkpoint parameters do not match the model: {missing[:5]}")
        for name, p in params.items():
            if p.shape != self.params[name].shape:
                raise FormatError(f"shape mismatch for {name}: model {p.shape}, "
                                  f"checkpoint {self.params[name].shape}")
            p.data = self.params[name].copy()
        return net

    def adam_state(self) -> AdamState:
        return AdamState(lr=self.config.lr, weight_decay=self.config.weight_decay,
                         step=self.step, m=dict(self.m), v=dict(self.v))


def _pack_entries(entries: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg_raw = ckpt.config.to_text().encode("utf-8")
    moments = {f"m:{k}": a for k, a in ckpt.m.items()}
    moments.update({f"v:{k}": a for k, a in ckpt.v.items()})
    blob = b"".join([
        CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
        struct.pack("<I", len(cfg_raw)), cfg_raw,
        _pack_entries(ckpt.params),
        _pack_entries(moments),
        struct.pack("<Q", ckpt.step),
    ])
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def entries(self, what: str) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32(f"{what} count")):
            name = self.take(self.u32("name length"), "name").decode("utf-8")
            rank = self.u32("rank")
            if rank > 8:
                raise FormatError(f"implausible rank {rank} for {name}", self.pos - 4)
            shape = tuple(self.u32("extent") for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(8 * count, f"data of {name}"),
                                      dtype="<f8").reshape(shape).astype(np.float64)
        return out


def load_checkpoint(path, expect: RunConfig | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic, expected b'CKPT'", 0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    cfg = RunConfig.from_text(r.take(r.u32("config length"), "config").decode("utf-8"))
    params = r.entries("parameter")
    moments = r.entries("moment")
    step = struct.unpack("<Q", r.take(8, "step counter"))[0]
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    m = {k[2:]: a for k, a in moments.items() if k.startswith("m:")}
    v = {k[2:]: a for k, a in moments.items() if k.startswith("v:")}
    if expect is not None:
        check_compatible(cfg, expect)
    return Checkpoint(cfg, params, m, v, step)


# ---------------------------------------------------------------- data plumbing

@dataclass
class Case:
    volume_id: str
    image: Volume          # preprocessed, at model resolution
    label: LabelVolume     # original resolution
    label_model: LabelVolume  # at model resolution


def load_cases(cfg: RunConfig, split: str) -> list[Case]:
    if not cfg.manifest:
        raise ConfigurationError("no manifest configured")
    manifest = read_manifest(cfg.manifest, clahe=cfg.clahe)
    cases = []
    size = (cfg.image_size, cfg.image_size)
    for img_path, lab_path in manifest.split(split):
        if not img_path.exists() or not lab_path.exists():
            raise ConfigurationError(f"manifest path not found: {img_path} / {lab_path}")
        image, label = read_volume(img_path), read_volume(lab_path)
        if not isinstance(image, Volume) or not isinstance(label, LabelVolume):
            raise InputError(f"{img_path.name}/{lab_path.name}: expected image then label volume")
        if image.dims != label.dims:
            raise InputError(f"{img_path.name}: image {image.dims} vs label {label.dims}")
        label.check_classes(cfg.classes)
        lab_model = resize_volume(label, size) if label.dims[1:] != size else label
        cases.append(Case(img_path.stem, preprocess(image, size, cfg.clahe), label, lab_model))
    return cases


def _stack(triplets: list[SliceTriplet]):
    return (np.stack([t.prev for t in triplets]), np.stack([t.center for t in triplets]),
            np.stack([t.next for t in triplets]), np.stack([t.center_label for t in triplets]))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epochs: list[dict]
    net: CSANet


def train(cfg: RunConfig, cases: list[Case] | None = None, write: bool = True) -> TrainResult:
    """Adam on the combined CE + Dice loss over shuffled slice triplets."""
    cfg.validate()
    if cases is None:
        cases = load_cases(cfg, "train")
    triplets = [t for c in cases for t in extract_triplets(c.image, c.label_model, c.volume_id)]
    if not triplets:
        raise InputError("training split is empty")

    net = CSANet(model_config(cfg), seed=cfg.seed)
    params = net.trainable_parameters()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(triplets))
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [triplets[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(t, rng) for t in batch]
            if cfg.center_noise > 0:
                batch = [add_center_noise(t, cfg.center_noise, rng) for t in batch]
            prev, center, nxt, labels = _stack(batch)
            net.zero_grad()
            logits = net(prev, center, nxt)
            total, ce, dice = loss_terms(logits, labels)
            T.backward(total)
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            sums += (total.item(), ce.item(), dice.item())
            batches += 1
            if cfg.max_steps and state.step >= cfg.max_steps:
                done = True
                break
        mean = sums / batches
        history.append({"epoch": epoch, "mean_loss": mean[0], "mean_ce": mean[1], "mean_dice": mean[2]})
        log.info("epoch %d loss %.5f (ce %.5f dice %.5f)", epoch, *mean)
        if done:
            break

    ckpt = Checkpoint.from_training(cfg, net, state)
    if write:
        save_checkpoint(ckpt, cfg.checkpoint)
        write_loss_log(history, cfg.log)
    return TrainResult(ckpt, history, net)


def write_loss_log(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,mean_ce,mean_dice\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['mean_loss']!r},{row['mean_ce']!r},{row['mean_dice']!r}\n")


# ---------------------------------------------------------------- inference

def segment(net: CSANet, image: Volume, batch_size: int = 16,
            center_noise: float = 0.0, rng=None) -> np.ndarray:
    """Argmax labels (D,H,W) for a preprocessed volume at model resolution."""
    dummy = LabelVolume(np.zeros(image.dims, dtype=np.uint8), image.spacing)
    triplets = extract_triplets(image, dummy)
    if center_noise > 0:
        triplets = [add_center_noise(t, center_noise, rng) for t in triplets]
    out = []
    with no_grad():
        for start in range(0, len(triplets), batch_size):
            prev, center, nxt, _ = _stack(triplets[start:start + batch_size])
            logits = net(prev, center, nxt).data
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out).astype(np.uint8)


def predict_case(net: CSANet, cfg: RunConfig, case: Case, rng=None) -> LabelVolume:
    pred = segment(net, case.image, center_noise=cfg.center_noise, rng=rng)
    pred = LabelVolume(pred, case.image.spacing)
    if pred.dims != case.label.dims:
        pred = resize_volume(pred, case.label.dims[1:])
    return LabelVolume(pred.data, case.label.spacing)


METRIC_FIELDS = ("volume_id", "class", "dsc", "hd95_mm", "undefined_flag")


def evaluate_cases(cases: list[Case], predictor: Callable[[Case], LabelVolume],
                   classes: int) -> list[dict]:
    """Per-volume, per-class rows followed by one mean row per class."""
    rows = []
    for case in cases:
        report = evaluate_volume(predictor(case), case.label, classes)
        for k, m in report.per_class.items():
            rows.append({"volume_id": case.volume_id, "class": k, "dsc": m.dsc,
                         "hd95_mm": m.hd95, "undefined_flag": int(m.undefined)})
    for k in range(1, classes):
        per = [r for r in rows if r["class"] == k]
        if not per:
            continue
        hds = [r["hd95_mm"] for r in per if r["hd95_mm"] is not None]
        rows.append({"volume_id": "mean", "class": k,
                     "dsc": float(np.mean([r["dsc"] for r in per])),
                     "hd95_mm": float(np.mean(hds)) if hds else None,
                     "undefined_flag": int(not hds)})
    return rows


def mean_foreground_dsc(rows: list[dict]) -> float:
    return float(np.mean([r["dsc"] for r in rows if r["volume_id"] == "mean"]))


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            hd = "" if r["hd95_mm"] is None else repr(r["hd95_mm"])
            w.writerow([r["volume_id"], r["class"], repr(r["dsc"]), hd, r["undefined_flag"]])


def evaluate(ckpt: Checkpoint, cfg: RunConfig | None = None, split: str = "test",
             cases: list[Case] | None = None) -> list[dict]:
    """Score a checkpoint on a manifest split (or preloaded cases)."""
    run = ckpt.config if cfg is None else cfg
    if cfg is not None:
        check_compatible(ckpt.config, cfg)
    net = ckpt.build_model()
    if cases is None:
        cases = load_cases(run, split)
    rng = np.random.default_rng([run.seed, 2])
    return evaluate_cases(cases, lambda c: predict_case(net, run, c, rng), run.classes)


def predict(ckpt: Checkpoint, volume_path, out_path) -> LabelVolume:
    """Segment one SVOL image volume and write the label volume."""
    cfg = ckpt.config
    image = read_volume(volume_path)
    if not isinstance(image, Volume):
        raise InputError(f"{volume_path} holds labels, not an image")
    size = (cfg.image_size, cfg.image_size)
    net = ckpt.build_model()
    pre = preprocess(image, size, cfg.clahe)
    pred = LabelVolume(segment(net, pre), pre.spacing)
    if pred.dims != image.dims:
        pred = resize_volume(pred, image.dims[1:])
    pred = LabelVolume(pred.data, image.spacing)
    write_volume(pred, out_path)
    return pred


# ---------------------------------------------------------------- gradient check

GRADCHECK_TOL = 1e-4


@dataclass
class GradGroup:
    name: str
    max_rel_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADCHECK_TOL


def _check_tensors(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], rng,
                   samples: int, h: float) -> tuple[float, int]:
    for t in tensors.values():
        t.grad = None
    T.backward(loss_fn())
    worst, count = 0.0, 0
    for t in tensors.values():
        flat = rng.choice(t.size, size=min(samples, t.size), replace=False)
        idx = [np.unravel_index(i, t.shape) for i in flat]
        numeric = finite_diff_grad(lambda _: loss_fn(), t, h, idx)
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        sel = tuple(np.array(ix) for ix in zip(*idx))
        worst = max(worst, rel_error(analytic[sel], numeric[sel]))
        count += len(idx)
    return worst, count


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)


def gradcheck(cfg: RunConfig | None = None, samples: int = 20, h: float = 1e-6,
              seed: int = 0) -> list[GradGroup]:
    """Backward vs. central differences for every building block and the full model.

    Each group reports the worst norm-wise relative error over its checked
    tensors (``samples`` random entries per tensor).
    """
    cfg = cfg or RunConfig(image_size=32, r=2, channels=16, heads=2, layers=1, classes=3)
    if cfg.image_size > 32 or cfg.channels > 16:
        raise ConfigurationError("gradcheck expects a tiny config (32x32, C <= 16)")
    rng = np.random.default_rng(seed)
    groups: list[GradGroup] = []

    def run(name, loss_fn, tensors):
        err, n = _check_tensors(loss_fn, tensors, rng, samples, h)
        groups.append(GradGroup(name, err, n))

    # tensor primitives composed into one scalar
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    c = Tensor(rng.uniform(0.5, 1.5, (3, 5)), requires_grad=True)

    def prim():
        m = T.matmul(a, b)
        s = T.softmax_rows(m * 2.0) + T.gelu(m) + T.relu(m - 0.1) * T.exp(m * 0.3)
        s = s + T.log(c) / c + c ** 3 - T.concat([m, c], axis=1)[:, 2:7]
        return (s * T.transpose(T.reshape(c, (5, 3)))).mean() + s.sum() * 0.1

    run("tensor_primitives", prim, {"a": a, "b": b, "c": c})

    conv = Conv2D(3, 4, 3, stride=2, padding=1)
    init_params(seed, conv)
    x = _leaf(rng, 2, 3, 8, 8)
    w = rng.normal(size=(2, 4, 4, 4))
    run("conv2d", lambda: (conv2d(x, conv) * w).sum(), {"x": x, **conv.parameters()})

    tconv = TransposedConv2D(4, 3)
    init_params(seed, tconv)
    x2 = _leaf(rng, 2, 4, 4, 4)
    w2 = rng.normal(size=(2, 3, 8, 8))
    run("transposed_conv2d", lambda: (transposed_conv2d(x2, tconv) * w2).sum(),
        {"x": x2, **tconv.parameters()})

    ln = LayerNorm(8, axis=1)
    init_params(seed, ln)
    ln.scale.data = rng.uniform(0.5, 1.5, 8)
    ln.shift.data = rng.uniform(-0.5, 0.5, 8)
    x3 = _leaf(rng, 2, 8, 4, 4)
    w3 = rng.normal(size=(2, 8, 4, 4))
    run("layer_norm", lambda: (layer_norm(x3, ln) * w3).sum(), {"x": x3, **ln.parameters()})

    C, k = 8, 2
    fc, fn = _leaf(rng, 3, 3, C), _leaf(rng, 3, 3, C)
    wt = rng.normal(size=(3, 3, C))
    csa = CSAModule(C, k)
    init_params(seed, csa)
    run("csa", lambda: (csa_forward(FeatureMap(fc), FeatureMap(fn), csa).values * wt).sum(),
        {"f_c": fc, "f_n": fn, **csa.parameters()})
    isa = ISAModule(C, k)
    init_params(seed + 1, isa)
    run("isa", lambda: (isa_forward(FeatureMap(fc), isa).values * wt).sum(),
        {"f_c": fc, **isa.parameters()})

    agg = AttentionAggregator(C)
    init_params(seed, agg)
    maps = [_leaf(rng, 3, 3, C) for _ in range(4)]
    run("aggregator",
        lambda: (aggregate_attention(*(FeatureMap(m) for m in maps), agg).values * wt).sum(),
        {**{f"in{i}": m for i, m in enumerate(maps)}, **agg.parameters()})

    block = TransformerBlock(C, k)
    init_params(seed, block)
    tokens = _leaf(rng, 4, C)
    wtok = rng.normal(size=(4, C))
    run("transformer_block", lambda: (block(tokens) * wtok).sum(), {"x": tokens, **block.parameters()})

    dec = Decoder(C, 2, 3)
    init_params(seed, dec)
    fdec = _leaf(rng, 2, 2, C)
    wdec = rng.normal(size=(3, 8, 8))
    run("decoder", lambda: (dec(FeatureMap(fdec)) * wdec).sum(), {"f": fdec, **dec.parameters()})

    logits = _leaf(rng, 2, 3, 4, 4, scale=2.0)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    run("loss", lambda: loss_terms(logits, labels)[0], {"logits": logits})

    # full model, grouped by top-level component
    net = CSANet(model_config(cfg), seed=cfg.seed)
    n_img = cfg.image_size
    slices = rng.uniform(0, 1, size=(3, 2, n_img, n_img))
    labels = rng.integers(0, cfg.classes, size=(2, n_img, n_img))

    def full():
        return loss_terms(net(slices[0], slices[1], slices[2]), labels)[0]

    params = net.parameters()
    tops = []
    for name in params:
        top = name.split(".")[0]
        if top not in tops:
            tops.append(top)
    for top in tops:
        if any(f"{top}.".startswith(p) for p in net.frozen_prefixes()):
            continue
        sel = {n: p for n, p in params.items() if n.startswith(top + ".")}
        run(f"model.{top}", full, sel)
    return groups


def format_gradcheck(groups: Iterable[GradGroup]) -> str:
    buf = io.StringIO()
    for g in groups:
        status = "PASS" if g.passed else "FAIL"
        buf.write(f"{status} {g.name:<24} max_rel_err={g.max_rel_error:.3e} entries={g.checked}\n")
    return buf.getvalue()
