"""Volumes, SVOL files, preprocessing, augmentation and synthetic data."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1
DTYPE_IMAGE = 0
DTYPE_LABEL = 1
_HEADER = struct.Struct("<4sIB3x3I3f")


def _spacing32(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in np.asarray(spacing, dtype=np.float32))
    if len(sp) != 3 or not all(s > 0 for s in sp):
        raise InputError(f"spacing must be three positive values, got {spacing}")
    return sp


@dataclass
class Volume:
    """D×H×W float32 intensities with (z, y, x) spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise InputError(f"volume must be D×H×W with D >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InputError("volume intensities must be finite")
        self.spacing = _spacing32(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """D×H×W integer class labels with (z, y, x) spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[0] < 1:
            raise InputError(f"label volume must be D×H×W with D >= 1, got {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 255):
            raise InputError("labels must fit in u8")
        self.data = data.astype(np.uint8)
        self.spacing = _spacing32(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def check_classes(self, classes: int):
        if self.data.size and int(self.data.max()) >= classes:
            raise InputError(f"label {int(self.data.max())} out of range for {classes} classes")


@dataclass
class SliceTriplet:
    prev: np.ndarray
    center: np.ndarray
    next: np.ndarray
    center_label: np.ndarray
    volume_id: str = ""
    index: int = 0

    def __post_init__(self):
        shapes = {a.shape for a in (self.prev, self.center, self.next, self.center_label)}
        if len(shapes) != 1:
            raise InputError(f"triplet extents differ: {sorted(shapes)}")


@dataclass
class DatasetManifest:
    """(image path, label path, split) records; relative paths resolve against ``root``."""

    records: list[tuple[str, str, str]]
    root: Path = field(default_factory=Path)
    clahe: bool = False

    def split(self, tag: str) -> list[tuple[Path, Path]]:
        return [(self.root / img, self.root / lab) for img, lab, s in self.records if s == tag]


# ---------------------------------------------------------------- SVOL I/O

def write_volume(v: Volume | LabelVolume, path) -> None:
    if isinstance(v, LabelVolume):
        dtype, raw = DTYPE_LABEL, v.data.astype("<u1").tobytes()
    else:
        dtype, raw = DTYPE_IMAGE, v.data.astype("<f4").tobytes()
    d, h, w = v.dims
    header = _HEADER.pack(SVOL_MAGIC, SVOL_VERSION, dtype, d, h, w, *v.spacing)
    Path(path).write_bytes(header + raw)


def read_volume(path) -> Volume | LabelVolume:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != SVOL_MAGIC:
        raise FormatError("bad magic, expected b'SVOL'", 0)
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header ({len(buf)} of {_HEADER.size} bytes)", len(buf))
    _, version, dtype, d, h, w, sz, sy, sx = _HEADER.unpack_from(buf)
    if version != SVOL_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype not in (DTYPE_IMAGE, DTYPE_LABEL):
        raise FormatError(f"unknown dtype code {dtype}", 8)
    if min(d, h, w) < 1:
        raise FormatError(f"empty dims {d}x{h}x{w}", 12)
    if not (sz > 0 and sy > 0 and sx > 0):
        raise FormatError("spacing must be positive", 24)
    itemsize = 4 if dtype == DTYPE_IMAGE else 1
    need = _HEADER.size + d * h * w * itemsize
    if len(buf) < need:
        raise FormatError(f"truncated raster: need {need} bytes, file has {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after raster", need)
    raster = np.frombuffer(buf, dtype="<f4" if dtype == DTYPE_IMAGE else "<u1",
                           count=d * h * w, offset=_HEADER.size).reshape(d, h, w)
    if dtype == DTYPE_IMAGE:
        return Volume(raster.astype(np.float32), (sz, sy, sx))
    return LabelVolume(raster.copy(), (sz, sy, sx))


def read_manifest(path, clahe: bool = False) -> DatasetManifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("train", "test"):
            raise InputError(f"{path}:{lineno}: expected 'image<TAB>label<TAB>train|test'")
        records.append((parts[0], parts[1], parts[2]))
    return DatasetManifest(records, path.parent, clahe)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["\t".join(r) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- preprocessing

def nearest_rank(sorted_values: np.ndarray, pct: int) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    n = sorted_values.size
    rank = max(1, (pct * n + 99) // 100)
    return float(sorted_values[rank - 1])


def normalize_percentile(v: Volume) -> Volume:
    """Min-max to [0, 1] between the 1st and 99th percentiles, clamped.

    A volume whose percentiles coincide maps to 0.5 everywhere.
    """
    flat = np.sort(v.data.astype(np.float64), axis=None)
    lo, hi = nearest_rank(flat, 1), nearest_rank(flat, 99)
    if hi <= lo:
        return Volume(np.full(v.dims, 0.5, dtype=np.float32), v.spacing)
    out = np.clip((v.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing)


def clahe(slice_: np.ndarray, tiles: int = 8, bins: int = 256, clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a [0, 1] slice.

    Each of the tiles×tiles regions gets a histogram clipped at
    ``clip_limit`` times the uniform bin height; the clipped excess is spread
    evenly over all bins. Pixels blend the four nearest tile mappings
    bilinearly (tile centers as nodes, clamped at the borders).
    """
    img = np.clip(np.asarray(slice_, dtype=np.float64), 0.0, 1.0)
    H, W = img.shape
    ty, tx = min(tiles, H), min(tiles, W)
    ey = np.round(np.linspace(0, H, ty + 1)).astype(int)
    ex = np.round(np.linspace(0, W, tx + 1)).astype(int)
    idx = np.minimum((img * bins).astype(int), bins - 1)

    luts = np.empty((ty, tx, bins))
    for i in range(ty):
        for j in range(tx):
            block = idx[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            n = block.size
            hist = np.bincount(block.ravel(), minlength=bins).astype(np.float64)
            limit = clip_limit * n / bins
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / bins
            luts[i, j] = np.cumsum(hist) / n

    cy = (ey[:-1] + ey[1:]) / 2.0
    cx = (ex[:-1] + ex[1:]) / 2.0
    fy = np.interp(np.arange(H) + 0.5, cy, np.arange(ty))
    fx = np.interp(np.arange(W) + 0.5, cx, np.arange(tx))
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, X0, Y1, X1 = y0[:, None], x0[None, :], y1[:, None], x1[None, :]
    top = (1 - wx) * luts[Y0, X0, idx] + wx * luts[Y0, X1, idx]
    bottom = (1 - wx) * luts[Y1, X0, idx] + wx * luts[Y1, X1, idx]
    return np.clip((1 - wy) * top + wy * bottom, 0.0, 1.0)


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize(slice_: np.ndarray, size: tuple[int, int], labels: bool = False) -> np.ndarray:
    """Resize a 2D slice: bilinear (half-pixel centers) or nearest for labels."""
    img = np.asarray(slice_)
    H, W = img.shape
    h, w = size
    if (H, W) == (h, w):
        return img.copy()
    if labels:
        ys = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
        xs = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
        return img[ys[:, None], xs[None, :]]
    sy = np.clip(_source_coords(h, H), 0, H - 1)
    sx = np.clip(_source_coords(w, W), 0, W - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    src = img.astype(np.float64)
    top = (1 - wx) * src[y0[:, None], x0[None, :]] + wx * src[y0[:, None], x1[None, :]]
    bot = (1 - wx) * src[y1[:, None], x0[None, :]] + wx * src[y1[:, None], x1[None, :]]
    return ((1 - wy) * top + wy * bot).astype(img.dtype if img.dtype.kind == "f" else np.float64)


def resize_volume(v: Volume | LabelVolume, size: tuple[int, int]):
    """Resize every slice in-plane; in-plane spacing scales by the resize factor."""
    d, H, W = v.dims
    labels = isinstance(v, LabelVolume)
    data = np.stack([resize(s, size, labels=labels) for s in v.data])
    sz, sy, sx = v.spacing
    return type(v)(data, (sz, sy * H / size[0], sx * W / size[1]))


def preprocess(v: Volume, size: tuple[int, int] | None = None, use_clahe: bool = False) -> Volume:
    """Percentile normalization, optional per-slice CLAHE, optional resize."""
    v = normalize_percentile(v)
    if use_clahe:
        v = Volume(np.stack([clahe(s) for s in v.data]), v.spacing)
    if size is not None and v.dims[1:] != tuple(size):
        v = resize_volume(v, size)
        v = Volume(np.clip(v.data, 0.0, 1.0), v.spacing)
    return v


# ---------------------------------------------------------------- triplets & augmentation

def extract_triplets(v: Volume, labels: LabelVolume, volume_id: str = "") -> list[SliceTriplet]:
    """One triplet per slice; missing neighbors at the ends replicate the edge slice."""
    if v.dims != labels.dims:
        raise InputError(f"image {v.dims} and label {labels.dims} dims differ")
    D = v.dims[0]
    return [SliceTriplet(v.data[max(i - 1, 0)], v.data[i], v.data[min(i + 1, D - 1)],
                         labels.data[i], volume_id, i) for i in range(D)]


def shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx) pixels with zero fill."""
    out = np.zeros_like(img)
    H, W = img.shape
    if abs(dy) >= H or abs(dx) >= W:
        return out
    src_y = slice(max(0, -dy), H - max(0, dy))
    dst_y = slice(max(0, dy), H - max(0, -dy))
    src_x = slice(max(0, -dx), W - max(0, dx))
    dst_x = slice(max(0, dx), W - max(0, -dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def augment(t: SliceTriplet, rng, flip_p: float = 0.5, max_shift: float = 0.1,
            brightness: float = 0.1) -> SliceTriplet:
    """Random horizontal flip, integer translation and brightness shift.

    Draw order is fixed (flip, dy, dx, delta) so a seeded generator
    reproduces the same augmentation. Labels are flipped/translated with the
    image but never brightness-shifted.
    """
    H, W = t.center.shape
    do_flip = rng.random() < flip_p
    my, mx = int(max_shift * H), int(max_shift * W)
    dy = int(rng.integers(-my, my + 1))
    dx = int(rng.integers(-mx, mx + 1))
    delta = float(rng.uniform(-brightness, brightness))

    def image(a):
        a = a[:, ::-1] if do_flip else a
        a = shift(a, dy, dx)
        return np.clip(a + delta, 0.0, 1.0).astype(a.dtype) if delta else a.copy()

    label = t.center_label[:, ::-1] if do_flip else t.center_label
    return SliceTriplet(image(t.prev), image(t.center), image(t.next), shift(label, dy, dx),
                        t.volume_id, t.index)


# ---------------------------------------------------------------- synthetic data

SYNTH_MODES = ("clean", "noisy-center")
CENTER_NOISE = {"clean": 0.0, "noisy-center": 0.4}


@dataclass
class SyntheticDataset:
    images: list[Volume]
    labels: list[LabelVolume]
    mode: str = "clean"
    classes: int = 2

    @property
    def center_noise(self) -> float:
        return CENTER_NOISE[self.mode]

    def __len__(self):
        return len(self.images)


def _ellipsoid_mask(shape, spacing, center, radii, angle) -> np.ndarray:
    """Voxels whose centers fall inside an ellipsoid rotated in-plane by ``angle``."""
    D, H, W = shape
    z = (np.arange(D) - center[0]) * spacing[0]
    y = (np.arange(H) - center[1]) * spacing[1]
    x = (np.arange(W) - center[2]) * spacing[2]
    Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    u = c * X + s * Y
    v = -s * X + c * Y
    return (Z / radii[0]) ** 2 + (v / radii[1]) ** 2 + (u / radii[2]) ** 2 <= 1.0


def generate_synthetic(seed: int, n_volumes: int, dims: Sequence[int] = (8, 64, 64),
                       mode: str = "clean", classes: int = 2,
                       spacing: Sequence[float] = (4.0, 1.0, 1.0),
                       noise: float = 0.05, contrast: float = 0.15) -> SyntheticDataset:
    """Volumes of 1-3 anisotropic ellipsoids on a flat background.

    Each ellipsoid takes a class in 1..classes-1; class k has intensity
    0.2 + k * ``contrast`` and Gaussian noise (sigma ``noise``) covers the
    whole volume. The label is the exact voxel-center rasterization. ``mode``
    only records how much extra noise the harness puts on center slices.

    The default contrast is 3 sigma of the base noise: a clean slice is easy
    to segment, while the 0.4 center noise of noisy-center runs buries a
    single slice (at contrast 0.6 a lone noisy slice stays readable and the
    neighbours add nothing).
    """
    if mode not in SYNTH_MODES:
        raise InputError(f"mode must be one of {SYNTH_MODES}")
    if contrast <= 0:
        raise InputError("contrast must be positive")
    D, H, W = dims
    spacing = _spacing32(spacing)
    images, labels = [], []
    for child in np.random.SeedSequence(seed).spawn(n_volumes):
        rng = np.random.default_rng(child)
        label = np.zeros((D, H, W), dtype=np.uint8)
        n_obj = int(rng.integers(1, 4))
        for _ in range(n_obj):
            cls = int(rng.integers(1, classes))
            r_plane = rng.uniform(0.12, 0.28, size=2) * np.array([H * spacing[1], W * spacing[2]])
            r_z = rng.uniform(0.25, 0.45) * D * spacing[0]
            center = (rng.uniform(0.3, 0.7) * (D - 1),
                      rng.uniform(0.3, 0.7) * (H - 1),
                      rng.uniform(0.3, 0.7) * (W - 1))
            mask = _ellipsoid_mask((D, H, W), spacing, center, (r_z, r_plane[0], r_plane[1]),
                                   rng.uniform(0, math.pi))
            label[mask] = cls
        levels = 0.2 + contrast * np.arange(classes)
        image = levels[label] + rng.normal(0.0, noise, size=label.shape)
        images.append(Volume(image.astype(np.float32), spacing))
        labels.append(LabelVolume(label, spacing))
    return SyntheticDataset(images, labels, mode, classes)


def add_center_noise(t: SliceTriplet, sigma: float, rng) -> SliceTriplet:
    """Corrupt only the center slice with Gaussian noise, clamped to [0, 1]."""
    if sigma <= 0:
        return t
    noisy = np.clip(t.center + rng.normal(0.0, sigma, size=t.center.shape), 0.0, 1.0)
    return replace(t, center=noisy.astype(t.center.dtype))


def write_synthetic(ds: SyntheticDataset, out_dir, n_train: int) -> Path:
    """Write volumes as SVOL plus a manifest; the first ``n_train`` are training."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        img_name, lab_name = f"vol{i:03d}_image.svol", f"vol{i:03d}_label.svol"
        write_volume(img, out / img_name)
        write_volume(lab, out / lab_name)
        records.append((img_name, lab_name, "train" if i < n_train else "test"))
    path = out / "manifest.tsv"
    write_manifest(DatasetManifest(records, out), path)
    return path
