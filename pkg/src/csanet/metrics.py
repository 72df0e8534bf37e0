"""Dice and 95th-percentile Hausdorff distance on 3D masks with physical spacing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabelVolume
from .errors import InputError


@dataclass
class Mask:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=bool)
        if self.voxels.ndim != 3:
            raise InputError(f"mask must be D×H×W, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise InputError(f"spacing must be three positive values, got {self.spacing}")


@dataclass
class ClassMetrics:
    dsc: float
    hd95: float | None

    @property
    def undefined(self) -> bool:
        return self.hd95 is None


@dataclass
class MetricReport:
    """Per-class scores for foreground classes 1..K-1."""

    per_class: dict[int, ClassMetrics] = field(default_factory=dict)

    def mean_dsc(self) -> float:
        return float(np.mean([m.dsc for m in self.per_class.values()]))

    def mean_hd95(self) -> float | None:
        vals = [m.hd95 for m in self.per_class.values() if m.hd95 is not None]
        return float(np.mean(vals)) if vals else None


def _check_pair(g: Mask, p: Mask):
    if g.voxels.shape != p.voxels.shape:
        raise InputError(f"mask dims differ: {g.voxels.shape} vs {p.voxels.shape}")


def dsc(g: Mask, p: Mask) -> float:
    """2|G∩P| / (|G| + |P|); 1.0 when both masks are empty."""
    _check_pair(g, p)
    ng, npred = int(g.voxels.sum()), int(p.voxels.sum())
    if ng + npred == 0:
        return 1.0
    inter = int(np.logical_and(g.voxels, p.voxels).sum())
    return 2.0 * inter / (ng + npred)


def extract_boundary(m: Mask) -> np.ndarray:
    """(n, 3) indices of foreground voxels with a background 6-neighbor.

    Positions outside the volume count as background.
    """
    v = np.pad(m.voxels, 1, constant_values=False)
    core = v[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(v, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(core & ~interior)


def directed_distances(a: np.ndarray, b: np.ndarray, spacing, chunk: int = 2048) -> np.ndarray:
    """For each point of ``a``, the Euclidean distance (mm) to the nearest point of ``b``."""
    sp = np.asarray(spacing, dtype=np.float64)
    pa = a * sp
    pb = b * sp
    out = np.empty(len(pa))
    for start in range(0, len(pa), chunk):
        block = pa[start:start + chunk]
        d2 = ((block[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def percentile95(values: np.ndarray) -> float:
    """Nearest-rank 95th percentile: the ceil(0.95 n)-th smallest value."""
    s = np.sort(values)
    rank = (95 * s.size + 99) // 100
    return float(s[rank - 1])


def _boundaries(g: Mask, p: Mask):
    _check_pair(g, p)
    if tuple(g.spacing) != tuple(p.spacing):
        raise InputError(f"mask spacings differ: {g.spacing} vs {p.spacing}")
    return extract_boundary(g), extract_boundary(p)


def hd95(g: Mask, p: Mask) -> float | None:
    """Symmetric HD95 in mm between mask boundaries; None if either mask is empty."""
    bg, bp = _boundaries(g, p)
    if len(bg) == 0 or len(bp) == 0:
        return None
    return max(percentile95(directed_distances(bg, bp, g.spacing)),
               percentile95(directed_distances(bp, bg, g.spacing)))


def hausdorff(g: Mask, p: Mask) -> float | None:
    bg, bp = _boundaries(g, p)
    if len(bg) == 0 or len(bp) == 0:
        return None
    return float(max(directed_distances(bg, bp, g.spacing).max(),
                     directed_distances(bp, bg, g.spacing).max()))


def evaluate_volume(pred: LabelVolume, truth: LabelVolume, classes: int) -> MetricReport:
    """Binarize per foreground class and score DSC and HD95 in 3D."""
    if pred.dims != truth.dims:
        raise InputError(f"prediction {pred.dims} and truth {truth.dims} dims differ")
    if tuple(pred.spacing) != tuple(truth.spacing):
        raise InputError(f"prediction and truth spacings differ: {pred.spacing} vs {truth.spacing}")
    pred.check_classes(classes)
    truth.check_classes(classes)
    report = MetricReport()
    for k in range(1, classes):
        g = Mask(truth.data == k, truth.spacing)
        p = Mask(pred.data == k, pred.spacing)
        report.per_class[k] = ClassMetrics(dsc(g, p), hd95(g, p))
    return report
