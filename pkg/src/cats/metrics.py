"""Soft Dice loss for training; Dice, ASD and HD95 for evaluation.

Surface distances use the pooled symmetric convention: nearest-neighbour
distances from each surface to the other are collected into one sample,
whose mean is the ASD and whose 95th percentile (linear interpolation
between order statistics) is the HD95.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor

DICE_EPS = 1e-5
_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[B, ...] integer labels -> [B, K, ...] indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class index out of range [0, {num_classes - 1}]: "
                         f"found [{labels.min()}, {labels.max()}]")
    out = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(out, -1, 1)


def dice_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over classes (background included) of the batch soft Dice."""
    k = logits.shape[1]
    target = np.asarray(target)
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    t = one_hot(target, k, dtype=logits.dtype)
    p = ad.softmax(logits, axis=1)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = ad.sum(p * t, axis=axes)
    denom = ad.sum(p, axis=axes) + t.sum(axis=axes) + eps
    per_class = (inter * 2.0 + eps) / denom
    return 1.0 - ad.mean(per_class)


def _mask(x, cls=None) -> np.ndarray:
    data = getattr(x, "data", x)
    data = np.asarray(data)
    return data == cls if cls is not None else data.astype(bool)


def dice_score(pred, truth, cls: int = 1) -> float:
    """2|P & T| / (|P| + |T|); 1.0 when both are empty."""
    p, t = _mask(pred, cls), _mask(truth, cls)
    if p.shape != t.shape:
        raise ValueError(f"extent mismatch: {p.shape} vs {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def extract_surface(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Centres (mm) of mask voxels with a 6-neighbour outside the mask or the grid."""
    m = _mask(mask)
    if not m.any():
        return np.empty((0, 3))
    interior = ndimage.binary_erosion(m, structure=_SIX_NEIGHBOURS, border_value=0)
    return np.argwhere(m & ~interior) * np.asarray(spacing, dtype=np.float64)


def surface_distances(pred, truth, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled nearest-neighbour distances, pred->truth followed by truth->pred."""
    sp, st = extract_surface(pred, spacing), extract_surface(truth, spacing)
    if not len(sp) or not len(st):
        return np.empty(0)
    d_pt, _ = cKDTree(st).query(sp)
    d_tp, _ = cKDTree(sp).query(st)
    return np.concatenate([d_pt, d_tp])


def asd(pred, truth, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm; NaN if either mask is empty."""
    d = surface_distances(pred, truth, spacing)
    return float(d.mean()) if d.size else math.nan


def hd95(pred, truth, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled surface distances in mm; NaN if either mask is empty."""
    d = surface_distances(pred, truth, spacing)
    return float(np.percentile(d, 95)) if d.size else math.nan


# -- reports -----------------------------------------------------------------------

@dataclass
class CaseMetrics:
    case: str
    cls: int
    dice: float
    asd_mm: float
    hd95_mm: float
    # "", "both_empty", "pred_empty" or "truth_empty"
    flag: str = ""


@dataclass
class MetricsReport:
    records: list[CaseMetrics] = field(default_factory=list)
    class_names: dict[int, str] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted({r.cls for r in self.records})

    @property
    def cases(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.case)
        return list(seen)

    def name(self, cls: int) -> str:
        return self.class_names.get(cls, str(cls))

    def values(self, metric: str, cls: int) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.records if r.cls == cls], dtype=float)

    def summary(self) -> dict[str, dict[int, tuple[float, float]]]:
        """metric -> class -> (mean, std) across cases; undefined distances are skipped."""
        out: dict[str, dict[int, tuple[float, float]]] = {}
        for metric in ("dice", "asd_mm", "hd95_mm"):
            out[metric] = {}
            for c in self.classes:
                v = self.values(metric, c)
                v = v[~np.isnan(v)]
                out[metric][c] = (float(v.mean()), float(v.std())) if v.size else \
                    (math.nan, math.nan)
        return out

    def mean_foreground_dice(self) -> float:
        means = [m for m, _ in self.summary()["dice"].values()]
        return float(np.mean(means)) if means else math.nan

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["case", "class", "name", "dice", "asd_mm", "hd95_mm", "flag"])
        for r in self.records:
            w.writerow([r.case, r.cls, self.name(r.cls), _fmt(r.dice), _fmt(r.asd_mm),
                        _fmt(r.hd95_mm), r.flag])
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "MetricsReport":
        rows = list(csv.DictReader(io.StringIO(text), delimiter="\t"))
        report = cls()
        for row in rows:
            c = int(row["class"])
            report.class_names[c] = row["name"]
            report.records.append(CaseMetrics(row["case"], c, float(row["dice"]),
                                              float(row["asd_mm"]), float(row["hd95_mm"]),
                                              row["flag"]))
        return report


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def evaluate_case(case: str, pred, truth, classes, spacing=None) -> list[CaseMetrics]:
    """Per-class metrics for one case; spacing defaults to the truth volume's."""
    p_all = np.asarray(getattr(pred, "data", pred))
    t_all = np.asarray(getattr(truth, "data", truth))
    if p_all.shape != t_all.shape:
        raise ValueError(f"{case}: extent mismatch {p_all.shape} vs {t_all.shape}")
    spacing = spacing or getattr(truth, "spacing", (1.0, 1.0, 1.0))
    out = []
    for c in classes:
        p, t = p_all == c, t_all == c
        flag = ""
        if not p.any() and not t.any():
            flag = "both_empty"
        elif not p.any():
            flag = "pred_empty"
        elif not t.any():
            flag = "truth_empty"
        out.append(CaseMetrics(case, int(c), dice_score(p, t, None), asd(p, t, spacing),
                               hd95(p, t, spacing), flag))
    return out
