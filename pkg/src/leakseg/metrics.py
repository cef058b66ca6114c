"""Evaluation metrics: IoU family, prototype geometry, class-balance stats."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .hierarchy import ConfusionMatrix, Hierarchy
from .protobank import PrototypeBank


@dataclass
class MetricsReport:
    miou: float
    fwiou: float
    per_class_iou: list[float | None]
    hiou: float | None = None
    theta_gamma: float | None = None
    ccd: float | None = None
    pd: float | None = None
    pcd: float | None = None
    sigma: float | None = None
    mse: float | None = None
    entropy: float | None = None
    fairness: float | None = None
    extra: dict = field(default_factory=dict)

    SCALARS = ("miou", "fwiou", "hiou", "theta_gamma", "ccd", "pd", "pcd", "sigma", "mse", "entropy", "fairness")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.SCALARS}
        for c, v in enumerate(self.per_class_iou):
            row[f"iou_{c}"] = v
        return row

    def write_csv(self, path) -> None:
        row = self.csv_row()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)


def _counts(cm) -> np.ndarray:
    arr = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty confusion matrix")
    return arr


def per_class_iou(cm) -> np.ndarray:
    """tp / (tp + fp + fn); NaN where the union is empty."""
    c = _counts(cm)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def iou_suite(cm) -> tuple[np.ndarray, float, float]:
    """(per-class IoU, mIoU, fwIoU).

    mIoU skips classes that are neither present nor predicted; fwIoU weights
    each class by its share of ground-truth points.
    """
    c = _counts(cm)
    iou = per_class_iou(c)
    valid = ~np.isnan(iou)
    miou = float(iou[valid].mean()) if valid.any() else float("nan")
    freq = c.sum(axis=1) / c.sum() if c.sum() > 0 else np.zeros(len(c))
    fw = float((freq[valid] * iou[valid]).sum())
    return iou, miou, fw


def fold_confusion(cm, h: Hierarchy) -> np.ndarray:
    """Map both axes through f: q[A, B] = sum of counts with f(i)=A, f(j)=B."""
    c = _counts(cm)
    if len(c) != h.m:
        raise ValueError(f"hierarchy covers {h.m} classes, matrix has {len(c)}")
    S = h.membership()
    return S.T @ c @ S


def hiou(cm, h: Hierarchy) -> float:
    """Mean macro-level IoU over macro classes with a nonempty union."""
    q = fold_confusion(cm, h)
    iou = per_class_iou(q)
    valid = ~np.isnan(iou)
    return float(iou[valid].mean())


def inter_proto_angle(bank: PrototypeBank) -> float:
    """Mean cosine similarity over ordered pairs of distinct, nonzero prototypes."""
    G = bank.centroids[bank.counts > 0]
    norms = np.linalg.norm(G, axis=1)
    G = G[norms > 0] / norms[norms > 0, None]
    k = len(G)
    if k < 2:
        raise ValueError(f"need at least two nonzero prototypes, have {k}")
    cos = G @ G.T
    return float((cos.sum() - np.trace(cos)) / (k * (k - 1)))


@dataclass
class FeatureGeometry:
    ccd: float
    pd: float
    pcd: float
    per_class: dict[int, tuple[float, float, float]]


def feature_geometry(features: np.ndarray, labels: np.ndarray, bank: PrototypeBank) -> FeatureGeometry:
    """Class-center distance, prototype distance and proto-center distance.

    Per class: mean Euclidean distance of its features to their own mean
    (CCD) and to the prototype (PD), and the distance between mean and
    prototype (PCD). Each is then averaged over classes with features.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    per = {}
    for c in np.unique(labels):
        if c >= bank.n_classes:
            raise ValueError(f"class {c} outside bank")
        Xc = X[labels == c]
        center = Xc.mean(axis=0)
        proto = bank.centroids[c]
        per[int(c)] = (
            float(np.linalg.norm(Xc - center, axis=1).mean()),
            float(np.linalg.norm(Xc - proto, axis=1).mean()),
            float(np.linalg.norm(center - proto)),
        )
    if not per:
        raise ValueError("no features to measure")
    vals = np.array(list(per.values()))
    return FeatureGeometry(*vals.mean(axis=0).tolist(), per_class=per)


def balance_stats(ious: Sequence[float]) -> tuple[float, float, float]:
    """(sigma, MSE, entropy) of a set of per-class IoUs.

    sigma is the population std, MSE the mean squared deviation from the
    mean IoU, entropy the natural-log Shannon entropy of the IoUs scaled to
    sum to one (0 when every IoU is 0).
    """
    x = np.asarray([v for v in ious if v is not None and not np.isnan(v)], dtype=np.float64)
    if x.size == 0:
        raise ValueError("balance stats need at least one IoU")
    dev = x - x.mean()
    mse = float(np.mean(dev * dev))
    sigma = float(np.sqrt(mse))
    total = x.sum()
    if total <= 0:
        return sigma, mse, 0.0
    p = x / total
    p = p[p > 0]
    return sigma, mse, float(-(p * np.log(p)).sum())
