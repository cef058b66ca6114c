"""Running-mean class prototypes and the feature-prototype alignment loss."""

from __future__ import annotations

import csv
import logging
import struct

import numpy as np

from . import autodiff as ad
from .hierarchy import Hierarchy
from .segmodel import FeatureBatch

logger = logging.getLogger(__name__)

# fixed generic projection used to put rows in a canonical order
_ORDER_KEY = np.random.default_rng(20240601).standard_normal(4096)


class PrototypeBank:
    """One centroid per class plus the number of features it has absorbed.

    ``level`` is ``"micro"`` or ``"macro"``; a macro bank expects the
    hierarchy on every call and aggregates features by ``f(label)``.
    """

    def __init__(self, n_classes: int, feature_dim: int, level: str = "micro"):
        if level not in ("micro", "macro"):
            raise ValueError(f"level must be 'micro' or 'macro', got {level!r}")
        self.level = level
        self.F = int(feature_dim)
        self.centroids = np.zeros((n_classes, self.F))
        self.counts = np.zeros(n_classes, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    def copy(self) -> "PrototypeBank":
        out = PrototypeBank(self.n_classes, self.F, self.level)
        out.centroids = self.centroids.copy()
        out.counts = self.counts.copy()
        return out

    def __eq__(self, other):
        return (
            isinstance(other, PrototypeBank)
            and self.level == other.level
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.centroids, other.centroids)
        )

    def targets(self, batch: FeatureBatch, h: Hierarchy | None = None) -> np.ndarray:
        return _bank_labels(self, batch.labels, h)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "k", *[f"g{i}" for i in range(self.F)]])
            for c in range(self.n_classes):
                w.writerow([c, int(self.counts[c]), *[repr(float(x)) for x in self.centroids[c]]])

    def to_bytes(self) -> bytes:
        head = struct.pack("<BII", 0 if self.level == "micro" else 1, self.n_classes, self.F)
        return head + self.counts.astype("<u8").tobytes() + self.centroids.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["PrototypeBank", int]:
        lvl, n, F = struct.unpack_from("<BII", buf, offset)
        offset += 9
        bank = cls(n, F, "micro" if lvl == 0 else "macro")
        bank.counts = np.frombuffer(buf, "<u8", n, offset).astype(np.int64)
        offset += 8 * n
        bank.centroids = np.frombuffer(buf, "<f8", n * F, offset).reshape(n, F).copy()
        offset += 8 * n * F
        return bank, offset


def _bank_labels(bank: PrototypeBank, labels: np.ndarray, h: Hierarchy | None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if bank.level == "macro":
        if h is None:
            raise ValueError("macro bank needs the hierarchy")
        labels = h.f[labels]
    return labels


def _rows(features) -> np.ndarray:
    return np.asarray(getattr(features, "data", features), dtype=np.float64)


def update(bank: PrototypeBank, batch: FeatureBatch, h: Hierarchy | None = None) -> PrototypeBank:
    """Fold one batch into the running means in place (and return the bank).

    Per class: new = (k * old + sum of batch rows) / (k + n_c).
    """
    X = _rows(batch.features)
    if X.ndim != 2 or X.shape[1] != bank.F:
        raise ValueError(f"feature width {X.shape[1:]} does not match bank width {bank.F}")
    labels = _bank_labels(bank, batch.labels, h)
    n_c = np.bincount(labels, minlength=bank.n_classes)
    seen = n_c > 0
    sums = np.zeros_like(bank.centroids)
    if len(labels):
        # canonical row order makes the float sums independent of batch order
        order = np.lexsort((X @ _ORDER_KEY[: X.shape[1]], labels))
        starts = np.concatenate([[0], np.cumsum(n_c)[:-1]])[seen]
        sums[seen] = np.add.reduceat(X[order], starts, axis=0)
    k_new = bank.counts + n_c
    bank.centroids[seen] = (bank.counts[seen, None] * bank.centroids[seen] + sums[seen]) / k_new[seen, None]
    bank.counts = k_new
    return bank


def proto_loss(bank: PrototypeBank, batch: FeatureBatch, h: Hierarchy | None = None) -> ad.Tensor:
    """Mean over present classes of the per-class mean L1 distance to the prototype.

    Prototypes enter as constants, so gradients reach only the features.
    """
    feats = batch.features if isinstance(batch.features, ad.Tensor) else ad.Tensor(batch.features)
    n = feats.shape[0]
    if n == 0:
        logger.warning("empty batch; prototype loss is 0")
        return ad.Tensor(0.0)
    if feats.shape[1] != bank.F:
        raise ValueError(f"feature width {feats.shape[1]} does not match bank width {bank.F}")
    labels = _bank_labels(bank, batch.labels, h)
    n_c = np.bincount(labels, minlength=bank.n_classes)
    m_present = np.count_nonzero(n_c)
    row_w = 1.0 / (m_present * n_c[labels])
    diff = ad.sub(feats, ad.Tensor(bank.centroids[labels]))
    per_row = ad.sum_(ad.abs_(diff), axis=1)
    return ad.sum_(ad.mul(per_row, ad.Tensor(row_w)))
