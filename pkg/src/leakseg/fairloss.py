"""Jain fairness of per-class self-probabilities inside each macro class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .hierarchy import Hierarchy
from .segmodel import PredictionBatch


@dataclass
class FairnessBreakdown:
    terms: list[float | None]  # per macro class; None when no member is present
    F: float
    self_probs: np.ndarray  # pi_{c,c}; NaN for absent classes
    counts: np.ndarray  # points per class in the batch

    def to_dict(self) -> dict:
        return {
            "terms": self.terms,
            "F": self.F,
            "self_probs": [None if np.isnan(x) else float(x) for x in self.self_probs],
            "counts": [int(x) for x in self.counts],
        }


def _probs(batch: PredictionBatch) -> ad.Tensor:
    p = batch.probabilities
    return p if isinstance(p, ad.Tensor) else ad.Tensor(p)


def average_predictions(batch: PredictionBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean probability vectors.

    Returns ``(pi, counts)``; rows of ``pi`` for classes absent from the
    batch are NaN.
    """
    P = _probs(batch).data
    m = P.shape[1]
    labels = np.asarray(batch.labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=m)
    sums = np.zeros((m, m))
    np.add.at(sums, labels, P)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = sums / counts[:, None]
    pi[counts == 0] = np.nan
    return pi, counts


def _self_probs(P: ad.Tensor, labels: np.ndarray, present: np.ndarray, counts: np.ndarray) -> ad.Tensor:
    """pi_{c,c} for present classes as a differentiable (1, k) row."""
    m = P.shape[1]
    avg = np.zeros((len(present), len(labels)))
    for r, c in enumerate(present):
        avg[r, labels == c] = 1.0 / counts[c]
    pi = ad.matmul(ad.Tensor(avg), P)  # (k, m)
    pick = np.zeros((len(present), m))
    pick[np.arange(len(present)), present] = 1.0
    diag = ad.sum_(ad.mul(pi, ad.Tensor(pick)), axis=1)
    return ad.reshape(diag, (1, len(present)))


def _fairness(batch: PredictionBatch, h: Hierarchy, normalize: bool) -> tuple[ad.Tensor, FairnessBreakdown]:
    P = _probs(batch)
    m = P.shape[1]
    if h.m != m:
        raise ValueError(f"hierarchy covers {h.m} classes, predictions have {m}")
    labels = np.asarray(batch.labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("fairness of an empty batch is undefined")
    counts = np.bincount(labels, minlength=m)
    present = np.flatnonzero(counts)
    x = _self_probs(P, labels, present, counts)

    f_present = h.f[present]
    live_macros = np.unique(f_present)
    xv = x.data[0]
    vacuous = [C for C in live_macros if np.all(xv[f_present == C] == 0)]
    active = [C for C in live_macros if C not in vacuous]

    terms_out: list[float | None] = [None] * h.M
    for C in vacuous:
        terms_out[C] = 1.0
    total = ad.Tensor(float(len(vacuous)))
    if active:
        G = np.zeros((len(present), len(active)))
        for j, C in enumerate(active):
            G[f_present == C, j] = 1.0
        m_eff = G.sum(axis=0, keepdims=True)
        # The index is scale invariant; dividing each macro by its (constant)
        # largest value keeps sum x^2 from underflowing for tiny probabilities.
        peak = np.ones(len(present))
        for C in active:
            peak[f_present == C] = xv[f_present == C].max()
        x = ad.div(x, ad.Tensor(peak[None, :]))
        s = ad.matmul(x, ad.Tensor(G))
        sq = ad.matmul(ad.mul(x, x), ad.Tensor(G))
        terms = ad.div(ad.mul(s, s), ad.mul(sq, ad.Tensor(m_eff)))
        for j, C in enumerate(active):
            terms_out[C] = float(terms.data[0, j])
        total = ad.add(ad.sum_(terms), total)
    F = ad.scale(total, 1.0 / len(live_macros)) if normalize else total

    self_probs = np.full(m, np.nan)
    self_probs[present] = xv
    return F, FairnessBreakdown(terms_out, F.item(), self_probs, counts)


def jain_fairness(batch: PredictionBatch, h: Hierarchy, normalize: bool = True) -> FairnessBreakdown:
    """Sum of per-macro Jain indices of pi_{c,c} over the present members.

    With ``normalize`` the sum is divided by the number of macro classes that
    have a present member, giving a value in (0, 1].
    """
    return _fairness(batch, h, normalize)[1]


def jain_index(values) -> float:
    """Plain Jain index (sum x)^2 / (n * sum x^2); 1 for an all-zero vector."""
    x = np.asarray(values, dtype=np.float64)
    peak = float(np.abs(x).max()) if x.size else 0.0
    if peak == 0:
        return 1.0
    x = x / peak
    sq = float((x * x).sum())
    return float(x.sum() ** 2 / (len(x) * sq))


def fairness_loss(batch: PredictionBatch, h: Hierarchy, normalize: bool = True) -> ad.Tensor:
    """1 - F, differentiable w.r.t. the probability rows."""
    F, _ = _fairness(batch, h, normalize)
    return ad.sub(ad.Tensor(1.0), F)
