"""Mine a micro-to-macro class hierarchy from a model's mistakes.

The confusion matrix of validation predictions is row-normalized into
conditional error probabilities, symmetrized, and treated as a weighted
graph over classes. Spectral clustering of that graph gives the macro
classes; the number of macro classes comes from a conductance curve.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

KMEANS_RESTARTS = 20
EXHAUSTIVE_LIMIT = 12


@dataclass(eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows = ground truth, columns = prediction

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @property
    def m(self) -> int:
        return self.counts.shape[0]

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass(eq=False)
class ConfusionGraph:
    weights: np.ndarray  # symmetric, zero diagonal, entries in [0, 1]

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)


@dataclass(frozen=True)
class Hierarchy:
    mapping: tuple[int, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        mapping = tuple(int(x) for x in self.mapping)
        object.__setattr__(self, "mapping", mapping)
        if not mapping:
            raise ValueError("empty hierarchy")
        M = max(mapping) + 1
        if min(mapping) < 0 or sorted(set(mapping)) != list(range(M)):
            raise ValueError(f"mapping must be surjective onto 0..M-1, got {mapping}")
        if self.names is not None:
            names = tuple(self.names)
            object.__setattr__(self, "names", names)
            if len(names) != len(mapping):
                raise ValueError("names and mapping differ in length")
            if len(set(names)) != len(names):
                raise ValueError("duplicate micro class names")

    @property
    def m(self) -> int:
        return len(self.mapping)

    @property
    def M(self) -> int:
        return max(self.mapping) + 1

    @property
    def f(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)

    def members(self, macro: int) -> list[int]:
        return [c for c, C in enumerate(self.mapping) if C == macro]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.f, minlength=self.M)

    def membership(self) -> np.ndarray:
        """(m, M) 0/1 matrix with a one at (c, f(c))."""
        out = np.zeros((self.m, self.M))
        out[np.arange(self.m), self.f] = 1.0
        return out

    @classmethod
    def identity(cls, m: int, names=None) -> "Hierarchy":
        return cls(tuple(range(m)), names)

    @classmethod
    def canonical(cls, labels: Sequence[int], names=None) -> "Hierarchy":
        """Relabel so macro ids follow the order of their smallest member."""
        remap: dict[int, int] = {}
        for lab in labels:
            remap.setdefault(int(lab), len(remap))
        return cls(tuple(remap[int(x)] for x in labels), names)


# -------------------------------------------------------------- confusion


def accumulate_confusion(batches: Iterable, m: int) -> ConfusionMatrix:
    """Argmax confusion counts over prediction batches.

    Each batch exposes ``labels`` and either ``predicted`` or
    ``probabilities`` (an array or a Tensor).
    """
    counts = np.zeros((m, m), dtype=np.int64)
    for batch in batches:
        truth = np.asarray(batch.labels, dtype=np.int64)
        pred = getattr(batch, "predicted", None)
        if pred is None:
            probs = batch.probabilities
            pred = np.asarray(getattr(probs, "data", probs)).argmax(axis=1)
        pred = np.asarray(pred, dtype=np.int64)
        counts += confusion_from_labels(truth, pred, m).counts
    return ConfusionMatrix(counts)


def confusion_from_labels(truth: np.ndarray, pred: np.ndarray, m: int) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    for name, arr in (("label", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= m):
            raise ValueError(f"{name} out of range [0, {m}): min {arr.min()}, max {arr.max()}")
    return ConfusionMatrix(np.bincount(truth * m + pred, minlength=m * m).reshape(m, m))


def to_graph(cm: ConfusionMatrix) -> ConfusionGraph:
    counts = cm.counts.astype(np.float64)
    totals = counts.sum(axis=1)
    unseen = np.flatnonzero(totals == 0)
    if unseen.size:
        logger.warning("classes %s have no validation points; their edges are zero", unseen.tolist())
    P = np.divide(counts, totals[:, None], out=np.zeros_like(counts), where=totals[:, None] > 0)
    W = (P + P.T) / 2
    np.fill_diagonal(W, 0.0)
    return ConfusionGraph(W)


# -------------------------------------------------------------- conductance


def _set_conductance(W: np.ndarray, deg: np.ndarray, inside: np.ndarray) -> float:
    vol_in = deg[inside].sum()
    vol_out = deg[~inside].sum()
    den = min(vol_in, vol_out)
    if den <= 0:
        return 1.0
    return float(W[np.ix_(inside, ~inside)].sum() / den)


def cluster_conductances(g: ConfusionGraph, h: Hierarchy) -> np.ndarray:
    """cut(S, rest) / min(vol S, vol rest) for every macro class S."""
    f = h.f
    deg = g.degrees
    return np.array([_set_conductance(g.weights, deg, f == C) for C in range(h.M)])


def conductance(g: ConfusionGraph, h: Hierarchy) -> float:
    """Conductance of a partition: the minimum over its macro classes.

    A one-cluster partition has no cut and is defined as 1.
    """
    if h.M == 1:
        return 1.0
    return float(cluster_conductances(g, h).min())


def _bipartitions(n: int) -> np.ndarray:
    """All 2^(n-1) - 1 proper bipartitions as boolean rows (node n-1 always outside)."""
    codes = np.arange(1, 2 ** (n - 1))
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def min_conductance_bipartition(W: np.ndarray) -> tuple[float, np.ndarray]:
    """Exhaustive search for the bipartition of least conductance."""
    n = len(W)
    if n < 2:
        raise ValueError("need at least two nodes")
    masks = _bipartitions(n)
    deg = W.sum(axis=1)
    S = masks.astype(np.float64)
    cut = np.einsum("ki,ij,kj->k", S, W, 1 - S)
    vin = S @ deg
    den = np.minimum(vin, deg.sum() - vin)
    phi = np.where(den > 0, cut / np.where(den > 0, den, 1.0), 1.0)
    k = int(np.argmin(phi))
    return float(phi[k]), masks[k]


def internal_conductance(W: np.ndarray, members: Sequence[int]) -> float:
    """Least bipartition conductance of the subgraph induced by ``members``.

    High values mean the cluster has no good internal cut. Singletons are
    treated as perfectly cohesive (1); an edgeless subgraph as 0.
    """
    idx = np.asarray(members)
    if len(idx) < 2:
        return 1.0
    sub = W[np.ix_(idx, idx)]
    if sub.sum() <= 0:
        return 0.0
    if len(idx) <= EXHAUSTIVE_LIMIT:
        return min_conductance_bipartition(sub)[0]
    return _sweep_conductance(sub)


def _sweep_conductance(W: np.ndarray) -> float:
    deg = W.sum(axis=1)
    emb = _spectral_embedding(W, 2, normalize_rows=False)
    order = np.argsort(emb[:, 1], kind="stable")
    best = 1.0
    inside = np.zeros(len(W), dtype=bool)
    for i in order[:-1]:
        inside[i] = True
        best = min(best, _set_conductance(W, deg, inside))
    return best


# ----------------------------------------------------------------- clustering


def _spectral_embedding(W: np.ndarray, K: int, normalize_rows: bool = True) -> np.ndarray:
    deg = W.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    L = np.eye(len(W)) - dinv[:, None] * W * dinv[None, :]
    _, vecs = np.linalg.eigh((L + L.T) / 2)
    X = vecs[:, :K]
    # eigh's sign is arbitrary; pin it so embeddings are reproducible
    signs = np.sign(X[np.argmax(np.abs(X), axis=0), np.arange(K)])
    X = X * np.where(signs == 0, 1.0, signs)
    if normalize_rows:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
    return X


def kmeans(X: np.ndarray, K: int, seed: int = 0, restarts: int = KMEANS_RESTARTS, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best inertia over restarts."""
    n = len(X)
    if not 1 <= K <= n:
        raise ValueError(f"K={K} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    best_inertia, best_labels = np.inf, None
    for _ in range(restarts):
        centers = [X[rng.integers(n)]]
        for _ in range(1, K):
            d2 = np.min(((X[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
            if d2.sum() <= 0:
                centers.append(X[rng.integers(n)])
            else:
                centers.append(X[rng.choice(n, p=d2 / d2.sum())])
        C = np.asarray(centers)
        labels = np.full(n, -1)
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
            new = d2.argmin(axis=1)
            # refill empty clusters with the farthest point
            for k in range(K):
                if not np.any(new == k):
                    far = int(np.argmax(d2[np.arange(n), new]))
                    new[far] = k
            if np.array_equal(new, labels):
                break
            labels = new
            C = np.array([X[labels == k].mean(axis=0) for k in range(K)])
        inertia = float(((X - C[labels]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def spectral_cluster(g: ConfusionGraph, K: int, seed: int = 0, names=None) -> Hierarchy:
    """K-way spectral clustering on the symmetric-normalized Laplacian.

    Zero-degree classes become singleton clusters before embedding. When the
    remaining nodes cannot fill ``K`` clusters, each becomes a singleton; when
    singletons alone exceed ``K``, the surplus isolated classes are folded into
    the existing clusters in round-robin order.
    """
    m = g.m
    if not 1 <= K <= m:
        raise ValueError(f"K={K} outside [1, {m}]")
    if K == 1:
        return Hierarchy((0,) * m, names)
    if K == m:
        return Hierarchy.identity(m, names)
    W = g.weights
    deg = W.sum(axis=1)
    iso = np.flatnonzero(deg <= 0)
    live = np.flatnonzero(deg > 0)
    labels = np.full(m, -1)
    k_live = K - len(iso)
    if len(live) == 0:
        k_live = 0
    elif k_live < 1:
        k_live = 1
    if k_live >= len(live):
        labels[live] = np.arange(len(live))
    elif k_live == 1:
        labels[live] = 0
    elif len(live):
        X = _spectral_embedding(W[np.ix_(live, live)], k_live)
        labels[live] = kmeans(X, k_live, seed=seed)
    n_live = len(np.unique(labels[live])) if len(live) else 0
    for j, c in enumerate(iso):
        slot = n_live + j
        labels[c] = slot if slot < K else j % K
    return Hierarchy.canonical(labels, names)


# ------------------------------------------------------ cluster-count choice


def partition_score(g: ConfusionGraph, h: Hierarchy) -> float:
    """Two-sided conductance quality of a partition (lower is better).

    max(worst cluster's external conductance, 1 - weakest cluster's internal
    conductance). Merging two communities lowers the internal term of the
    merged cluster; splitting one raises the external term of the halves.
    """
    ext = cluster_conductances(g, h).max() if h.M > 1 else 0.0
    cohesion = min(internal_conductance(g.weights, h.members(C)) for C in range(h.M))
    return float(max(ext, 1.0 - cohesion))


def conductance_curve(g: ConfusionGraph, seed: int = 0, score: str = "partition") -> dict[int, float]:
    """Score for K = 2..m-1 using ``spectral_cluster`` at each K."""
    fn = partition_score if score == "partition" else conductance
    return {K: fn(g, spectral_cluster(g, K, seed=seed)) for K in range(2, g.m)}


def strict_local_minima(values: Sequence[float]) -> list[int]:
    """Indices of strict local minima; endpoints compare with their single neighbour."""
    v = list(values)
    out = []
    for i, x in enumerate(v):
        left = v[i - 1] if i > 0 else np.inf
        right = v[i + 1] if i < len(v) - 1 else np.inf
        if len(v) > 1 and x < left and x < right:
            out.append(i)
    return out


def select_cluster_count(g: ConfusionGraph, seed: int = 0, rule: str = "minimum") -> int:
    """Number of macro classes from the conductance curve over K = 2..m-1.

    ``rule="minimum"`` (default) returns the K at the deepest local minimum of
    the two-sided partition score. ``rule="count"`` returns the number of
    strict local minima of the plain conductance curve, clamped to
    [2, m-1]; on monotone curves it falls back to the minimizing K.
    Flat curves return 2 with a warning under either rule.
    """
    m = g.m
    if m < 3:
        raise ValueError(f"cluster-count selection needs m >= 3, got {m}")
    if m == 3:
        return 2
    if rule == "minimum":
        curve = conductance_curve(g, seed, score="partition")
    elif rule == "count":
        curve = conductance_curve(g, seed, score="conductance")
    else:
        raise ValueError(f"unknown rule {rule!r}")
    ks = list(curve)
    vals = np.array([curve[k] for k in ks])
    if np.ptp(vals) <= 1e-12:
        logger.warning("flat conductance curve; defaulting to 2 macro classes")
        return 2
    if rule == "count":
        steps = np.diff(vals)
        if np.all(steps >= 0) or np.all(steps <= 0):
            return ks[int(np.argmin(vals))]
        return int(np.clip(len(strict_local_minima(vals)), 2, m - 1))
    return ks[int(np.argmin(vals))]


def mine_hierarchy(cm: ConfusionMatrix, seed: int = 0, names=None) -> tuple[Hierarchy, ConfusionGraph]:
    """accumulate -> graph -> cluster count -> spectral clustering.

    A graph with no off-diagonal mass (no mistakes) yields the identity
    hierarchy with a warning.
    """
    g = to_graph(cm)
    if g.weights.sum() <= 0:
        logger.warning("confusion graph has no mistakes; using the identity hierarchy")
        return Hierarchy.identity(cm.m, names), g
    if cm.m < 3:
        return Hierarchy((0,) * cm.m, names), g
    K = select_cluster_count(g, seed=seed)
    return spectral_cluster(g, K, seed=seed, names=names), g


# ------------------------------------------------------------------------ io


def hierarchy_to_json(h: Hierarchy) -> str:
    names = list(h.names) if h.names is not None else None
    return json.dumps({"M": h.M, "mapping": list(h.mapping), "names": names}, indent=2)


def hierarchy_from_json(text: str) -> Hierarchy:
    d = json.loads(text)
    mapping = [int(x) for x in d["mapping"]]
    h = Hierarchy(tuple(mapping), tuple(d["names"]) if d.get("names") is not None else None)
    if "M" in d and int(d["M"]) != h.M:
        raise ValueError(f"M={d['M']} but mapping covers {h.M} macro classes")
    return h


def save_hierarchy(h: Hierarchy, path) -> None:
    Path(path).write_text(hierarchy_to_json(h))


def load_hierarchy(path) -> Hierarchy:
    return hierarchy_from_json(Path(path).read_text())


def save_confusion_csv(cm: ConfusionMatrix, path, names: Sequence[str] | None = None) -> None:
    names = list(names) if names is not None else [f"c{i}" for i in range(cm.m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(cm.counts.tolist())


def load_confusion_csv(path) -> tuple[ConfusionMatrix, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names, body = rows[0], rows[1:]
    return ConfusionMatrix(np.array([[int(x) for x in r] for r in body])), names
