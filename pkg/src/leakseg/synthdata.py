"""Synthetic point-cloud scenes with planted class families.

Each micro class is an isotropic Gaussian blob. Blobs of one planted family
sit around a shared family center, and a symmetric confusability matrix
pulls class centers toward each other (0 keeps the base layout, 1 merges
the pair). The planted family ids never leave the generator except for
validation of the hierarchy miner.

Binary dataset layout (little endian)::

    b"LEAK1"  u32 version  u32 scene_count
    per scene: u32 N, N*3 f64 coordinates (row major), N u16 labels
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"LEAK1"
FORMAT_VERSION = 1

# base layout in scene units
FAMILY_RADIUS = 2.5
MEMBER_RADIUS = 0.9
BLOB_SIGMA = 0.18


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...]
    planted_macro: tuple[int, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("catalog needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if len(self.planted_macro) != len(self.names):
            raise ValueError("planted_macro must have one entry per class")
        fams = sorted(set(self.planted_macro))
        if fams != list(range(len(fams))):
            raise ValueError(f"planted family ids must be contiguous from 0, got {fams}")

    @property
    def m(self) -> int:
        return len(self.names)

    @property
    def n_families(self) -> int:
        return max(self.planted_macro) + 1

    @classmethod
    def from_families(cls, sizes: Sequence[int]) -> "ClassCatalog":
        fam = [f for f, k in enumerate(sizes) for _ in range(k)]
        return cls(tuple(f"c{i}" for i in range(len(fam))), tuple(fam))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "planted_macro": list(self.planted_macro)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        return cls(tuple(d["names"]), tuple(int(x) for x in d["planted_macro"]))


@dataclass
class DatasetSpec:
    """Generation parameters.

    ``confusability`` is either a scalar applied to every within-family pair,
    or a full symmetric m x m matrix.
    """

    scenes: int
    points_per_scene: int
    class_frequency: Sequence[float]
    confusability: float | Sequence[Sequence[float]] = 0.0
    seed: int = 0

    def confusability_matrix(self, catalog: ClassCatalog) -> np.ndarray:
        m = catalog.m
        if np.isscalar(self.confusability):
            c = float(self.confusability)
            fam = np.asarray(catalog.planted_macro)
            mat = np.where(fam[:, None] == fam[None, :], c, 0.0)
        else:
            mat = np.asarray(self.confusability, dtype=np.float64)
            if mat.shape != (m, m):
                raise ValueError(f"confusability matrix must be {m}x{m}, got {mat.shape}")
            if not np.allclose(mat, mat.T):
                raise ValueError("confusability matrix must be symmetric")
        if np.any(mat < 0) or np.any(mat > 1):
            raise ValueError("confusability entries must lie in [0, 1]")
        np.fill_diagonal(mat, 0.0)
        return mat

    def validate(self, catalog: ClassCatalog) -> np.ndarray:
        freq = np.asarray(self.class_frequency, dtype=np.float64)
        if freq.shape != (catalog.m,):
            raise ValueError(f"class_frequency needs {catalog.m} entries, got {freq.shape}")
        if np.any(freq < 0):
            raise ValueError("class_frequency entries must be non-negative")
        if freq.sum() <= 0:
            raise ValueError("class_frequency sums to zero")
        if np.count_nonzero(freq) < 2:
            raise ValueError("class_frequency needs at least two nonzero entries")
        if self.scenes < 0 or self.points_per_scene < 1:
            raise ValueError("scenes must be >= 0 and points_per_scene >= 1")
        return freq / freq.sum()

    def to_dict(self) -> dict:
        conf = self.confusability
        if not np.isscalar(conf):
            conf = np.asarray(conf, dtype=float).tolist()
        return {
            "scenes": self.scenes,
            "points_per_scene": self.points_per_scene,
            "class_frequency": [float(x) for x in self.class_frequency],
            "confusability": conf,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            scenes=int(d["scenes"]),
            points_per_scene=int(d["points_per_scene"]),
            class_frequency=[float(x) for x in d["class_frequency"]],
            confusability=d.get("confusability", 0.0),
            seed=int(d.get("seed", 0)),
        )


@dataclass(eq=False)
class PointCloudSample:
    points: np.ndarray  # (N, 3) float64
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloudSample):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(self.labels, other.labels)


@dataclass(eq=False)
class Dataset:
    samples: list[PointCloudSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self.samples, other.samples))

    @property
    def n_points(self) -> int:
        return sum(len(s) for s in self.samples)

    def all_labels(self) -> np.ndarray:
        if not self.samples:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s.labels for s in self.samples])

    def class_counts(self, m: int) -> np.ndarray:
        return np.bincount(self.all_labels(), minlength=m)[:m]


# ---------------------------------------------------------------- generation


def _unit_directions(k: int) -> np.ndarray:
    """k well-spread unit vectors (Fibonacci sphere; fixed, seed free)."""
    if k == 1:
        return np.zeros((1, 3))
    if k == 2:
        return np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    i = np.arange(k) + 0.5
    phi = np.arccos(1 - 2 * i / k)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def class_centers(catalog: ClassCatalog, confusability: np.ndarray) -> np.ndarray:
    """Blob centers after pulling confusable classes toward each other."""
    n_fam = catalog.n_families
    fam_ang = 2 * np.pi * np.arange(n_fam) / n_fam
    fam_centers = FAMILY_RADIUS * np.stack([np.cos(fam_ang), np.sin(fam_ang), np.zeros(n_fam)], axis=1)
    base = np.zeros((catalog.m, 3))
    fam = np.asarray(catalog.planted_macro)
    for f in range(n_fam):
        members = np.flatnonzero(fam == f)
        base[members] = fam_centers[f] + MEMBER_RADIUS * _unit_directions(len(members))
    mix = np.eye(catalog.m) + confusability
    mix /= mix.sum(axis=1, keepdims=True)
    return mix @ base


def generate_scene(spec: DatasetSpec, catalog: ClassCatalog, index: int) -> PointCloudSample:
    freq = spec.validate(catalog)
    centers = class_centers(catalog, spec.confusability_matrix(catalog))
    return _scene(spec, freq, centers, index)


def _scene(spec: DatasetSpec, freq: np.ndarray, centers: np.ndarray, index: int) -> PointCloudSample:
    # independent stream per (seed, scene) so scenes can be built in any order
    rng = np.random.default_rng([spec.seed, index])
    n = spec.points_per_scene
    counts = rng.multinomial(n, freq)
    labels = np.repeat(np.arange(len(freq)), counts)
    labels = labels[rng.permutation(n)]
    points = centers[labels] + BLOB_SIGMA * rng.standard_normal((n, 3))
    return PointCloudSample(points, labels)


def generate(spec: DatasetSpec, catalog: ClassCatalog) -> Dataset:
    freq = spec.validate(catalog)
    centers = class_centers(catalog, spec.confusability_matrix(catalog))
    return Dataset([_scene(spec, freq, centers, i) for i in range(spec.scenes)])


def split(dataset: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Scene-level random partition (largest-remainder sizing)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {list(fractions)}")
    n = len(dataset)
    if n < len(fr):
        raise ValueError(f"cannot split {n} scenes into {len(fr)} parts")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    # every part gets at least one scene
    for i in np.flatnonzero(sizes == 0):
        donor = int(np.argmax(sizes))
        sizes[donor] -= 1
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return tuple(Dataset([dataset.samples[j] for j in order[a:b]]) for a, b in zip(bounds[:-1], bounds[1:]))


# ------------------------------------------------------------------------ io


def dumps(dataset: Dataset) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(dataset))]
    for s in dataset:
        if len(s) and (s.labels.min() < 0 or s.labels.max() > 0xFFFF):
            raise ValueError("labels must fit in u16")
        parts.append(struct.pack("<I", len(s)))
        parts.append(s.points.astype("<f8").tobytes())
        parts.append(s.labels.astype("<u2").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Dataset:
    if buf[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic header", 0)
    off = len(MAGIC)
    if len(buf) < off + 8:
        raise DatasetFormatError("truncated header", len(buf))
    version, count = struct.unpack_from("<II", buf, off)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", off)
    off += 8
    samples = []
    for _ in range(count):
        if len(buf) < off + 4:
            raise DatasetFormatError("truncated scene header", len(buf))
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        need = n * 24 + n * 2
        if len(buf) < off + need:
            raise DatasetFormatError(f"truncated scene body (need {need} bytes)", len(buf))
        pts = np.frombuffer(buf, dtype="<f8", count=3 * n, offset=off).reshape(n, 3)
        off += n * 24
        lab = np.frombuffer(buf, dtype="<u2", count=n, offset=off)
        off += n * 2
        samples.append(PointCloudSample(pts.astype(np.float64), lab.astype(np.int64)))
    if off != len(buf):
        raise DatasetFormatError("trailing bytes after last scene", off)
    return Dataset(samples)


def save(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dumps(dataset))


def load(path) -> Dataset:
    return loads(Path(path).read_bytes())


def export_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "point", "x", "y", "z", "label"])
        for si, s in enumerate(dataset):
            for pi, (p, lab) in enumerate(zip(s.points, s.labels)):
                w.writerow([si, pi, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(lab)])


# defaults used by the demo and the acceptance benchmark: 8 classes in 3
# families, one class holding half the mass and the rarest 1%
DEFAULT_FAMILIES = (3, 3, 2)
DEFAULT_FREQUENCY = (0.50, 0.10, 0.04, 0.12, 0.06, 0.05, 0.12, 0.01)
