"""Point-wise MLP segmenter: 3 -> hidden -> feature -> logits.

Checkpoint layout (little endian)::

    b"LEAKW"  u32 version  u32 n_widths  n_widths * u32 widths
    per layer: W (in x out, row major f64), b (out f64)
    optional trailing sections, each a 4-byte tag followed by its payload
    (the trainer stores prototype banks under b"BANK").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .synthdata import PointCloudSample

CKPT_MAGIC = b"LEAKW"
CKPT_VERSION = 1
HIDDEN = (64, 64)
FEATURE_DIM = 16


@dataclass
class FeatureBatch:
    features: ad.Tensor  # (n, F)
    labels: np.ndarray  # (n,)

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)


@dataclass
class PredictionBatch:
    probabilities: ad.Tensor  # (n, m), rows sum to 1
    labels: np.ndarray  # (n,)

    @property
    def predicted(self) -> np.ndarray:
        return self.probabilities.data.argmax(axis=1)


class SegModel:
    """Layer widths ``[3, *hidden, F, m]``; the feature tap is the activation of width F."""

    def __init__(self, widths: Sequence[int]):
        widths = [int(w) for w in widths]
        if len(widths) < 3 or widths[0] != 3:
            raise ValueError(f"widths must start at 3 and have a feature and output layer, got {widths}")
        self.widths = widths
        self.weights = [ad.Tensor(np.zeros((a, b)), requires_grad=True) for a, b in zip(widths[:-1], widths[1:])]
        self.biases = [ad.Tensor(np.zeros((1, b)), requires_grad=True) for b in widths[1:]]

    @classmethod
    def for_classes(cls, m: int, hidden: Sequence[int] = HIDDEN, feature_dim: int = FEATURE_DIM) -> "SegModel":
        return cls([3, *hidden, feature_dim, m])

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def feature_dim(self) -> int:
        return self.widths[-2]

    @property
    def feature_tap(self) -> int:
        return len(self.widths) - 3

    def parameters(self) -> list[ad.Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        for i in range(len(self.weights)):
            self.weights[i] = ad.Tensor(arrays[2 * i], requires_grad=True)
            self.biases[i] = ad.Tensor(arrays[2 * i + 1], requires_grad=True)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def copy(self) -> "SegModel":
        out = SegModel(self.widths)
        out.set_parameters(self.state())
        return out


def init(model: SegModel, seed: int) -> SegModel:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    arrays = []
    for a, b in zip(model.widths[:-1], model.widths[1:]):
        lim = np.sqrt(6.0 / (a + b))
        arrays.append(rng.uniform(-lim, lim, size=(a, b)))
        arrays.append(np.zeros((1, b)))
    model.set_parameters(arrays)
    return model


def _layer(x: ad.Tensor, W: ad.Tensor, b: ad.Tensor, ones: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, W), ad.matmul(ones, b))


def forward_points(model: SegModel, points, labels) -> tuple[FeatureBatch, PredictionBatch]:
    x = points if isinstance(points, ad.Tensor) else ad.Tensor(points)
    if x.shape[1:] != (3,):
        raise ValueError(f"points must be (n, 3), got {x.shape}")
    ones = ad.Tensor(np.ones((x.shape[0], 1)))
    h = x
    n_layers = len(model.weights)
    feats = None
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        try:
            h = _layer(h, W, b, ones)
            if i < n_layers - 1:
                h = ad.relu(h)
            else:
                h = ad.softmax(h)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"layer {i} ({model.widths[i]}->{model.widths[i + 1]}): {exc}") from None
        if i == model.feature_tap:
            feats = h
    labels = np.asarray(labels, dtype=np.int64)
    return FeatureBatch(feats, labels), PredictionBatch(h, labels)


def forward(model: SegModel, sample: PointCloudSample) -> tuple[FeatureBatch, PredictionBatch]:
    if len(sample) and sample.labels.max() >= model.n_classes:
        raise ValueError(f"label {sample.labels.max()} outside model's {model.n_classes} classes")
    return forward_points(model, sample.points, sample.labels)


def predict(model: SegModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Graph-free forward pass returning (features, probabilities) as arrays."""
    h = np.asarray(points, dtype=np.float64)
    n_layers = len(model.weights)
    feats = None
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W.data + b.data
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
        else:
            h = np.exp(h - h.max(axis=1, keepdims=True))
            h /= h.sum(axis=1, keepdims=True)
        if not np.all(np.isfinite(h)):
            raise ad.NonFiniteError(f"non-finite activation in layer {i}")
        if i == model.feature_tap:
            feats = h
    return feats, h


def downsample_with_labels(sample: PointCloudSample, ratio: float, seed: int = 0) -> PointCloudSample:
    """Random subset of ``round(ratio * N)`` points, labels carried along."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n = len(sample)
    if ratio == 1:
        return PointCloudSample(sample.points.copy(), sample.labels.copy())
    k = int(round(ratio * n))
    if k == 0:
        raise ValueError(f"downsampling {n} points by {ratio} leaves nothing")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return PointCloudSample(sample.points[idx], sample.labels[idx])


# --------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(model: SegModel, sections: dict[bytes, bytes] | None = None) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(model.widths))]
    parts.append(struct.pack(f"<{len(model.widths)}I", *model.widths))
    for W, b in zip(model.weights, model.biases):
        parts.append(W.data.astype("<f8").tobytes())
        parts.append(b.data.astype("<f8").tobytes())
    for tag, payload in (sections or {}).items():
        if len(tag) != 4:
            raise ValueError("section tags are 4 bytes")
        parts.append(tag + struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def loads_checkpoint(buf: bytes) -> tuple[SegModel, dict[bytes, bytes]]:
    if buf[:5] != CKPT_MAGIC:
        raise CheckpointError("not a LEAKW checkpoint")
    try:
        version, nw = struct.unpack_from("<II", buf, 5)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 13
        widths = struct.unpack_from(f"<{nw}I", buf, off)
        off += 4 * nw
        model = SegModel(widths)
        arrays = []
        for a, b in zip(widths[:-1], widths[1:]):
            for shape in ((a, b), (1, b)):
                cnt = shape[0] * shape[1]
                if len(buf) < off + 8 * cnt:
                    raise CheckpointError(f"truncated weights at byte {off}")
                arrays.append(np.frombuffer(buf, "<f8", cnt, off).reshape(shape).astype(np.float64))
                off += 8 * cnt
        model.set_parameters(arrays)
        sections = {}
        while off < len(buf):
            tag = buf[off : off + 4]
            (size,) = struct.unpack_from("<Q", buf, off + 4)
            off += 12
            if len(buf) < off + size:
                raise CheckpointError(f"truncated section {tag!r} at byte {off}")
            sections[tag] = buf[off : off + size]
            off += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return model, sections


def save_checkpoint(model: SegModel, path, sections: dict[bytes, bytes] | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, sections))


def load_checkpoint(path) -> tuple[SegModel, dict[bytes, bytes]]:
    return loads_checkpoint(Path(path).read_bytes())
