"""Two-phase training: a plain baseline, then retraining with the LEAK terms.

One loop serves both phases. A baseline run is that loop with every
regularization weight at zero, which is what makes the zero-weight LEAK
run reproduce the baseline bit for bit.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .fairloss import fairness_loss, jain_fairness
from .hierarchy import ConfusionMatrix, Hierarchy, confusion_from_labels, mine_hierarchy
from .metrics import MetricsReport, balance_stats, feature_geometry, hiou, inter_proto_angle, iou_suite
from .protobank import PrototypeBank, proto_loss, update
from .segmodel import (
    PredictionBatch,
    SegModel,
    downsample_with_labels,
    forward_points,
    init,
    predict,
    save_checkpoint,
)
from .synthdata import Dataset

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
WEIGHTINGS = ("inverse", "sqrt", "none")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2  # scenes per step
    lr: float = 0.05
    lr_power: float = 0.95
    optimizer: str = "momentum"
    momentum: float = 0.9
    lambda_pm: float = 0.1  # micro prototype alignment
    lambda_pM: float = 0.1  # macro prototype alignment
    lambda_f: float = 1.0  # fairness
    weighting: str = "inverse"
    downsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_pm", "lambda_pM", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError("optimizer must be 'sgd' or 'momentum'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def is_baseline(self) -> bool:
        return self.lambda_pm == 0 and self.lambda_pM == 0 and self.lambda_f == 0

    def baseline(self) -> "TrainConfig":
        return self.replace(lambda_pm=0.0, lambda_pM=0.0, lambda_f=0.0)

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> TrainConfig:
    """JSON object, or ``key = value`` lines (``#`` comments)."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        d = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            d[k] = json.loads(v) if v[:1] not in ("'",) else v.strip("'")
    return TrainConfig.from_dict(d)


# ------------------------------------------------------------------- losses


def class_weights(counts: np.ndarray, scheme: str = "inverse") -> np.ndarray:
    """Per-class CE weights from training counts, normalized so the
    frequency-weighted mean weight is 1. Absent classes get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    freq = counts / counts.sum()
    present = freq > 0
    w = np.zeros_like(freq)
    if scheme == "none":
        w[:] = 1.0
        return w
    if scheme == "inverse":
        w[present] = 1.0 / freq[present]
    elif scheme == "sqrt":
        w[present] = 1.0 / np.sqrt(freq[present])
    else:
        raise ValueError(f"unknown weighting {scheme!r}")
    return w / (freq * w).sum()


def base_loss(batch: PredictionBatch, weights: np.ndarray) -> ad.Tensor:
    """Class-weighted NLL of the true class, averaged over points."""
    P = batch.probabilities if isinstance(batch.probabilities, ad.Tensor) else ad.Tensor(batch.probabilities)
    n, m = P.shape
    labels = np.asarray(batch.labels, dtype=np.int64)
    onehot = np.zeros((n, m))
    onehot[np.arange(n), labels] = 1.0
    p_true = ad.sum_(ad.mul(P, ad.Tensor(onehot)), axis=1)
    nll = ad.log(p_true, floor=PROB_FLOOR)
    w = np.asarray(weights, dtype=np.float64)[labels]
    return ad.scale(ad.mean(ad.mul(nll, ad.Tensor(w))), -1.0)


# ------------------------------------------------------------------ logging


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float | None]
    val: dict | None
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[dict[str, float | None]] = field(default_factory=list)

    def val_series(self, key: str) -> list:
        return [r.val.get(key) if r.val else None for r in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.epochs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    def comparable(self) -> list[dict]:
        """Epoch records without wall time (for run-to-run identity checks)."""
        return [{k: v for k, v in r.to_dict().items() if k != "wall_time"} for r in self.epochs]


def load_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, model: SegModel, log: TrainLog):
        super().__init__(message)
        self.model = model
        self.log = log


# -------------------------------------------------------------- evaluation


def predict_dataset(model: SegModel, data: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(features, probabilities, labels) over every point of ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pts = np.concatenate([s.points for s in data])
    labels = data.all_labels()
    feats, probs = predict(model, pts)
    return feats, probs, labels


def evaluate(
    model: SegModel,
    data: Dataset,
    hierarchy: Hierarchy | None = None,
    bank: PrototypeBank | None = None,
) -> MetricsReport:
    feats, probs, labels = predict_dataset(model, data)
    m = model.n_classes
    cm = confusion_from_labels(labels, probs.argmax(axis=1), m)
    iou, miou, fw = iou_suite(cm)
    sigma, mse, ent = balance_stats(iou)
    rep = MetricsReport(
        miou=miou,
        fwiou=fw,
        per_class_iou=[None if np.isnan(v) else float(v) for v in iou],
        sigma=sigma,
        mse=mse,
        entropy=ent,
    )
    if hierarchy is not None:
        rep.hiou = hiou(cm, hierarchy)
        rep.fairness = jain_fairness(PredictionBatch(probs, labels), hierarchy).F
    if bank is not None and np.count_nonzero(bank.counts) > 0:
        geo = feature_geometry(feats, labels, bank)
        rep.ccd, rep.pd, rep.pcd = geo.ccd, geo.pd, geo.pcd
        try:
            rep.theta_gamma = inter_proto_angle(bank)
        except ValueError:
            rep.theta_gamma = None
    return rep


# ----------------------------------------------------------------- training


def _batches(data: Dataset, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, 1, epoch])
    order = rng.permutation(len(data))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        scenes = [data[i] for i in idx]
        if cfg.downsample < 1:
            scenes = [downsample_with_labels(s, cfg.downsample, seed=int(np.random.SeedSequence([cfg.seed, epoch, int(i)]).generate_state(1)[0]))
                      for s, i in zip(scenes, idx)]
        yield np.concatenate([s.points for s in scenes]), np.concatenate([s.labels for s in scenes])


def _bank_sections(banks: list[PrototypeBank]) -> dict[bytes, bytes]:
    payload = struct.pack("<I", len(banks)) + b"".join(b.to_bytes() for b in banks)
    return {b"BANK": payload}


def banks_from_sections(sections: dict[bytes, bytes]) -> list[PrototypeBank]:
    buf = sections.get(b"BANK")
    if not buf:
        return []
    (n,) = struct.unpack_from("<I", buf, 0)
    off, out = 4, []
    for _ in range(n):
        bank, off = PrototypeBank.from_bytes(buf, off)
        out.append(bank)
    return out


@dataclass
class TrainResult:
    model: SegModel
    log: TrainLog
    micro_bank: PrototypeBank
    macro_bank: PrototypeBank | None


def _train(
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset | None,
    hierarchy: Hierarchy | None,
    m: int,
    checkpoint_dir=None,
    on_step: Callable[[int, SegModel], None] | None = None,
) -> TrainResult:
    if len(train) == 0:
        raise ValueError("empty training set")
    if hierarchy is None and (cfg.lambda_pM > 0 or cfg.lambda_f > 0):
        raise ValueError("macro prototype and fairness terms need a hierarchy")
    model = init(SegModel.for_classes(m), cfg.seed)
    params = model.parameters()
    velocity = [np.zeros(p.shape) for p in params]
    weights = class_weights(train.class_counts(m), cfg.weighting)
    micro = PrototypeBank(m, model.feature_dim, "micro")
    macro = PrototypeBank(hierarchy.M, model.feature_dim, "macro") if hierarchy is not None else None
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    log = TrainLog(cfg.to_dict())
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    last_good = model.state()
    t = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = {"L0": 0.0, "Lpm": 0.0, "LpM": 0.0, "LF": 0.0, "total": 0.0}
        n_steps = 0
        for pts, labels in _batches(train, cfg, epoch):
            try:
                fb, pb = forward_points(model, pts, labels)
                update(micro, fb)
                if macro is not None:
                    update(macro, fb, hierarchy)
                L0 = base_loss(pb, weights)
                total = L0
                rec = {"L0": L0.item(), "Lpm": None, "LpM": None, "LF": None}
                if cfg.lambda_pm > 0:
                    Lpm = proto_loss(micro, fb)
                    total = ad.add(total, ad.scale(Lpm, cfg.lambda_pm))
                    rec["Lpm"] = Lpm.item()
                if cfg.lambda_pM > 0:
                    LpM = proto_loss(macro, fb, hierarchy)
                    total = ad.add(total, ad.scale(LpM, cfg.lambda_pM))
                    rec["LpM"] = LpM.item()
                if cfg.lambda_f > 0:
                    LF = fairness_loss(pb, hierarchy)
                    total = ad.add(total, ad.scale(LF, cfg.lambda_f))
                    rec["LF"] = LF.item()
                rec["total"] = total.item()
                grads = ad.grad(total, params)
            except ad.NonFiniteError as exc:
                model.set_parameters(last_good)
                raise TrainingDiverged(f"diverged at epoch {epoch}, step {t}: {exc}", model, log) from exc
            lr = cfg.lr * (1.0 - t / total_steps) ** cfg.lr_power
            new = []
            for i, (p, g) in enumerate(zip(params, grads)):
                if cfg.optimizer == "momentum":
                    velocity[i] = cfg.momentum * velocity[i] + g
                    step = velocity[i]
                else:
                    step = g
                new.append(p.data - lr * step)
            if not all(np.all(np.isfinite(a)) for a in new):
                model.set_parameters(last_good)
                raise TrainingDiverged(f"non-finite weights at epoch {epoch}, step {t}", model, log)
            model.set_parameters(new)
            params = model.parameters()
            log.steps.append(rec)
            for k, v in rec.items():
                if v is not None:
                    sums[k] += v
            n_steps += 1
            t += 1
            if on_step is not None:
                on_step(t, model)
        last_good = model.state()
        losses = {k: (sums[k] / n_steps if log.steps[-1].get(k) is not None else None) for k in sums}
        val_rep = evaluate(model, val, hierarchy, micro).to_dict() if val is not None and len(val) else None
        log.epochs.append(EpochRecord(epoch, losses, val_rep, time.perf_counter() - t0))
        if ckdir:
            banks = [micro] + ([macro] if macro is not None else [])
            save_checkpoint(model, ckdir / "last.leakw", _bank_sections(banks))
            with open(ckdir / "log.jsonl", "w") as fh:
                fh.write(log.to_jsonl())
    return TrainResult(model, log, micro, macro)


def train_baseline(
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset | None,
    m: int,
    eval_hierarchy: Hierarchy | None = None,
    checkpoint_dir=None,
    on_step=None,
) -> TrainResult:
    """Supervised training with the base loss only.

    ``eval_hierarchy`` only adds hierarchy-aware validation metrics.
    """
    if not cfg.is_baseline:
        raise ValueError("baseline training needs all lambda weights at 0 (use cfg.baseline())")
    return _train(cfg, train, val, eval_hierarchy, m, checkpoint_dir, on_step)


def train_leak(
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset | None,
    hierarchy: Hierarchy,
    checkpoint_dir=None,
    on_step=None,
) -> TrainResult:
    """Retrain from a fresh initialization with base + prototype + fairness terms."""
    if hierarchy is None:
        raise ValueError("LEAK training needs a hierarchy (run cluster first)")
    return _train(cfg, train, val, hierarchy, hierarchy.m, checkpoint_dir, on_step)


def confusion_on(model: SegModel, data: Dataset) -> ConfusionMatrix:
    _, probs, labels = predict_dataset(model, data)
    return confusion_from_labels(labels, probs.argmax(axis=1), model.n_classes)


def extract_hierarchy(model: SegModel, val: Dataset, seed: int = 0, names=None) -> tuple[Hierarchy, ConfusionMatrix]:
    """Validation confusion -> confusion graph -> cluster count -> spectral clustering."""
    cm = confusion_on(model, val)
    h, _ = mine_hierarchy(cm, seed=seed, names=names)
    return h, cm
