"""Multi-arm protocol on the planted benchmark.

For one seed: generate data, train the baseline, mine the hierarchy from
its validation confusion, then retrain three regularized arms (fairness
only, prototypes only, everything) from scratch and evaluate all four on
the validation split with the mined hierarchy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .hierarchy import Hierarchy
from .metrics import MetricsReport
from .synthdata import DEFAULT_FAMILIES, DEFAULT_FREQUENCY, ClassCatalog, Dataset, DatasetSpec, generate, split
from .trainer import TrainConfig, TrainResult, evaluate, extract_hierarchy, train_baseline, train_leak

BENCH_CONFUSABILITY = 0.5
BENCH_SCENES = 75
BENCH_POINTS = 2000  # 25 scenes x 2000 points = 50k points per split


def benchmark_config(**overrides) -> TrainConfig:
    """Training config of the shipped demo (also used by the direction checks)."""
    text = (resources.files("leakseg") / "demo" / "config.json").read_text()
    return TrainConfig.from_dict(json.loads(text)).replace(**overrides)


def benchmark_spec(seed: int, confusability: float = BENCH_CONFUSABILITY, scenes: int = BENCH_SCENES,
                   points: int = BENCH_POINTS) -> DatasetSpec:
    return DatasetSpec(scenes=scenes, points_per_scene=points, class_frequency=DEFAULT_FREQUENCY,
                       confusability=confusability, seed=seed)


def benchmark_splits(seed: int, **kw) -> tuple[ClassCatalog, Dataset, Dataset, Dataset]:
    catalog = ClassCatalog.from_families(DEFAULT_FAMILIES)
    data = generate(benchmark_spec(seed, **kw), catalog)
    train, val, test = split(data, (1 / 3, 1 / 3, 1 / 3), seed=seed)
    return catalog, train, val, test


def epochs_to_fraction(curve, fraction: float = 0.9) -> int:
    """First epoch (1-based) whose value reaches ``fraction`` of the final value."""
    curve = list(curve)
    target = fraction * curve[-1]
    for i, v in enumerate(curve):
        if v >= target:
            return i + 1
    return len(curve)


@dataclass
class ArmResult:
    name: str
    config: TrainConfig
    report: MetricsReport
    miou_curve: list[float]
    result: TrainResult = field(repr=False)


@dataclass
class SeedRun:
    seed: int
    hierarchy: Hierarchy
    planted: tuple[int, ...]
    arms: dict[str, ArmResult]

    def metric(self, arm: str, key: str):
        return getattr(self.arms[arm].report, key)


ARMS = {
    "fairness": dict(lambda_pm=0.0, lambda_pM=0.0),
    "prototype": dict(lambda_f=0.0),
    "leak": {},
}


def run_seed(seed: int, cfg: TrainConfig | None = None, arms=("fairness", "prototype", "leak"), **data_kw) -> SeedRun:
    cfg = (cfg or benchmark_config()).replace(seed=seed)
    catalog, train, val, _ = benchmark_splits(seed, **data_kw)
    m = catalog.m

    base = train_baseline(cfg.baseline(), train, val, m)
    h, _ = extract_hierarchy(base.model, val, seed=seed)
    out = {"baseline": _arm("baseline", cfg.baseline(), base, val, h)}
    for name in arms:
        arm_cfg = cfg.replace(**ARMS[name])
        res = train_leak(arm_cfg, train, val, h)
        out[name] = _arm(name, arm_cfg, res, val, h)
    return SeedRun(seed, h, catalog.planted_macro, out)


def _arm(name: str, cfg: TrainConfig, res: TrainResult, val: Dataset, h: Hierarchy) -> ArmResult:
    report = evaluate(res.model, val, h, res.micro_bank)
    return ArmResult(name, cfg, report, res.log.val_series("miou"), res)


def summarize(runs: list[SeedRun]) -> dict[str, dict[str, list[float]]]:
    keys = ("miou", "hiou", "fwiou", "sigma", "ccd", "pd", "pcd", "theta_gamma", "fairness")
    table: dict[str, dict[str, list[float]]] = {}
    for run in runs:
        for arm, res in run.arms.items():
            row = table.setdefault(arm, {k: [] for k in keys + ("t90",)})
            for k in keys:
                row[k].append(getattr(res.report, k))
            row["t90"].append(epochs_to_fraction(res.miou_curve))
    return table


def median(xs) -> float:
    return float(np.median(np.asarray(xs, dtype=np.float64)))
