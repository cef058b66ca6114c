"""``leakseg`` command line: gen-data -> train -> cluster -> train -> report.

Every command writes into the directory given by ``--out`` and is a pure
function of its input files plus ``--seed``; re-running overwrites the same
outputs. ``pipeline`` chains all phases in one work directory and records
progress in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .hierarchy import Hierarchy, load_hierarchy, save_confusion_csv, save_hierarchy
from .metrics import MetricsReport
from .segmodel import CheckpointError, load_checkpoint
from .synthdata import ClassCatalog, DatasetFormatError, DatasetSpec, generate, load, save, split
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    banks_from_sections,
    evaluate,
    extract_hierarchy,
    load_config,
    load_log,
    train_baseline,
    train_leak,
)

logger = logging.getLogger("leakseg")

PHASES = ("gen-data", "train-baseline", "cluster", "train-leak", "report")

# artifact file names inside a command's --out directory
SPLITS = ("train", "val", "test")
CATALOG = "catalog.json"
CHECKPOINT = "last.leakw"
LOG = "log.jsonl"
HIERARCHY = "hierarchy.json"
CONFUSION = "confusion.csv"
METRICS = "metrics.json"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
CURVES_CSV = "curves.csv"


class PrerequisiteError(RuntimeError):
    """An input artifact is missing; the message names the command that makes it."""


def _require(path: Path, command: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"{path} not found; run `leakseg {command}` first")
    return path


# ------------------------------------------------------------------ manifest


@dataclass
class ExperimentManifest:
    root: str
    dataset: str | None = None
    config: str | None = None
    baseline: str | None = None
    hierarchy: str | None = None
    leak: str | None = None
    report: str | None = None
    done: dict[str, bool] = field(default_factory=lambda: {p: False for p in PHASES})

    @property
    def path(self) -> Path:
        return Path(self.root) / "manifest.json"

    def save(self) -> None:
        self.path.write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def load_or_new(cls, root) -> "ExperimentManifest":
        p = Path(root) / "manifest.json"
        if p.exists():
            return cls(**json.loads(p.read_text()))
        return cls(str(root))

    def require(self, phase: str) -> None:
        """All phases before ``phase`` must be done."""
        for prior in PHASES[: PHASES.index(phase)]:
            if not self.done.get(prior):
                raise PrerequisiteError(f"phase {phase!r} needs {prior!r}; run `leakseg {prior.split('-')[0]}` first")

    def mark(self, phase: str) -> None:
        self.require(phase)
        self.done[phase] = True
        # later phases are stale once an earlier one is redone
        for later in PHASES[PHASES.index(phase) + 1 :]:
            self.done[later] = False
        self.save()


# ------------------------------------------------------------------- helpers


def demo_file(name: str) -> Path:
    return Path(str(resources.files("leakseg") / "demo" / name))


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _config(args) -> TrainConfig:
    cfg = load_config(args.config or demo_file("config.json"))
    over = {}
    for flag, key in (("lambda_pm", "lambda_pm"), ("lambda_pM", "lambda_pM"), ("lambda_f", "lambda_f"),
                      ("epochs", "epochs"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return cfg.replace(**over)


def _catalog(data_dir: Path) -> ClassCatalog | None:
    p = data_dir / CATALOG
    return ClassCatalog.from_dict(_read_json(p)) if p.exists() else None


def _load_split(data_dir: Path, name: str):
    return load(_require(data_dir / f"{name}.leak", "gen-data"))


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    doc = _read_json(args.spec or demo_file("spec.json"))
    catalog = ClassCatalog.from_families(doc.get("families", (3, 3, 2)))
    spec = DatasetSpec.from_dict(doc)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = split(generate(spec, catalog), doc.get("splits", (0.6, 0.2, 0.2)), seed=spec.seed)
    for name, part in zip(SPLITS, parts):
        save(part, out / f"{name}.leak")
    (out / CATALOG).write_text(json.dumps(catalog.to_dict(), indent=2))
    (out / "spec.json").write_text(json.dumps({**spec.to_dict(), "families": doc.get("families", [3, 3, 2]),
                                               "splits": list(doc.get("splits", (0.6, 0.2, 0.2)))}, indent=2))
    print(f"wrote {', '.join(f'{n}={len(p)} scenes' for n, p in zip(SPLITS, parts))} to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    train, val = _load_split(data, "train"), _load_split(data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.hierarchy:
        h = load_hierarchy(_require(Path(args.hierarchy), "cluster"))
        res = train_leak(cfg, train, val, h, checkpoint_dir=out)
        kind = "leak"
    else:
        cat = _catalog(data)
        m = cat.m if cat else int(max(train.all_labels().max(), val.all_labels().max())) + 1
        if not cfg.is_baseline:
            logger.info("no hierarchy given: training the baseline (regularizer weights ignored)")
        res = train_baseline(cfg.baseline(), train, val, m, checkpoint_dir=out)
        kind = "baseline"
    (out / "config.json").write_text(json.dumps(res.log.config, indent=2))
    last = res.log.epochs[-1].val or {}
    print(f"{kind}: {cfg.epochs} epochs, final val mIoU {last.get('miou', float('nan')):.4f} -> {out}")
    return 0


def cmd_cluster(args) -> int:
    model, _ = load_checkpoint(_require(Path(args.checkpoint), "train"))
    val = load(_require(Path(args.val), "gen-data"))
    cat = _catalog(Path(args.val).parent)
    names = cat.names if cat and cat.m == model.n_classes else None
    h, cm = extract_hierarchy(model, val, seed=args.seed or 0, names=names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_hierarchy(h, out / HIERARCHY)
    save_confusion_csv(cm, out / CONFUSION, names)
    print(f"{h.M} macro classes: mapping {list(h.mapping)} -> {out / HIERARCHY}")
    return 0


def cmd_eval(args) -> int:
    model, sections = load_checkpoint(_require(Path(args.checkpoint), "train"))
    data = load(_require(Path(args.data), "gen-data"))
    h = load_hierarchy(_require(Path(args.hierarchy), "cluster")) if args.hierarchy else None
    banks = banks_from_sections(sections)
    rep = evaluate(model, data, h, banks[0] if banks else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / METRICS).write_text(rep.to_json())
    print(f"mIoU {rep.miou:.4f}  fwIoU {rep.fwiou:.4f}" + (f"  hIoU {rep.hiou:.4f}" if rep.hiou is not None else ""))
    return 0


def _final_val(records: list[dict]) -> dict:
    for rec in reversed(records):
        if rec.get("val"):
            return rec["val"]
    raise ValueError("log has no validation records")


def _num(x):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else float(x)


def comparison_rows(base_log: list[dict], leak_log: list[dict]) -> list[tuple[str, float | None, float | None, float | None]]:
    b, lk = _final_val(base_log), _final_val(leak_log)
    rows = []
    for key in MetricsReport.SCALARS:
        rows.append((key, _num(b.get(key)), _num(lk.get(key))))
    for c, (x, y) in enumerate(zip(b.get("per_class_iou", []), lk.get("per_class_iou", []))):
        rows.append((f"iou_{c}", _num(x), _num(y)))
    return [(k, x, y, (y - x) if x is not None and y is not None else None) for k, x, y in rows]


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def cmd_report(args) -> int:
    base_log = load_log(_require(Path(args.baseline), "train"))
    leak_log = load_log(_require(Path(args.leak), "train --hierarchy"))
    rows = comparison_rows(base_log, leak_log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / REPORT_CSV, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "baseline", "leak", "delta"])
        for k, x, y, d in rows:
            w.writerow([k, _fmt(x), _fmt(y), _fmt(d)])
    # plot-ready learning curves
    with open(out / CURVES_CSV, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "baseline_miou", "leak_miou"])
        n = max(len(base_log), len(leak_log))
        for e in range(n):
            vals = [(lg[e].get("val") or {}).get("miou") if e < len(lg) else None for lg in (base_log, leak_log)]
            w.writerow([e + 1, *map(_fmt, vals)])
    text = _table(rows)
    (out / REPORT_TXT).write_text(text)
    print(text, end="")
    return 0


def _table(rows) -> str:
    def cell(x):
        return "-" if x is None else f"{x:.4f}"

    lines = [f"{'metric':<12}{'baseline':>10}{'leak':>10}{'delta':>10}"]
    for k, x, y, d in rows:
        lines.append(f"{k:<12}{cell(x):>10}{cell(y):>10}{('-' if d is None else f'{d:+.4f}'):>10}")
    return "\n".join(lines) + "\n"


def cmd_pipeline(args) -> int:
    """All phases in one work directory, recorded in manifest.json."""
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    man = ExperimentManifest.load_or_new(root)
    spec = args.spec or str(demo_file("spec.json"))
    config = args.config or str(demo_file("config.json"))
    man.dataset, man.config = str(root / "data"), config
    common = dict(seed=args.seed, config=config, lambda_pm=args.lambda_pm, lambda_pM=args.lambda_pM,
                  lambda_f=args.lambda_f, epochs=args.epochs)

    cmd_gen_data(argparse.Namespace(spec=spec, seed=args.seed, out=man.dataset))
    man.mark("gen-data")
    man.baseline = str(root / "baseline")
    cmd_train(argparse.Namespace(data=man.dataset, hierarchy=None, out=man.baseline, **common))
    man.mark("train-baseline")
    man.hierarchy = str(root / "cluster" / HIERARCHY)
    cmd_cluster(argparse.Namespace(checkpoint=str(Path(man.baseline) / CHECKPOINT),
                                   val=str(Path(man.dataset) / "val.leak"), seed=args.seed, out=str(root / "cluster")))
    man.mark("cluster")
    man.leak = str(root / "leak")
    cmd_train(argparse.Namespace(data=man.dataset, hierarchy=man.hierarchy, out=man.leak, **common))
    man.mark("train-leak")
    man.report = str(root / "report")
    cmd_report(argparse.Namespace(baseline=str(Path(man.baseline) / LOG), leak=str(Path(man.leak) / LOG),
                                  out=man.report))
    man.mark("report")
    return 0


# ---------------------------------------------------------------------- main


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or key = value config file")
    p.add_argument("--lambda-pm", dest="lambda_pm", type=float, help="micro prototype weight (overrides config)")
    p.add_argument("--lambda-pM", dest="lambda_pM", type=float, help="macro prototype weight (overrides config)")
    p.add_argument("--lambda-f", dest="lambda_f", type=float, help="fairness weight (overrides config)")
    p.add_argument("--epochs", type=int, help="overrides config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="leakseg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic train/val/test splits")
    p.add_argument("--spec", help="dataset spec JSON (default: shipped demo spec)")

    p = add("train", cmd_train, "train the baseline, or LEAK when --hierarchy is given")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--hierarchy", help="hierarchy JSON written by cluster")
    _train_flags(p)

    p = add("cluster", cmd_cluster, "mine the class hierarchy from validation confusion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--val", required=True, help="validation split (.leak)")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split file (.leak)")
    p.add_argument("--hierarchy")

    p = add("report", cmd_report, "compare baseline and LEAK training logs")
    p.add_argument("--baseline", required=True, help="baseline log.jsonl")
    p.add_argument("--leak", required=True, help="LEAK log.jsonl")

    p = add("pipeline", cmd_pipeline, "run every phase end to end (demo spec by default)")
    p.add_argument("--spec")
    _train_flags(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.fn(args)
    except (PrerequisiteError, FileNotFoundError, DatasetFormatError, CheckpointError, TrainingDiverged,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
