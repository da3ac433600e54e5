"""Experiment plans, the multi-seed runner and the result table."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..data import DatasetSplit, SynthConfig, build_synthetic_split, load_dataset, with_labeled_fraction
from ..errors import ConfigurationError
from ..metrics import MetricReport
from ..networks import DiscriminatorSpec, load_checkpoint, output_geometry, receptive_field
from ..objectives import LossWeights
from ..trainer import TrainConfig, evaluate_samples, run_training
from .svg import emit_ablation_chart

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 2, 3)
METRICS = ("dsc", "ja", "hd95", "asd")
# 200 train / 30 val / 50 test at 32x32
DESK_SYNTH = SynthConfig(count=280, noise_sigma=0.25, seed=0)


def geometry_self_test() -> None:
    """Check the paper discriminator anchors: 22 px receptive field and 32x32 output on 256x256."""
    spec = DiscriminatorSpec.paper()
    rf, out = receptive_field(spec), output_geometry(spec, (256, 256))
    if rf != 22 or out != (32, 32):
        raise RuntimeError(f"geometry self-test failed: rf={rf} out={out[0]}x{out[1]}")


@dataclass(frozen=True)
class DataSource:
    """Either a synthetic generator config or a saved dataset directory."""

    synthetic: Optional[SynthConfig] = None
    directory: Optional[str] = None
    split_seed: int = 0
    n_val: int = 30
    n_test: int = 50

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            object.__setattr__(self, "synthetic", SynthConfig.from_dict(self.synthetic))
        if (self.synthetic is None) == (self.directory is None):
            raise ConfigurationError("data source needs exactly one of 'synthetic' or 'directory'")

    def load(self, labeled_fraction: Optional[float] = None) -> DatasetSplit:
        """Materialize the split; ``None`` keeps a directory's stored labeled set."""
        if self.synthetic is not None:
            return build_synthetic_split(self.synthetic, labeled_fraction or 0.1, self.split_seed,
                                         self.n_val, self.n_test)
        data = load_dataset(self.directory)
        return data if labeled_fraction is None else with_labeled_fraction(data, labeled_fraction)

    def to_dict(self) -> dict:
        if self.directory is not None:
            return {"directory": self.directory}
        return {"synthetic": self.synthetic.to_dict(), "split_seed": self.split_seed,
                "n_val": self.n_val, "n_test": self.n_test}

    @classmethod
    def from_dict(cls, d: dict) -> "DataSource":
        unknown = set(d) - {"synthetic", "directory", "split_seed", "n_val", "n_test"}
        if unknown:
            raise ConfigurationError(f"unknown data source keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RunSpec:
    name: str
    labeled_fraction: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    overrides: Dict[str, object] = field(default_factory=dict)
    seeds: Tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.name or "/" in self.name or self.name.startswith("."):
            raise ConfigurationError(f"bad run name {self.name!r}")
        if not self.seeds:
            raise ConfigurationError(f"run {self.name!r} has no seeds")
        if {"weights", "seed"} & set(self.overrides):
            raise ConfigurationError("set weights and seeds on the run, not in overrides")

    @property
    def flags(self) -> Dict[str, int]:
        """Table III style markers: granularity used and whether blending is on."""
        w = self.weights
        adv = w.adversarial
        return {"im": int(adv and w.granularity == "image"), "pa": int(adv and w.granularity == "patch"),
                "pi": int(adv and w.granularity == "pixel"), "cgan": int(adv and w.conditioning != "none")}

    def config(self, base: Dict[str, object], seed: int) -> TrainConfig:
        d = dict(base)
        d.update(self.overrides)
        d["weights"] = self.weights
        d["seed"] = seed
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {"name": self.name, "labeled_fraction": self.labeled_fraction,
                "weights": self.weights.to_dict(), "overrides": dict(self.overrides), "seeds": list(self.seeds)}


@dataclass(frozen=True)
class ExperimentPlan:
    runs: Tuple[RunSpec, ...]
    data: DataSource = field(default_factory=lambda: DataSource(synthetic=DESK_SYNTH))
    baseline: Optional[str] = "baseline"
    train: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(self.runs))
        names = [r.name for r in self.runs]
        if not names:
            raise ConfigurationError("plan has no runs")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"run names must be unique: {names}")
        if self.baseline is not None and self.baseline not in names:
            raise ConfigurationError(f"baseline run {self.baseline!r} not in plan")
        if {"weights", "seed"} & set(self.train):
            raise ConfigurationError("plan-level train settings cannot fix weights or seed")

    def run(self, name: str) -> RunSpec:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(name)

    def select(self, names: Sequence[str]) -> "ExperimentPlan":
        runs = tuple(self.run(n) for n in names)
        baseline = self.baseline if self.baseline in names else None
        return replace(self, runs=runs, baseline=baseline)

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentPlan":
        return replace(self, runs=tuple(replace(r, seeds=tuple(seeds)) for r in self.runs))

    def to_dict(self) -> dict:
        return {"runs": [r.to_dict() for r in self.runs], "data": self.data.to_dict(),
                "baseline": self.baseline, "train": dict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = set(d) - {"runs", "data", "baseline", "train", "seeds"}
        if unknown:
            raise ConfigurationError(f"unknown plan keys: {sorted(unknown)}")
        seeds = d.get("seeds", DEFAULT_SEEDS)
        runs = []
        for r in d.get("runs", []):
            r = dict(r)
            r.setdefault("seeds", seeds)
            try:
                runs.append(RunSpec(**r))
            except TypeError as exc:
                raise ConfigurationError(f"bad run entry: {exc}") from None
        kw = {"runs": runs, "baseline": d.get("baseline", "baseline"), "train": d.get("train", {})}
        if "data" in d:
            kw["data"] = DataSource.from_dict(d["data"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


ABLATION_ROWS = ("baseline", "image", "patch", "pixel", "image-cgan", "patch-cgan")


def ablation_plan(labeled_fraction: float = 0.1, seeds: Sequence[int] = DEFAULT_SEEDS,
                  data: Optional[DataSource] = None, train: Optional[dict] = None) -> ExperimentPlan:
    """The six settings of the granularity x conditioning ablation, in table order."""
    settings = {
        "baseline": LossWeights.supervised(),
        "image": LossWeights(conditioning="none", granularity="image"),
        "patch": LossWeights(conditioning="none", granularity="patch"),
        "pixel": LossWeights(conditioning="none", granularity="pixel"),
        "image-cgan": LossWeights(conditioning="blend", granularity="image"),
        "patch-cgan": LossWeights(conditioning="blend", granularity="patch"),
    }
    runs = tuple(RunSpec(n, labeled_fraction, settings[n], seeds=tuple(seeds)) for n in ABLATION_ROWS)
    return ExperimentPlan(runs, data or DataSource(synthetic=DESK_SYNTH), "baseline", dict(train or {}))


# running

@dataclass
class SeedOutcome:
    run: str
    seed: int
    report: Optional[MetricReport]
    error: Optional[str] = None


def run_one(spec: RunSpec, plan: ExperimentPlan, seed: int, out_dir, data: Optional[DatasetSplit] = None
            ) -> SeedOutcome:
    """Train one (run, seed) cell and score its best checkpoint on the test split.

    Failures are recorded in ``error.txt`` rather than raised.
    """
    out = Path(out_dir) / spec.name / str(seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.txt").unlink(missing_ok=True)
    try:
        if data is None:
            data = plan.data.load(spec.labeled_fraction)
        cfg = spec.config(plan.train, seed)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        run_training(cfg, data, out)
        report = evaluate_samples(load_checkpoint(out / "best.bin"), data.test)
    except Exception as exc:  # recorded as a failure marker in the table
        log.warning("run %s seed %d failed: %s", spec.name, seed, exc)
        (out / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        (out / "report.csv").unlink(missing_ok=True)
        return SeedOutcome(spec.name, seed, None, f"{type(exc).__name__}: {exc}")
    (out / "report.csv").write_text(report.to_csv())
    return SeedOutcome(spec.name, seed, report)


def _run_one_job(args) -> SeedOutcome:
    return run_one(*args)


def run_experiment(plan: ExperimentPlan, out_dir, jobs: int = 1) -> "ResultTable":
    """Run every (run, seed) cell, then build the table from the persisted reports."""
    geometry_self_test()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    cells = [(spec, plan, seed, out) for spec in plan.runs for seed in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            list(pool.map(_run_one_job, cells))
    else:
        cache: Dict[float, DatasetSplit] = {}
        for spec, _, seed, _ in cells:
            if spec.labeled_fraction not in cache:
                cache[spec.labeled_fraction] = plan.data.load(spec.labeled_fraction)
            run_one(spec, plan, seed, out, cache[spec.labeled_fraction])
    table = table_from_outputs(plan, out)
    (out / "table.csv").write_text(table.to_csv())
    emit_ablation_chart(table, out / "ablation.svg")
    return table


def run_ablation(plan: ExperimentPlan, out_dir, jobs: int = 1) -> "ResultTable":
    if plan.baseline is None:
        raise ConfigurationError("an ablation needs a baseline run")
    base = plan.run(plan.baseline)
    if base.weights.adversarial:
        raise ConfigurationError(f"baseline run {base.name!r} has non-zero adversarial weights")
    return run_experiment(plan, out_dir, jobs)


# aggregation

def _std(values: Sequence[float]) -> float:
    # sample std across seeds; a single seed has no spread
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class RunRow:
    name: str
    flags: Dict[str, int]
    labeled_fraction: float
    seeds: Tuple[int, ...]
    per_seed: Dict[int, Optional[MetricReport]]
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)
    imp: Dict[str, Optional[float]] = field(default_factory=dict)
    note: str = ""

    @property
    def failed(self) -> List[int]:
        return [s for s in self.seeds if self.per_seed.get(s) is None]

    @property
    def status(self) -> str:
        if not self.failed:
            return "ok"
        return f"failed {len(self.failed)}/{len(self.seeds)}"


TABLE_COLUMNS = (("run", "im", "pa", "pi", "cgan", "labeled_fraction", "seeds", "status")
                 + tuple(f"{m}_{k}" for m in METRICS for k in ("mean", "std"))
                 + tuple(f"{m}_imp" for m in METRICS) + ("note",))


@dataclass
class ResultTable:
    rows: List[RunRow]
    baseline: Optional[str]

    def row(self, name: str) -> RunRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in self.rows:
            cells = [r.name, r.flags["im"], r.flags["pa"], r.flags["pi"], r.flags["cgan"],
                     _fmt(r.labeled_fraction), " ".join(map(str, r.seeds)), r.status]
            for m in METRICS:
                cells += [_fmt(r.mean.get(m)), _fmt(r.std.get(m))]
            cells += [_fmt(r.imp.get(m)) for m in METRICS]
            w.writerow(cells + [r.note])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.9g}"


def read_table_csv(text: str) -> List[Dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def aggregate(plan: ExperimentPlan, reports: Dict[Tuple[str, int], Optional[MetricReport]]) -> ResultTable:
    rows = []
    for spec in plan.runs:
        per_seed = {s: reports.get((spec.name, s)) for s in spec.seeds}
        row = RunRow(spec.name, spec.flags, spec.labeled_fraction, spec.seeds, per_seed)
        ok = [rep.mean() for rep in per_seed.values() if rep is not None]
        for m in METRICS:
            vals = [getattr(c, m) for c in ok]
            row.mean[m] = float(np.mean(vals)) if vals else float("nan")
            row.std[m] = _std(vals) if vals else float("nan")
        rows.append(row)
    table = ResultTable(rows, plan.baseline)
    if plan.baseline is not None:
        base = table.row(plan.baseline)
        for r in rows:
            for m in METRICS:
                d = r.mean[m] - base.mean[m]
                r.imp[m] = None if math.isnan(d) else (0.0 if r is base else d)
    names = [r.name for r in rows]
    if "patch" in names and "image" in names:
        table.row("patch").note = directional_check(table).message
    return table


def table_from_outputs(plan: ExperimentPlan, out_dir) -> ResultTable:
    """Rebuild the table purely from ``<run>/<seed>/report.csv`` files."""
    out = Path(out_dir)
    reports = {}
    for spec in plan.runs:
        for s in spec.seeds:
            path = out / spec.name / str(s) / "report.csv"
            reports[(spec.name, s)] = MetricReport.from_csv(path.read_text()) if path.exists() else None
    return aggregate(plan, reports)


@dataclass(frozen=True)
class DirectionalResult:
    ordered: bool
    within_pooled_std: bool
    passed: bool
    difference: float
    pooled_std: float
    message: str


def directional_check(table: ResultTable, better: str = "patch", worse: str = "image",
                      metric: str = "dsc", tolerance: float = 0.01) -> DirectionalResult:
    """``better`` should score at least ``worse``.

    When the gap is within one pooled std the check downgrades to
    "no regression larger than ``tolerance``".
    """
    a, b = table.row(better), table.row(worse)
    diff = a.mean[metric] - b.mean[metric]
    pooled = math.sqrt((a.std[metric] ** 2 + b.std[metric] ** 2) / 2)
    if math.isnan(diff):
        return DirectionalResult(False, False, False, diff, pooled, f"{better} vs {worse}: missing results")
    ordered = diff >= 0
    within = abs(diff) <= pooled
    if ordered:
        msg = f"{better}>={worse} by {diff:.4f}"
        passed = True
    elif within:
        passed = diff >= -tolerance
        msg = (f"{better}<{worse} by {-diff:.4f} within pooled std {pooled:.4f}; "
               f"downgraded to no regression>{tolerance}: {'pass' if passed else 'fail'}")
    else:
        passed = False
        msg = f"{better}<{worse} by {-diff:.4f} beyond pooled std {pooled:.4f}"
    return DirectionalResult(ordered, within, passed, diff, pooled, msg)
