"""Command line entry point: ``python -m pcaseg <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ..data import SynthConfig, save_dataset
from ..errors import ConfigurationError
from ..networks import DiscriminatorSpec, load_checkpoint, output_geometry, parse_layers, receptive_field
from ..trainer import TrainConfig, evaluate_samples, run_training
from .experiment import DESK_SYNTH, DataSource, ExperimentPlan, ablation_plan, run_ablation, run_experiment
from .svg import emit_learning_curve

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


# subcommands

def cmd_gen_data(args) -> int:
    cfg = SynthConfig.from_dict(_read_json(args.config)) if args.config else DESK_SYNTH
    overrides = {k: v for k, v in (("count", args.count), ("seed", args.seed), ("noise_sigma", args.noise_sigma),
                                   ("hw", args.hw)) if v is not None}
    cfg = SynthConfig.from_dict({**cfg.to_dict(), **overrides})
    source = DataSource(synthetic=cfg, split_seed=args.split_seed, n_val=args.n_val, n_test=args.n_test)
    data = source.load(args.labeled_fraction)
    save_dataset(args.out, data, cfg.classes, meta={"synthetic": cfg.to_dict(), "split_seed": args.split_seed,
                                                     "labeled_fraction": args.labeled_fraction})
    n = {k: len(v) for k, v in data.ids().items()}
    print(f"wrote {args.out}: " + " ".join(f"{k}={v}" for k, v in n.items()))
    return EXIT_OK


_WEIGHT_FLAGS = ("lambda_adv", "lambda_fea", "lambda_ipm", "lambda_noise", "granularity", "conditioning")
_TRAIN_FLAGS = (("iterations", "total_iterations"), ("batch_size", "batch_size"), ("eval_every", "eval_every"),
                ("seed", "seed"), ("seg_lr", "seg_lr0"), ("disc_lr", "disc_lr0"))


def resolve_train_config(args) -> tuple:
    """Merge the JSON config file with command line overrides; returns (TrainConfig, DataSource, fraction)."""
    raw = _read_json(args.config) if args.config else {}
    data_raw = raw.pop("data", None)
    fraction = raw.pop("labeled_fraction", None)
    for flag, key in _TRAIN_FLAGS:
        v = getattr(args, flag)
        if v is not None:
            raw[key] = v
    weights = dict(raw.get("weights", {}))
    for key in _WEIGHT_FLAGS:
        v = getattr(args, key)
        if v is not None:
            weights[key] = v
    if weights:
        raw["weights"] = weights
    config = TrainConfig.from_dict(raw)
    if args.data:
        source = DataSource(directory=args.data)
    elif data_raw:
        source = DataSource.from_dict(data_raw)
    else:
        source = DataSource(synthetic=DESK_SYNTH)
    if args.labeled_fraction is not None:
        fraction = args.labeled_fraction
    if fraction is None and source.synthetic is not None:
        fraction = 0.1
    return config, source, fraction


def cmd_train(args) -> int:
    config, source, fraction = resolve_train_config(args)
    data = source.load(fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**config.to_dict(), "data": source.to_dict(), "labeled_fraction": fraction}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    result = run_training(config, data, out)
    report = evaluate_samples(load_checkpoint(out / "best.bin"), data.test)
    (out / "report.csv").write_text(report.to_csv())
    emit_learning_curve(result.log, out / "curve.svg")
    print(f"best_iter={result.best_iter} val_dsc={result.best_val_dsc:.4f} test_dsc={report.mean_dsc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"no such file: {args.checkpoint}")
    S = load_checkpoint(args.checkpoint)
    source = DataSource(directory=args.data) if args.data else DataSource(synthetic=DESK_SYNTH)
    data = source.load(args.labeled_fraction)
    samples = data.by_name(args.split)
    if any(s.mask is None for s in samples):
        raise ConfigurationError(f"split {args.split!r} has samples without masks")
    report = evaluate_samples(S, samples, boundary_metrics=not args.overlap_only)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.plan:
        plan = ExperimentPlan.from_dict(_read_json(args.plan))
    else:
        data = DataSource(directory=args.data) if args.data else None
        train = {"total_iterations": args.iterations} if args.iterations is not None else {}
        plan = ablation_plan(args.labeled_fraction or 0.1, data=data, train=train)
    if args.seeds:
        plan = plan.with_seeds(args.seeds)
    if args.runs:
        plan = plan.select([r for r in args.runs.split(",") if r])
    runner = run_ablation if plan.baseline else run_experiment
    table = runner(plan, args.out, jobs=args.jobs)
    sys.stdout.write(table.to_csv())
    return EXIT_OK


def cmd_geometry(args) -> int:
    layers = parse_layers(args.layers)
    spec = DiscriminatorSpec(args.granularity, layers, 0.2, args.in_channels)
    spec.validate()
    oh, ow = output_geometry(spec, (args.input, args.input))
    print(f"rf={receptive_field(spec)} out={oh}x{ow}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcaseg", description="Semi-supervised segmentation with patch-level adversarial training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON synthetic generator config")
    g.add_argument("--count", type=int)
    g.add_argument("--hw", type=int)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--labeled-fraction", type=float, default=0.1)
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--n-val", type=int, default=30)
    g.add_argument("--n-test", type=int, default=50)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="JSON file with training config fields")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory (default: built-in synthetic set)")
    t.add_argument("--labeled-fraction", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--seg-lr", type=float)
    t.add_argument("--disc-lr", type=float)
    for key in ("lambda_adv", "lambda_fea", "lambda_ipm", "lambda_noise"):
        t.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    t.add_argument("--granularity", choices=("image", "patch", "pixel"))
    t.add_argument("--conditioning", choices=("none", "blend", "concat", "multiply"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: built-in synthetic set)")
    e.add_argument("--split", default="test", choices=("labeled", "unlabeled", "train", "val", "test"))
    e.add_argument("--labeled-fraction", type=float)
    e.add_argument("--overlap-only", action="store_true", help="skip the boundary metrics")
    e.add_argument("--out", help="also write the report CSV here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run an experiment plan (default: the six-row ablation)")
    x.add_argument("--plan", help="JSON experiment plan")
    x.add_argument("--out", required=True)
    x.add_argument("--data", help="dataset directory for the built-in ablation")
    x.add_argument("--labeled-fraction", type=float)
    x.add_argument("--iterations", type=int)
    x.add_argument("--seeds", type=_seeds)
    x.add_argument("--runs", help="comma-separated subset of run names")
    x.add_argument("--jobs", type=int, default=1)
    x.set_defaults(func=cmd_experiment)

    q = sub.add_parser("geometry", help="receptive field and output size of a discriminator stack")
    q.add_argument("--layers", required=True, help='e.g. "32:4:2:1,64:4:2:1,1:4:2:1" (out:kernel:stride:pad)')
    q.add_argument("--input", type=int, default=256)
    q.add_argument("--granularity", default="patch", choices=("image", "patch", "pixel"))
    q.add_argument("--in-channels", type=int, default=4)
    q.set_defaults(func=cmd_geometry)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, KeyError) as exc:
        print(f"pcaseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"pcaseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
