"""Command-line experiment runner.

``flatmatch run --exp <name>`` trains and writes artifacts under
``<out>/<exp>/seed_<s>/``; ``flatmatch compare`` summarises record CSVs.
Exit codes: 0 success, 2 invalid configuration or input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import config_to_dict, load_config, parse_value
from .data import AugmentationSpec, augment_batch
from .diagnostics import landscape_1d, landscape_2d
from .errors import ConfigError, NumericError
from .model import save_checkpoint
from .trainers import TRAINERS, ExperimentRecord, TrainConfig

EXPERIMENTS = (*TRAINERS, "landscape", "sweep")


def _version_stamp() -> dict:
    try:
        version = metadata.version("flatmatch")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        commit = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        commit = ""
    return {"version": version, "git": commit or "unknown"}


def _for_method(cfg: TrainConfig, method: str) -> TrainConfig:
    if method == "flatmatch_e":
        cfg = dataclasses.replace(cfg, flatmatch=dataclasses.replace(cfg.flatmatch, efficient=True))
    if method == "flatmatch_fixlabel":
        cfg = dataclasses.replace(cfg, fixed_label=dataclasses.replace(cfg.fixed_label, enabled=True))
    return cfg.validate()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def train_one(cfg: TrainConfig, method: str, seed: int, out: Path) -> tuple[list[Path], object]:
    """Train ``method`` for one seed into ``out``; returns written files and the result."""
    out.mkdir(parents=True, exist_ok=True)
    cfg = _for_method(dataclasses.replace(cfg, seed=seed), method)
    files = [_write_json(out / "config.json", config_to_dict(cfg))]
    record_path = out / "record.csv"
    files.append(record_path)
    result = TRAINERS[method](cfg, record_path=record_path)
    files += save_checkpoint(result.eval_theta, out / "model")
    if result.record.meta:
        files.append(_write_json(out / "meta.json", _jsonable(result.record.meta)))
    return files, result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def probe_batches(res, aug: AugmentationSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Strongly augmented labeled and unlabeled inputs, seeded by ``seed``."""
    ds = res.dataset
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    xl = augment_batch(ds.labeled_x, aug, "strong", rng, centroid=ds.centroid)
    xu = augment_batch(ds.unlabeled_x, aug, "strong", rng, centroid=ds.centroid)
    return xl, xu


def _run_landscape(cfg, args, seed: int, out: Path) -> list[Path]:
    files, res = train_one(cfg, args.method, seed, out)
    ds, spec, theta = res.dataset, res.spec, res.eval_theta
    # probe on strongly augmented copies: the raw training points are fit almost exactly
    xl, xu = probe_batches(res, cfg.augment, seed)
    lo, hi = -args.span, args.span
    grids = {
        "landscape_1d_labeled": landscape_1d(
            spec, theta, xl, ds.labeled_y, seed=2 * seed, t_range=(lo, hi),
            num_points=args.grid, workers=args.workers,
        ),
        "landscape_2d_labeled": landscape_2d(
            spec, theta, xl, ds.labeled_y, seeds=(2 * seed, 2 * seed + 1),
            ranges=((lo, hi), (lo, hi)), n=args.grid, workers=args.workers,
        ),
        "landscape_2d_unlabeled": landscape_2d(
            spec, theta, xu, seeds=(2 * seed, 2 * seed + 1), ranges=((lo, hi), (lo, hi)),
            n=args.grid, tag="unlabeled", workers=args.workers,
        ),
    }
    for name, grid in grids.items():
        grid.meta["method"] = args.method
        files += grid.to_csv(out / f"{name}.csv")
    return files


def _run_sweep(cfg, args, seeds: list[int], out: Path) -> list[Path]:
    if not args.param or not args.values:
        raise ConfigError("sweep needs --param and --values")
    files, rows = [], []
    for raw in (v.strip() for v in args.values.split(",")):
        value = parse_value(raw)
        vcfg = load_config(args.config, [*args.set, f"{args.param}={raw}"])
        errs = []
        for s in seeds:
            run_dir = out / f"{args.param}={value}" / f"seed_{s}"
            written, res = train_one(vcfg, args.method, s, run_dir)
            files += written
            errs.append(res.record.final("test_err"))
        e = np.asarray(errs)
        rows.append([args.param, repr(value), len(e), repr(float(np.median(e))), repr(float(e.mean())),
                     repr(float(e.std()))])
    summary = out / "summary.csv"
    with open(summary, "w") as fh:
        fh.write("param,value,n_seeds,median_test_err,mean_test_err,std_test_err\n")
        for r in rows:
            fh.write(",".join(map(str, r)) + "\n")
    return files + [summary]


def cmd_run(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg = load_config(args.config, args.set)
    if args.seeds < 1:
        raise ConfigError("must be >= 1", "--seeds")
    first = cfg.seed if args.seed is None else args.seed
    seeds = list(range(first, first + args.seeds))
    if args.method not in TRAINERS:
        raise ConfigError(f"unknown method {args.method!r}", "--method")
    out = Path(args.out) / args.exp
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    try:
        if args.exp == "sweep":
            files = _run_sweep(cfg, args, seeds, out)
        else:
            for s in seeds:
                run_dir = out / f"seed_{s}"
                if args.exp == "landscape":
                    files += _run_landscape(cfg, args, s, run_dir)
                else:
                    files += train_one(cfg, args.exp, s, run_dir)[0]
    finally:
        manifest = {
            "experiment": args.exp,
            "config": config_to_dict(cfg),
            "overrides": list(args.set),
            "config_file": args.config,
            "seeds": seeds,
            "stamp": _version_stamp(),
            "files": sorted(str(p.relative_to(out)) for p in files if p.exists()),
            "started": started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(files)} files under {out}")
    return 0


# ---------------------------------------------------------------------------
# compare


def method_of(path: Path) -> str:
    """``<out>/<method>/seed_<s>/record.csv`` -> ``method``; otherwise the file stem."""
    path = Path(path)
    if path.parent.name.startswith("seed_"):
        return path.parent.parent.name
    return path.stem


def summarize(paths: list[Path]) -> list[dict]:
    """Mean and std (population) of the final test error per method, in first-seen order."""
    groups: dict[str, list[float]] = {}
    schedule = None
    for p in paths:
        rec = ExperimentRecord.from_csv(p)
        if not len(rec):
            raise ConfigError(f"{p}: record is empty")
        steps = tuple(rec.column("step").tolist())
        if schedule is None:
            schedule = steps
        elif steps != schedule:
            raise ConfigError(f"{p}: evaluation schedule differs from {paths[0]}")
        groups.setdefault(method_of(p), []).append(rec.final("test_err"))
    return [
        {"method": m, "n": len(v), "mean": float(np.mean(v)), "std": float(np.std(v)), "median": float(np.median(v))}
        for m, v in groups.items()
    ]


def format_table(rows: list[dict]) -> str:
    best = min(r["mean"] for r in rows)
    lines = ["| method | seeds | test error (%) |", "|---|---|---|"]
    for r in rows:
        cell = f"{100 * r['mean']:.2f} ± {100 * r['std']:.2f}"
        if r["mean"] == best:
            cell = f"**{cell}**"
        lines.append(f"| {r['method']} | {r['n']} | {cell} |")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    paths = [Path(p) for p in args.records]
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise ConfigError(f"record {missing[0]} not found")
    rows = summarize(paths)
    table = format_table(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write("method,n_seeds,mean_test_err,std_test_err,median_test_err\n")
            for r in rows:
                fh.write(f"{r['method']},{r['n']},{r['mean']!r},{r['std']!r},{r['median']!r}\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flatmatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and write experiment artifacts")
    run.add_argument("--exp", required=True, choices=EXPERIMENTS)
    run.add_argument("--config", help="TOML file with nested tables")
    run.add_argument("--seed", type=int, help="first seed (default: config seed)")
    run.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    run.add_argument("--out", default="out")
    run.add_argument("--method", default="flatmatch", help="trainer used by landscape and sweep")
    run.add_argument("--param", help="dotted key swept by --exp sweep")
    run.add_argument("--values", help="comma-separated values for --param")
    run.add_argument("--grid", type=int, default=21, help="landscape points per axis")
    run.add_argument("--span", type=float, default=1.0, help="landscape offsets in [-span, span]")
    run.add_argument("--workers", type=int, default=1, help="landscape scanner threads")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="mean ± std of final test error per method")
    cmp_.add_argument("records", nargs="+")
    cmp_.add_argument("--out", help="also write the summary as CSV")
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
