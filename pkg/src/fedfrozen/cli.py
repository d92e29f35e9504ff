"""Command-line entry point (``fedfrozen`` / ``python -m fedfrozen``)."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .attention import ModelDims
from .data import generate_dataset, save_dataset
from .diagnostics import comm_cost_ratio, qk_fraction
from .matrix_core import ConfigurationError
from .experiments.config import OUTPUT_ROOT_ENV, DataSettings, ExperimentConfig, load_config
from .experiments.figures import (
    FigureSettings,
    RHO_GRID,
    PROFILE_RHOS,
    figure_heatmap,
    figure_lambda,
    figure_profile_descent,
    figure_tradeoffs,
)
from .experiments.gradcheck import BLOCKS, gradcheck
from .experiments.runner import default_threads, run_experiment


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _seed_list(text: str) -> tuple[int, ...]:
    """``0-9`` or ``0,3,5``."""
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return _ints(text)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")
    p.add_argument("--seed-offset", type=int, default=0, help="shift every seed by this amount")
    p.add_argument("--quiet", action="store_true")


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--name")
    p.add_argument("--total-rounds", type=int)
    p.add_argument("--seeds", type=_seed_list, help="e.g. 0-9 or 0,2,4")
    p.add_argument("--profile-cadence", type=int)
    p.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfrozen", description="Two-phase federated training of linear attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("run", "train a single-cell config"), ("sweep", "train every cell of a sweep config")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", type=Path)
        _add_overrides(p)
        _add_common(p)

    p = sub.add_parser("figure", help="run and plot one of the figure experiments")
    p.add_argument("which", choices=("profile", "tradeoff", "heatmap", "lambda"))
    p.add_argument("--seeds", type=_seed_list, default=tuple(range(10)))
    p.add_argument("--total-rounds", type=int, default=200)
    p.add_argument("--local-steps", type=int, default=20)
    p.add_argument("--warm-frac", type=float, default=None, help="fix the FedFrozen warm-up fraction (default: lowest median final loss among 0, 0.25, 0.5, 0.75)")
    p.add_argument("--rhos", type=_floats, default=None, help="heterogeneity levels (profile, heatmap, tradeoff)")
    p.add_argument("--parts", default="E,warm,rho", help="tradeoff panels to produce")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--examples", type=int, default=40)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--d-k", type=int, default=32)
    p.add_argument("--d-v", type=int, default=32)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--output-dir", type=Path, default=None)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--d-k", type=int, default=3)
    p.add_argument("--d-v", type=int, default=3)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--corrupt", choices=BLOCKS, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("dump-data", help="write the generated datasets of a config as JSON")
    p.add_argument("config", type=Path)
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--seed-offset", type=int, default=0)

    p = sub.add_parser("cost-ratio", help="Phase-2 communication cost relative to FedAvg")
    p.add_argument("--qk-frac", type=float, default=None)
    p.add_argument("--warm-frac", type=float, required=True)
    p.add_argument("--dims", type=_ints, default=None, help="d,d_k,d_v to derive the QK fraction")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(
        name=args.name,
        total_rounds=args.total_rounds,
        seeds=args.seeds,
        profile_cadence=args.profile_cadence,
        output_dir=args.output_dir,
    )
    return cfg.shift_seeds(args.seed_offset) if args.seed_offset else cfg


def _cmd_run(args, sweep: bool) -> int:
    cfg = _load(args)
    if not sweep and cfg.sweep:
        raise ConfigurationError("config has sweep axes; use the 'sweep' command")
    threads = args.threads or default_threads()
    out = run_experiment(cfg, threads=threads, progress=None if args.quiet else _log)
    ok = sum(r.status == "ok" for r in out.runs)
    print(f"{len(out.runs)} runs ({ok} ok) -> {out.out_dir}")
    for cell in out.summary_doc()["cells"]:
        axes = ", ".join(f"{k}={v}" for k, v in cell["axes"].items() if v is not None)
        print(f"  cell {cell['index']} [{axes}] median final loss {cell['median_final_loss_reg']}")
    return 0


def _figure_root(explicit: Optional[Path]) -> Path:
    if explicit is not None:
        return explicit
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "figures"


def _cmd_figure(args) -> int:
    seeds = tuple(s + args.seed_offset for s in args.seeds)
    data = DataSettings(
        num_clients=args.clients,
        examples_per_client=args.examples,
        d=args.d,
        d_k=args.d_k,
        d_v=args.d_v,
        n=args.n,
    )
    st = FigureSettings(
        seeds=seeds,
        total_rounds=args.total_rounds,
        local_steps=args.local_steps,
        data=data,
        threads=args.threads or default_threads(),
        output_root=_figure_root(args.output_dir),
        progress=None if args.quiet else _log,
    )
    if args.warm_frac is not None:
        st = replace(st, warm_frac=args.warm_frac)
    if args.which == "profile":
        res = figure_profile_descent(st, rhos=args.rhos or PROFILE_RHOS)
    elif args.which == "tradeoff":
        res = figure_tradeoffs(st, parts=tuple(p.strip() for p in args.parts.split(",")), rho_grid=args.rhos or RHO_GRID)
    elif args.which == "heatmap":
        res = figure_heatmap(st, rhos=args.rhos or RHO_GRID)
    else:
        res = figure_lambda(st)
    for f in res.files:
        print(f)
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck(ModelDims(args.d, args.d_k, args.d_v, args.n), seed=args.seed, lam=args.lam, corrupt_block=args.corrupt)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def _cmd_dump(args) -> int:
    cfg = load_config(args.config)
    if args.seed_offset:
        cfg = cfg.shift_seeds(args.seed_offset)
    root = args.output_dir or cfg.resolve_output_dir() / "data"
    root.mkdir(parents=True, exist_ok=True)
    rhos = sorted({c.data.rho for c in cfg.cells()})
    for rho in rhos:
        for seed in cfg.seeds:
            dcfg = cfg.data.data_config(seed, rho=rho)
            path = save_dataset(generate_dataset(dcfg), root / f"rho{rho:g}-seed{seed}.json", dcfg)
            print(path)
    return 0


def _cmd_cost(args) -> int:
    if args.qk_frac is None and args.dims is None:
        raise ConfigurationError("give --qk-frac or --dims d,d_k,d_v")
    frac = args.qk_frac if args.qk_frac is not None else qk_fraction(*args.dims)
    print(f"{comm_cost_ratio(frac, args.warm_frac):.4f}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("run", "sweep"):
            return _cmd_run(args, sweep=args.command == "sweep")
        if args.command == "figure":
            return _cmd_figure(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "dump-data":
            return _cmd_dump(args)
        return _cmd_cost(args)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
