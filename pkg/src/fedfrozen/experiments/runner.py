"""Run an experiment config: every (cell x seed) training run, CSV records, JSON summary.

FedFrozen cells that differ only in their warm-up fraction share the warm-up
prefix: the longest warm-up is trained once, and the shorter ones branch off
state snapshots taken at their freezing rounds.  Phase-1 rounds go through the
same code path for every warm-up length, so the branched runs are identical
to running each cell from scratch.
"""

from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ..algorithms import DivergenceError, Method, RoundRecord, TrainingResult, run_training
from ..data import generate_dataset, init_params
from ..diagnostics import decompose, profile
from .config import Cell, ExperimentConfig

__all__ = [
    "CSV_HEADER",
    "DRIFT_WINDOW",
    "RunSummary",
    "ExperimentOutput",
    "run_experiment",
    "default_threads",
    "write_outputs",
]

CSV_HEADER = "run_id,seed,round,method,rho,E,warm_frac,lambda,eta,loss_reg,loss_raw,profile_h,drift,bytes_up,bytes_down"
DRIFT_WINDOW = 50


def default_threads() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def _num(v: Optional[float]) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _json_num(v: Optional[float]) -> Optional[float]:
    if v is None or not math.isfinite(v):
        return None
    return float(v)


@dataclass
class RunSummary:
    """Outcome of one (cell, seed) run."""

    run_id: str
    cell_index: int
    seed: int
    status: str  # "ok" or "diverged"
    records: list[RoundRecord]
    initial_loss_reg: float
    initial_profile_h: Optional[float]
    final_loss_reg: float = float("nan")
    final_loss_raw: float = float("nan")
    final_profile: Optional[dict] = None
    drift_last50: float = float("nan")
    decomposition: Optional[dict] = None
    diverged_round: Optional[int] = None
    divergence_message: Optional[str] = None
    divergence_params: Optional[dict] = field(default=None, repr=False)

    def profile_series(self) -> tuple[list[int], list[float]]:
        """Rounds (0 = initialization) and profile values wherever one was recorded."""
        rounds, values = [], []
        if self.initial_profile_h is not None:
            rounds.append(0)
            values.append(self.initial_profile_h)
        for r in self.records:
            if r.profile_h is not None:
                rounds.append(r.round_index + 1)
                values.append(r.profile_h)
        return rounds, values

    def to_json(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "status": self.status,
            "rounds_completed": len(self.records),
            "initial_loss_reg": _json_num(self.initial_loss_reg),
            "final_loss_reg": _json_num(self.final_loss_reg),
            "final_loss_raw": _json_num(self.final_loss_raw),
            "final_profile": self.final_profile,
            "drift_last50": _json_num(self.drift_last50),
            "decomposition": self.decomposition,
            "diverged_round": self.diverged_round,
            "divergence_message": self.divergence_message,
        }


def _run_id(cell: Cell, seed: int) -> str:
    return f"c{cell.index:03d}-s{seed}"


def _finish(cell: Cell, cfg: ExperimentConfig, seed: int, result: TrainingResult, dataset) -> RunSummary:
    spec = cell.method.spec(cfg.total_rounds)
    records = result.records
    last = records[-1]
    window = [r.drift for r in records[-DRIFT_WINDOW:]]
    final_prof = profile(result.final.phi, dataset, spec.lam)
    summary = RunSummary(
        run_id=_run_id(cell, seed),
        cell_index=cell.index,
        seed=seed,
        status="ok",
        records=records,
        initial_loss_reg=result.initial_loss_reg,
        initial_profile_h=result.initial_profile_h,
        final_loss_reg=last.loss_reg,
        final_loss_raw=last.loss_raw,
        final_profile=final_prof.summary(),
        drift_last50=float(np.mean(window)),
    )
    if spec.kind is Method.FEDFROZEN:
        seen = [r.profile_h for r in records if r.profile_h is not None]
        if result.initial_profile_h is not None:
            seen.append(result.initial_profile_h)
        reference = min(seen + [final_prof.h_value])
        rep = decompose(
            spec.warm_rounds,
            result.final,
            dataset,
            spec.lam,
            spec.eta,
            spec.local_steps,
            cfg.total_rounds,
            reference,
        )
        summary.decomposition = rep.summary()
    return summary


def _diverged(cell: Cell, seed: int, exc: DivergenceError) -> RunSummary:
    partial: Optional[TrainingResult] = getattr(exc, "partial", None)
    records = list(partial.records) if partial is not None else []
    return RunSummary(
        run_id=_run_id(cell, seed),
        cell_index=cell.index,
        seed=seed,
        status="diverged",
        records=records,
        initial_loss_reg=partial.initial_loss_reg if partial is not None else float("nan"),
        initial_profile_h=partial.initial_profile_h if partial is not None else None,
        diverged_round=exc.round_index,
        divergence_message=str(exc),
        divergence_params=None if exc.server is None else {k: np.asarray(getattr(exc.server, k)) for k in ("wq", "wk", "wv")},
    )


def _run_group(args: tuple[ExperimentConfig, tuple[Cell, ...], int]) -> list[RunSummary]:
    """Train one seed for a group of cells that share everything but the warm-up length.

    The group is ordered by decreasing warm-up; only the first cell is trained
    from scratch.
    """
    cfg, cells, seed = args
    head = cells[0]
    dataset = generate_dataset(head.data.data_config(seed))
    init = init_params(seed, dataset.dims)
    T = cfg.total_rounds
    specs = [c.method.spec(T) for c in cells]
    branch_rounds = [s.warm_rounds for s in specs[1:]]
    out: list[RunSummary] = []
    try:
        base = run_training(specs[0], dataset, T, init, cfg.profile_cadence, snapshot_rounds=branch_rounds)
    except DivergenceError as exc:
        out.append(_diverged(head, seed, exc))
        partial = exc.partial
        base = None
    else:
        out.append(_finish(head, cfg, seed, base, dataset))
        partial = base
    for cell, spec in zip(cells[1:], specs[1:]):
        w = spec.warm_rounds
        snap = partial.snapshots.get(w) if partial is not None else None
        if snap is None:
            # the shared prefix diverged before this freezing round
            out.append(_diverged(cell, seed, _prefix_divergence(out[0], w)))
            continue
        prefix = partial.records[:w]
        try:
            tail = run_training(spec, dataset, T, init, cfg.profile_cadence, state=replace(snap))
        except DivergenceError as exc:
            if getattr(exc, "partial", None) is not None:
                exc.partial.records[:0] = prefix
                exc.partial.initial_loss_reg = partial.initial_loss_reg
                exc.partial.initial_profile_h = partial.initial_profile_h
            out.append(_diverged(cell, seed, exc))
            continue
        merged = TrainingResult(
            prefix + tail.records,
            tail.final,
            tail.state,
            partial.initial_loss_reg,
            partial.initial_profile_h,
        )
        out.append(_finish(cell, cfg, seed, merged, dataset))
    return out


def _prefix_divergence(head: RunSummary, warm_rounds: int) -> DivergenceError:
    exc = DivergenceError(
        f"shared warm-up diverged in round {head.diverged_round} before freezing round {warm_rounds}",
        head.diverged_round if head.diverged_round is not None else 0,
        server=None,  # type: ignore[arg-type]
    )
    exc.partial = TrainingResult(list(head.records), None, None, head.initial_loss_reg, head.initial_profile_h)  # type: ignore[arg-type]
    return exc


def _groups(cells: Sequence[Cell]) -> list[tuple[Cell, ...]]:
    """Bundle FedFrozen cells that differ only in warm-up fraction, longest warm-up first."""
    buckets: dict[Any, list[Cell]] = {}
    order: list[Any] = []
    for cell in cells:
        if Method(cell.method.kind) is Method.FEDFROZEN:
            key = (cell.data, replace(cell.method, warm_frac=0.0))
        else:
            key = ("solo", cell.index)
        if key not in buckets:
            buckets[key] = []
            order.append(key)
        buckets[key].append(cell)
    groups = []
    for key in order:
        members = buckets[key]
        members.sort(key=lambda c: (-(c.method.warm_frac or 0.0), c.index))
        groups.append(tuple(members))
    return groups


@dataclass
class ExperimentOutput:
    config: ExperimentConfig
    cells: list[Cell]
    runs: list[RunSummary]  # ordered by (cell index, seed order)
    out_dir: Optional[Path] = None

    def for_cell(self, index: int) -> list[RunSummary]:
        return [r for r in self.runs if r.cell_index == index]

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        cells = {c.index: c for c in self.cells}
        for run in self.runs:
            ax = cells[run.cell_index].axes
            fixed = [
                run.run_id,
                str(run.seed),
                None,
                cells[run.cell_index].method.kind,
                _num(ax["rho"]),
                str(ax["E"]),
                _num(ax["warm_frac"]),
                _num(ax["lambda"]),
                _num(ax["eta"]),
            ]
            for r in run.records:
                fixed[2] = str(r.round_index + 1)
                row = fixed + [
                    _num(r.loss_reg),
                    _num(r.loss_raw),
                    _num(r.profile_h),
                    _num(r.drift),
                    str(r.bytes_up),
                    str(r.bytes_down),
                ]
                buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def summary_doc(self) -> dict[str, Any]:
        cells_doc = []
        for cell in self.cells:
            runs = self.for_cell(cell.index)
            finals = [r.final_loss_reg for r in runs if r.status == "ok"]
            cells_doc.append(
                {
                    "index": cell.index,
                    "axes": cell.axes,
                    "method": cell.method.kind,
                    "status": "ok" if all(r.status == "ok" for r in runs) else "diverged",
                    "median_final_loss_reg": _json_num(float(np.median(finals))) if finals else None,
                    "runs": [r.to_json() for r in runs],
                }
            )
        return {"config": self.config.to_dict(), "drift_window": DRIFT_WINDOW, "cells": cells_doc}


def write_outputs(output: ExperimentOutput, out_dir: str | Path) -> Path:
    """Write records.csv, summary.json and one .npz per diverged run."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "records.csv").write_text(output.csv_text())
        (out_dir / "summary.json").write_text(json.dumps(output.summary_doc(), indent=2, sort_keys=True) + "\n")
        for run in output.runs:
            if run.status == "diverged" and run.divergence_params is not None:
                np.savez(out_dir / f"diverged-{run.run_id}.npz", round=run.diverged_round, **run.divergence_params)
    except OSError as exc:
        raise OSError(f"cannot write experiment outputs under {out_dir}: {exc}") from exc
    output.out_dir = out_dir
    return out_dir


def run_experiment(
    cfg: ExperimentConfig,
    threads: int = 1,
    write: bool = True,
    progress: Optional[Callable[[str], None]] = None,
) -> ExperimentOutput:
    """Run every (cell x seed) of ``cfg``; optionally write outputs to its output dir."""
    cells = cfg.cells()
    groups = _groups(cells)
    jobs = [(cfg, g, s) for g in groups for s in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_group, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_run_group(job))
            if progress is not None:
                progress(f"{cfg.name}: job {i + 1}/{len(jobs)} done")
    by_key = {(r.cell_index, r.seed): r for batch in results for r in batch}
    runs = [by_key[(c.index, s)] for c in cells for s in cfg.seeds]
    output = ExperimentOutput(cfg, cells, runs)
    if write:
        write_outputs(output, cfg.resolve_output_dir())
    return output
