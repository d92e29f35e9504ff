"""Figure commands: each builds its experiment configs, runs them, aggregates over
seeds and writes SVG charts plus a JSON dump of the plotted numbers.

Every output is a pure function of the settings, so reruns are byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .aggregate import AggregateSeries, aggregate_series
from .config import Cell, DataSettings, ExperimentConfig, MethodSettings
from .runner import ExperimentOutput, RunSummary, run_experiment, write_outputs
from .svg import DualAxis, Heatmap, Panel, emit_svg

__all__ = [
    "FigureSettings",
    "FigureResult",
    "figure_profile_descent",
    "figure_tradeoffs",
    "figure_heatmap",
    "figure_lambda",
    "figure_heatmap_and_lambda",
    "PROFILE_RHOS",
    "E_GRID",
    "WARM_GRID",
    "RHO_GRID",
    "LAMBDA_GRID",
    "VALIDATION_WARMS",
]

PROFILE_RHOS = (0.0, 1.0, 2.0)
PROFILE_ETA = 1e-3
TRADEOFF_ETA = 2e-4
E_GRID = (5, 10, 20, 40)
E_SWEEP_RHO = 1.5
WARM_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
RHO_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
LAMBDA_GRID = (0.0, 0.1, 1.0, 10.0, 100.0)
FEDPROX_MU = 200.0
# candidate warm-up fractions; where one FedFrozen curve is plotted and no
# fraction is given, the candidate with the lowest seed-median final loss wins
VALIDATION_WARMS = (0.0, 0.25, 0.5, 0.75)
# heterogeneity level for the warm-up and regularization sweeps
WARM_SWEEP_RHO = 2.0
LAMBDA_RHO = 2.0


@dataclass(frozen=True)
class FigureSettings:
    """Knobs shared by all figure commands (defaults reproduce the full-size runs)."""

    seeds: tuple[int, ...] = tuple(range(10))
    total_rounds: int = 200
    local_steps: int = 20
    data: DataSettings = field(default_factory=DataSettings)
    threads: int = 1
    output_root: Path = Path("runs")
    warm_frac: Optional[float] = None  # None selects per configuration from VALIDATION_WARMS
    write_runs: bool = True
    progress: Optional[Callable[[str], None]] = field(default=None, compare=False)


@dataclass
class FigureResult:
    name: str
    series: dict[str, Any]
    files: list[Path]
    experiments: list[ExperimentOutput]


def _run(cfg: ExperimentConfig, st: FigureSettings, out_dir: Path) -> ExperimentOutput:
    output = run_experiment(cfg, threads=st.threads, write=False, progress=st.progress)
    if st.write_runs:
        write_outputs(output, out_dir / cfg.name)
    return output


def _base_config(name: str, st: FigureSettings, method: MethodSettings, cadence: int, sweep: dict) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        data=st.data,
        method=method,
        total_rounds=st.total_rounds,
        seeds=tuple(st.seeds),
        profile_cadence=cadence,
        sweep={k: tuple(v) for k, v in sweep.items()},
    )


def _finals(runs: Sequence[RunSummary]) -> list[float]:
    return [r.final_loss_reg if r.status == "ok" else float("nan") for r in runs]


def _median(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    return float(np.median(arr)) if arr.size else math.inf


def _warm_candidates(st: FigureSettings) -> tuple[float, ...]:
    """Warm fractions to run next to the never-freezing 1.0 (FedAvg) cell."""
    return VALIDATION_WARMS if st.warm_frac is None else (st.warm_frac,)


def _select_warm(exp: ExperimentOutput, cells: Sequence[Cell]) -> Cell:
    """Cell with the lowest seed-median final loss, earliest candidate on ties."""
    frozen = [c for c in cells if c.method.warm_frac != 1.0]
    return min(frozen, key=lambda c: (_median(_finals(exp.for_cell(c.index))), c.method.warm_frac))


def _jsonable(v: Any) -> Any:
    if isinstance(v, AggregateSeries):
        return v.to_dict()
    if isinstance(v, dict):
        return {str(k): x for k, x in v.items()}
    return v


def _write_json(path: Path, doc: Any) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ profile


def figure_profile_descent(st: FigureSettings = FigureSettings(), rhos: Sequence[float] = PROFILE_RHOS) -> FigureResult:
    """Profile objective along FedAvg warm-up, one panel per heterogeneity level."""
    out = Path(st.output_root) / "profile"
    out.mkdir(parents=True, exist_ok=True)
    method = MethodSettings(kind="fedavg", eta=PROFILE_ETA, local_steps=st.local_steps)
    cfg = _base_config("profile-runs", st, method, cadence=1, sweep={"rho": rhos})
    exp = _run(cfg, st, out)
    rounds = list(range(st.total_rounds + 1))
    series: dict[str, AggregateSeries] = {}
    for cell in exp.cells:
        samples = []
        for run in exp.for_cell(cell.index):
            xs, hs = run.profile_series()
            full = dict(zip(xs, hs))
            samples.append([full.get(t, float("nan")) for t in rounds])
        per_round = [list(col) for col in zip(*samples)]
        series[f"rho={cell.data.rho:g}"] = aggregate_series(f"rho={cell.data.rho:g}", rounds, per_round)
    panels = [
        Panel(title=f"ρ = {key.split('=')[1]}", series=(s,), x_label="round", y_label="profile h")
        for key, s in series.items()
    ]
    files = [emit_svg(panels, out / "profile.svg")]
    files.append(_write_json(out / "profile.json", {k: v.to_dict() for k, v in series.items()}))
    return FigureResult("profile", series, files, [exp])


# ------------------------------------------------------------------ trade-offs


def _e_ratio(
    st: FigureSettings, out: Path, e_grid: Sequence[int], rho: float = E_SWEEP_RHO
) -> tuple[AggregateSeries, dict[int, float], ExperimentOutput]:
    """Per-seed FedFrozen/FedAvg final-loss ratio for each E, plus the warm fraction used per E."""
    warms = _warm_candidates(st) + (1.0,)
    method = MethodSettings(kind="fedfrozen", eta=TRADEOFF_ETA, local_steps=st.local_steps, warm_frac=warms[0])
    data = replace(st.data, rho=rho)
    # warm fraction 1.0 never freezes, so that cell is FedAvg on the same code path
    cfg = _base_config("tradeoff-E", replace(st, data=data), method, cadence=0, sweep={"E": e_grid, "warm_frac": warms})
    exp = _run(cfg, st, out)
    samples, chosen = [], {}
    for e in e_grid:
        cells = [c for c in exp.cells if c.method.local_steps == e]
        best = _select_warm(exp, cells)
        avg = next(c for c in cells if c.method.warm_frac == 1.0)
        chosen[int(e)] = best.method.warm_frac
        num = _finals(exp.for_cell(best.index))
        den = _finals(exp.for_cell(avg.index))
        samples.append([a / b for a, b in zip(num, den)])
    return aggregate_series("FedFrozen / FedAvg", list(e_grid), samples), chosen, exp


def _warm_sweep(st: FigureSettings, out: Path, rho: float) -> tuple[AggregateSeries, ExperimentOutput]:
    method = MethodSettings(kind="fedfrozen", eta=TRADEOFF_ETA, local_steps=st.local_steps, warm_frac=0.0)
    cfg = _base_config("tradeoff-warm", replace(st, data=replace(st.data, rho=rho)), method, cadence=0, sweep={"warm_frac": WARM_GRID})
    exp = _run(cfg, st, out)
    samples = [_finals(exp.for_cell(c.index)) for c in exp.cells]
    return aggregate_series(f"FedFrozen, rho={rho:g}", list(WARM_GRID), samples), exp


def _rho_sweep(st: FigureSettings, out: Path, rho_grid: Sequence[float]) -> tuple[list[AggregateSeries], list[ExperimentOutput]]:
    base = dict(eta=TRADEOFF_ETA, local_steps=st.local_steps)
    warms = _warm_candidates(st) + (1.0,)
    frozen_cfg = _base_config(
        "tradeoff-rho-fedfrozen",
        st,
        MethodSettings(kind="fedfrozen", warm_frac=warms[0], **base),
        cadence=0,
        sweep={"rho": rho_grid, "warm_frac": warms},
    )
    prox_cfg = _base_config("tradeoff-rho-fedprox", st, MethodSettings(kind="fedprox", mu=FEDPROX_MU, **base), 0, {"rho": rho_grid})
    scaf_cfg = _base_config("tradeoff-rho-scaffold", st, MethodSettings(kind="scaffold", **base), 0, {"rho": rho_grid})
    frozen = _run(frozen_cfg, st, out)
    prox = _run(prox_cfg, st, out)
    scaf = _run(scaf_cfg, st, out)

    def rows(exp: ExperimentOutput, warm: Optional[float] = None) -> list[list[float]]:
        picked = []
        for rho in rho_grid:
            cells = [c for c in exp.cells if c.data.rho == rho]
            if warm == "select":
                cell = _select_warm(exp, cells)
            else:
                cell = next(c for c in cells if warm is None or c.method.warm_frac == warm)
            picked.append(_finals(exp.for_cell(cell.index)))
        return picked

    series = [
        aggregate_series("FedFrozen", list(rho_grid), rows(frozen, "select")),
        aggregate_series("FedAvg", list(rho_grid), rows(frozen, 1.0)),
        aggregate_series(f"FedProx (mu={FEDPROX_MU:g})", list(rho_grid), rows(prox)),
        aggregate_series("SCAFFOLD", list(rho_grid), rows(scaf)),
    ]
    return series, [frozen, prox, scaf]


def figure_tradeoffs(
    st: FigureSettings = FigureSettings(),
    parts: Sequence[str] = ("E", "warm", "rho"),
    e_grid: Sequence[int] = E_GRID,
    rho_grid: Sequence[float] = RHO_GRID,
    warm_rho: float = WARM_SWEEP_RHO,
) -> FigureResult:
    """Local-steps ratio, warm-up sweep and heterogeneity sweep (any subset of the three)."""
    out = Path(st.output_root) / "tradeoff"
    out.mkdir(parents=True, exist_ok=True)
    panels, series, exps = [], {}, []
    if "E" in parts:
        s, chosen, exp = _e_ratio(st, out, e_grid)
        series["E_ratio"] = s
        series["E_warm_frac"] = chosen
        exps.append(exp)
        panels.append(Panel("Final-loss ratio vs E", (s,), "local steps E", "FedFrozen / FedAvg", hline=1.0))
    if "warm" in parts:
        s, exp = _warm_sweep(st, out, warm_rho)
        series["warm"] = s
        exps.append(exp)
        panels.append(Panel("Warm-up length", (s,), "T_warm / T", "final loss"))
    if "rho" in parts:
        ss, ee = _rho_sweep(st, out, rho_grid)
        for s in ss:
            series[f"rho:{s.label}"] = s
        exps.extend(ee)
        panels.append(Panel("Heterogeneity", tuple(ss), "rho", "final loss", log_y=True))
    files = [emit_svg(panels, out / "tradeoff.svg")]
    files.append(_write_json(out / "tradeoff.json", {k: _jsonable(v) for k, v in series.items()}))
    return FigureResult("tradeoff", series, files, exps)


# ------------------------------------------------------------------ heatmap / lambda


def figure_heatmap(st: FigureSettings = FigureSettings(), rhos: Sequence[float] = RHO_GRID) -> FigureResult:
    """Median final loss over (rho, warm fraction), log10 scale, per-row argmin starred."""
    out = Path(st.output_root) / "heatmap"
    out.mkdir(parents=True, exist_ok=True)
    method = MethodSettings(kind="fedfrozen", eta=TRADEOFF_ETA, local_steps=st.local_steps, warm_frac=0.0)
    cfg = _base_config("heatmap-runs", st, method, cadence=0, sweep={"rho": rhos, "warm_frac": WARM_GRID})
    exp = _run(cfg, st, out)
    medians: list[list[float]] = []
    for rho in rhos:
        row = []
        for w in WARM_GRID:
            cell = next(c for c in exp.cells if c.data.rho == rho and c.method.warm_frac == w)
            vals = [v for v in _finals(exp.for_cell(cell.index)) if not math.isnan(v)]
            row.append(float(np.median(vals)) if vals else float("nan"))
        medians.append(row)
    argmins = [int(np.nanargmin(row)) if not all(math.isnan(v) for v in row) else -1 for row in medians]
    logs = tuple(tuple(math.log10(v) if v > 0 else float("nan") for v in row) for row in medians)
    hm = Heatmap(
        title="log10 median final loss",
        values=logs,
        row_labels=tuple(f"ρ={r:g}" for r in rhos),
        col_labels=tuple(f"{w:g}" for w in WARM_GRID),
        x_label="T_warm / T",
        y_label="heterogeneity",
        marks=tuple(argmins),
    )
    data = {
        "rhos": list(rhos),
        "warm_fracs": list(WARM_GRID),
        "median_final_loss": medians,
        "argmin_warm_frac": [WARM_GRID[i] if i >= 0 else None for i in argmins],
    }
    files = [emit_svg(hm, out / "heatmap.svg"), _write_json(out / "heatmap.json", data)]
    return FigureResult("heatmap", data, files, [exp])


def figure_lambda(
    st: FigureSettings = FigureSettings(), lambdas: Sequence[float] = LAMBDA_GRID, rho: float = LAMBDA_RHO
) -> FigureResult:
    """Final loss and trailing-window drift across the value-block ridge strength."""
    out = Path(st.output_root) / "lambda"
    out.mkdir(parents=True, exist_ok=True)
    warms = _warm_candidates(st)
    method = MethodSettings(kind="fedfrozen", eta=TRADEOFF_ETA, local_steps=st.local_steps, warm_frac=warms[0])
    sweep = {"lambda": lambdas, "warm_frac": warms}
    cfg = _base_config("lambda-runs", replace(st, data=replace(st.data, rho=rho)), method, cadence=0, sweep=sweep)
    exp = _run(cfg, st, out)
    loss_s, drift_s, chosen = [], [], {}
    for lam in lambdas:
        cell = _select_warm(exp, [c for c in exp.cells if c.method.lam == lam])
        chosen[float(lam)] = cell.method.warm_frac
        runs = exp.for_cell(cell.index)
        loss_s.append(_finals(runs))
        drift_s.append([r.drift_last50 if r.status == "ok" else float("nan") for r in runs])
    loss = aggregate_series("final loss", list(lambdas), loss_s)
    drift = aggregate_series("drift (last 50 rounds)", list(lambdas), drift_s)
    chart = DualAxis(
        title=f"Value-block ridge, ρ={rho:g}",
        left=loss,
        right=drift,
        x_label="lambda",
        left_label="final loss",
        right_label="client drift",
        categorical_x=True,
    )
    series = {"loss": loss, "drift": drift, "warm_frac": chosen}
    files = [emit_svg(chart, out / "lambda.svg")]
    files.append(_write_json(out / "lambda.json", {k: _jsonable(v) for k, v in series.items()}))
    return FigureResult("lambda", series, files, [exp])


def figure_heatmap_and_lambda(st: FigureSettings = FigureSettings()) -> tuple[FigureResult, FigureResult]:
    return figure_heatmap(st), figure_lambda(st)
