from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfrozen.experiments.aggregate import aggregate_series, quantile
from fedfrozen.experiments.config import DataSettings, ExperimentConfig, MethodSettings, load_config
from fedfrozen.experiments.gradcheck import gradcheck
from fedfrozen.experiments.runner import CSV_HEADER, run_experiment
from fedfrozen.experiments.svg import DualAxis, Heatmap, Panel, axis_range, emit_svg, render_svg
from fedfrozen.matrix_core import ConfigurationError

TINY = DataSettings(num_clients=3, examples_per_client=4, d=6, d_k=3, d_v=2, n=4, rho=1.0)


def tiny_config(tmp_path, **kw) -> ExperimentConfig:
    base = dict(
        name="tiny",
        data=TINY,
        method=MethodSettings(kind="fedavg", eta=0.05, local_steps=3),
        total_rounds=4,
        seeds=(0, 1),
        profile_cadence=2,
        output_dir=str(tmp_path / "out"),
    )
    base.update(kw)
    return ExperimentConfig(**base)


# ------------------------------------------------------------- aggregate


def _sorted_quantile(values, q):
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.sampled_from([0.25, 0.5, 0.75]))
def test_quantile_matches_sort_oracle(values, q):
    assert quantile(values, q) == pytest.approx(_sorted_quantile(values, q), rel=1e-12, abs=1e-9)


def test_aggregate_drops_nan_and_rejects_mismatch():
    s = aggregate_series("a", [1, 2], [[1.0, float("nan"), 3.0], [float("nan")]])
    assert s.median[0] == 2.0 and math.isnan(s.median[1])
    with pytest.raises(ConfigurationError):
        aggregate_series("a", [1], [[1.0], [2.0]])
    with pytest.raises(ConfigurationError):
        quantile([], 0.5)


# ------------------------------------------------------------- config


def test_config_cells_follow_axis_order(tmp_path):
    cfg = ExperimentConfig.from_dict(
        {"method": {"kind": "fedfrozen"}, "sweep": {"warm_frac": [0.0, 0.5], "rho": [0, 1, 2]}}
    )
    cells = cfg.cells()
    assert len(cells) == 6
    assert [(c.data.rho, c.method.warm_frac) for c in cells[:3]] == [(0.0, 0.0), (0.0, 0.5), (1.0, 0.0)]


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"seeds": []},
        {"sweep": {"gamma": [1]}},
        {"sweep": {"rho": []}},
        {"sweep": {"rho": [1, 1]}},
        {"data": {"rho": 1.0}, "sweep": {"rho": [0, 1]}},
        {"sweep": {"warm_frac": [0.5]}},
        {"method": {"kind": "fedfrozen"}},
        {"method": {"kind": "nope"}},
    ],
)
def test_config_rejects_invalid(doc):
    with pytest.raises((ConfigurationError, ValueError)):
        ExperimentConfig.from_dict(doc)


def test_config_roundtrip_and_load(tmp_path):
    cfg = tiny_config(tmp_path)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(bad)
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.json")


# ------------------------------------------------------------- svg


def test_svg_rejects_empty_series():
    with pytest.raises(ConfigurationError):
        render_svg(Panel("empty", ()))


def test_svg_is_deterministic_and_covers_extrema(tmp_path):
    s = aggregate_series("loss", [1, 2, 3], [[1.0, 2.0], [0.5, 0.7], [3.0, 4.0]])
    panel = Panel("p", (s,), "round", "loss", log_y=True)
    a = emit_svg(panel, tmp_path / "a.svg").read_bytes()
    b = emit_svg(panel, tmp_path / "b.svg").read_bytes()
    assert a == b and a.startswith(b"<svg")
    lo, hi = axis_range([0.5, 4.0])
    assert lo <= 0.5 and hi >= 4.0
    hm = Heatmap("h", ((1.0, 2.0), (3.0, 0.5)), ("r0", "r1"), ("c0", "c1"), marks=(0, 1))
    text = render_svg(hm)
    assert "0.500*" in text and "1.000*" in text
    da = DualAxis("d", s, s)
    assert render_svg(da) == render_svg(da)


# ------------------------------------------------------------- runner


def test_runner_writes_expected_rows(tmp_path):
    cfg = tiny_config(tmp_path, total_rounds=2, seeds=(0,))
    out = run_experiment(cfg)
    lines = (tmp_path / "out" / "records.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 3
    assert [l.split(",")[2] for l in lines[1:]] == ["1", "2"]
    doc = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert doc["cells"][0]["status"] == "ok"
    assert out.runs[0].run_id == "c000-s0"


def test_runner_rerun_is_byte_identical(tmp_path):
    cfg = tiny_config(tmp_path)
    first = {}
    for _ in range(2):
        out = run_experiment(cfg)
        for name in ("records.csv", "summary.json"):
            data = (out.out_dir / name).read_bytes()
            assert first.setdefault(name, data) == data


def test_runner_threads_match_serial(tmp_path):
    cfg = tiny_config(tmp_path, sweep={"rho": (0.0, 2.0)}, data=DataSettings(**{**TINY.__dict__, "rho": 0.0}))
    serial = run_experiment(cfg, threads=1, write=False)
    pooled = run_experiment(cfg, threads=2, write=False)
    assert serial.csv_text() == pooled.csv_text()


def test_runner_records_divergence_per_cell(tmp_path):
    cfg = tiny_config(
        tmp_path,
        method=MethodSettings(kind="fedavg", local_steps=3),
        sweep={"eta": (0.05, 1e200)},
        total_rounds=3,
    )
    out = run_experiment(cfg)
    doc = out.summary_doc()
    assert [c["status"] for c in doc["cells"]] == ["ok", "diverged"]
    bad = out.for_cell(1)[0]
    assert bad.diverged_round is not None and bad.divergence_message
    assert (out.out_dir / f"diverged-{bad.run_id}.npz").exists()


def test_prefix_sharing_matches_direct_runs(tmp_path):
    method = MethodSettings(kind="fedfrozen", eta=0.05, local_steps=3, warm_frac=0.0)
    shared = run_experiment(
        tiny_config(tmp_path, method=method, sweep={"warm_frac": (0.0, 0.5, 1.0)}), write=False
    ).csv_text().splitlines()
    for i, w in enumerate((0.0, 0.5, 1.0)):
        direct = run_experiment(
            tiny_config(tmp_path, method=MethodSettings(**{**method.__dict__, "warm_frac": w})), write=False
        ).csv_text().splitlines()[1:]
        rows = [r for r in shared[1:] if r.startswith(f"c{i:03d}-")]
        assert [r.split(",", 1)[1] for r in rows] == [r.split(",", 1)[1] for r in direct]


# ------------------------------------------------------------- gradcheck


def test_gradcheck_passes_and_is_repeatable():
    a, b = gradcheck(seed=3), gradcheck(seed=3)
    assert a.passed and a.errors == b.errors


@pytest.mark.parametrize("block", ["wq", "wk", "wv"])
def test_gradcheck_negative_control(block):
    report = gradcheck(corrupt_block=block)
    assert not report.passed
    assert report.errors[block] > 1e-3
