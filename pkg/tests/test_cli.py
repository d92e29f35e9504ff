from __future__ import annotations

import json

import pytest

from fedfrozen.cli import main

TINY_DOC = {
    "name": "cli",
    "data": {"num_clients": 2, "examples_per_client": 3, "d": 6, "d_k": 3, "d_v": 2, "n": 4, "rho": 1.0},
    "method": {"kind": "fedavg", "eta": 0.05, "local_steps": 2},
    "total_rounds": 3,
    "seeds": [0],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_DOC))
    return path


def test_run_command(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(config), "--output-dir", str(out), "--quiet", "--threads", "1"]) == 0
    assert (out / "records.csv").exists()
    assert "1 runs (1 ok)" in capsys.readouterr().out


def test_run_rejects_sweep_config(tmp_path, capsys):
    path = tmp_path / "s.json"
    data = {k: v for k, v in TINY_DOC["data"].items() if k != "rho"}
    path.write_text(json.dumps({**TINY_DOC, "data": data, "sweep": {"rho": [0, 1]}}))
    assert main(["run", str(path), "--quiet"]) == 2
    assert "sweep" in capsys.readouterr().err


def test_missing_config_reports_error(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.json")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_cost_ratio(capsys):
    assert main(["cost-ratio", "--qk-frac", "0.1610", "--warm-frac", "0.2"]) == 0
    assert capsys.readouterr().out.strip() == "0.8712"
    assert main(["cost-ratio", "--warm-frac", "0.2"]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.rstrip().splitlines()[-1].startswith("PASS")
    assert main(["gradcheck", "--corrupt", "wv"]) == 1


def test_dump_data(config, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["dump-data", str(config), "--output-dir", str(out)]) == 0
    assert (out / "rho1-seed0.json").exists()


def test_figure_profile_is_deterministic(tmp_path):
    args = ["figure", "profile", "--seeds", "0,1", "--total-rounds", "3", "--local-steps", "2", "--clients", "2",
            "--examples", "3", "--d", "6", "--d-k", "3", "--d-v", "2", "--n", "4", "--threads", "1", "--quiet"]
    assert main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.suffix in (".svg", ".csv"))
    assert any(f.suffix == ".svg" for f in files) and any(f.suffix == ".csv" for f in files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
