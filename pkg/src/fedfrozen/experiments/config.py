"""Declarative experiment configuration (one JSON document per experiment)."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from ..algorithms import Method, MethodSpec
from ..attention import ModelDims
from ..data import DataConfig
from ..matrix_core import ConfigurationError

__all__ = [
    "SWEEP_AXES",
    "OUTPUT_ROOT_ENV",
    "DataSettings",
    "MethodSettings",
    "ExperimentConfig",
    "Cell",
    "load_config",
]

# Fixed axis order; cells are enumerated as the cartesian product in this order.
SWEEP_AXES = ("rho", "E", "warm_frac", "lambda", "eta")
OUTPUT_ROOT_ENV = "FEDFROZEN_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataSettings:
    """Dataset shape and heterogeneity; seeds come from the experiment seed list."""

    num_clients: int = 10
    examples_per_client: int = 40
    d: int = 64
    d_k: int = 32
    d_v: int = 32
    n: int = 16
    rho: float = 0.0
    noise_std: float = 1e-2

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.d, self.d_k, self.d_v, self.n)

    def data_config(self, seed: int, rho: float | None = None) -> DataConfig:
        return DataConfig.from_seed(
            seed,
            num_clients=self.num_clients,
            examples_per_client=self.examples_per_client,
            dims=self.dims,
            rho=self.rho if rho is None else rho,
            noise_std=self.noise_std,
        )


@dataclass(frozen=True)
class MethodSettings:
    """Method as written in the config; ``warm_frac`` is turned into rounds per run."""

    kind: str = "fedavg"
    eta: float = 2e-4
    local_steps: int = 20
    lam: float = 1e-3
    mu: float = 0.0
    server_lr: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    warm_frac: Optional[float] = None

    def __post_init__(self):
        Method(self.kind)
        if self.warm_frac is not None and not 0.0 <= self.warm_frac <= 1.0:
            raise ConfigurationError("warm_frac must lie in [0, 1]")
        if Method(self.kind) is Method.FEDFROZEN and self.warm_frac is None:
            raise ConfigurationError("fedfrozen needs warm_frac")

    def spec(self, total_rounds: int) -> MethodSpec:
        warm = None
        if Method(self.kind) is Method.FEDFROZEN:
            warm = int(round(self.warm_frac * total_rounds))
        return MethodSpec(
            kind=Method(self.kind),
            eta=self.eta,
            local_steps=self.local_steps,
            lam=self.lam,
            mu=self.mu,
            server_lr=self.server_lr,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            tau=self.tau,
            warm_rounds=warm,
        )


@dataclass(frozen=True)
class Cell:
    """One point of the sweep grid, run once per seed."""

    index: int
    data: DataSettings
    method: MethodSettings

    @property
    def axes(self) -> dict[str, Any]:
        return {
            "rho": self.data.rho,
            "E": self.method.local_steps,
            "warm_frac": self.method.warm_frac,
            "lambda": self.method.lam,
            "eta": self.method.eta,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    data: DataSettings = field(default_factory=DataSettings)
    method: MethodSettings = field(default_factory=MethodSettings)
    total_rounds: int = 200
    seeds: tuple[int, ...] = tuple(range(10))
    profile_cadence: int = 10
    output_dir: Optional[str] = None
    sweep: dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ConfigurationError("seeds must be non-negative")
        if self.total_rounds < 1:
            raise ConfigurationError("total_rounds must be >= 1")
        if self.profile_cadence < 0:
            raise ConfigurationError("profile_cadence must be >= 0")
        for axis, values in self.sweep.items():
            if axis not in SWEEP_AXES:
                raise ConfigurationError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
            if len(values) == 0:
                raise ConfigurationError(f"sweep axis {axis!r} is empty")
            if len(set(values)) != len(values):
                raise ConfigurationError(f"sweep axis {axis!r} repeats a value")
        if "warm_frac" in self.sweep and Method(self.method.kind) is not Method.FEDFROZEN:
            raise ConfigurationError("warm_frac can only be swept for fedfrozen")

    # ----------------------------------------------------------- parsing

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        doc = dict(doc)
        sweep = {k: tuple(v) for k, v in (doc.pop("sweep", None) or {}).items()}
        data_doc = dict(doc.pop("data", {}) or {})
        method_doc = dict(doc.pop("method", {}) or {})
        # a swept quantity must not also be pinned as a scalar
        pinned = {
            "rho": "rho" in data_doc,
            "E": "local_steps" in method_doc,
            "warm_frac": "warm_frac" in method_doc,
            "lambda": "lam" in method_doc,
            "eta": "eta" in method_doc,
        }
        for axis in sweep:
            if pinned.get(axis):
                raise ConfigurationError(f"{axis!r} is both swept and set as a scalar")
        if "warm_frac" in sweep and "warm_frac" not in method_doc:
            method_doc["warm_frac"] = sweep["warm_frac"][0]
        try:
            data = DataSettings(**data_doc)
            method = MethodSettings(**method_doc)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
        unknown = set(doc) - {"name", "total_rounds", "seeds", "profile_cadence", "output_dir"}
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if "seeds" in doc:
            doc["seeds"] = tuple(int(s) for s in doc["seeds"])
        return cls(data=data, method=method, sweep=sweep, **doc)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "data": asdict(self.data),
            "method": asdict(self.method),
            "total_rounds": self.total_rounds,
            "seeds": list(self.seeds),
            "profile_cadence": self.profile_cadence,
            "output_dir": self.output_dir,
            "sweep": {k: list(v) for k, v in self.sweep.items()},
        }

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Replace top-level scalar fields (CLI flags); ``None`` values are ignored."""
        clean = {k: v for k, v in overrides.items() if v is not None}
        if "seeds" in clean:
            clean["seeds"] = tuple(clean["seeds"])
        return replace(self, **clean)

    def shift_seeds(self, offset: int) -> "ExperimentConfig":
        return replace(self, seeds=tuple(s + offset for s in self.seeds))

    def resolve_output_dir(self) -> Path:
        if self.output_dir is not None:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.name

    # ----------------------------------------------------------- grid

    def cells(self) -> list[Cell]:
        axes = [a for a in SWEEP_AXES if a in self.sweep]
        grids = [self.sweep[a] for a in axes]
        cells = []
        for i, combo in enumerate(itertools.product(*grids)):
            data, method = self.data, self.method
            for axis, value in zip(axes, combo):
                if axis == "rho":
                    data = replace(data, rho=float(value))
                elif axis == "E":
                    method = replace(method, local_steps=int(value))
                elif axis == "warm_frac":
                    method = replace(method, warm_frac=float(value))
                elif axis == "lambda":
                    method = replace(method, lam=float(value))
                elif axis == "eta":
                    method = replace(method, eta=float(value))
            cells.append(Cell(i, data, method))
        return cells


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)
