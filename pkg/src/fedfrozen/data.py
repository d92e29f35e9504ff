"""Synthetic covariate-shift federated dataset labelled by a random teacher.

Client ``k`` draws a mean ``mu_k ~ N(0, rho^2 I_d)`` once; each example's
token rows are ``N(mu_k, I_d)`` and the label is the teacher's output plus
i.i.d. Gaussian noise on every entry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    AttentionParams,
    ModelDims,
    Shard,
    _forward_batched,
    regularized_loss,
)
from .matrix_core import ConfigurationError, SeededRng, derive_seed, gaussian_matrix

__all__ = [
    "DataConfig",
    "FederatedDataset",
    "generate_teacher",
    "generate_dataset",
    "global_loss",
    "init_params",
    "save_dataset",
    "load_dataset",
]

# Stream indices used with derive_seed(experiment_seed, ...).
TEACHER_STREAM = 0
DATA_STREAM = 1
INIT_STREAM = 2


@dataclass(frozen=True)
class DataConfig:
    num_clients: int = 10
    examples_per_client: int = 40
    dims: ModelDims = field(default_factory=lambda: ModelDims(d=64, d_k=32, d_v=32, n=16))
    rho: float = 0.0
    noise_std: float = 1e-2
    teacher_seed: int = 0
    data_seed: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if self.examples_per_client < 1:
            raise ConfigurationError("examples_per_client must be >= 1")
        if self.rho < 0:
            raise ConfigurationError("rho must be >= 0")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")

    @classmethod
    def from_seed(cls, seed: int, **kwargs) -> "DataConfig":
        """Config whose teacher and data streams derive from one experiment seed."""
        return cls(
            teacher_seed=derive_seed(seed, TEACHER_STREAM),
            data_seed=derive_seed(seed, DATA_STREAM),
            **kwargs,
        )


@dataclass(frozen=True)
class FederatedDataset:
    shards: tuple[Shard, ...]
    client_weights: np.ndarray
    teacher: AttentionParams
    client_means: np.ndarray  # K x d, kept for diagnostics
    dims: ModelDims

    def __post_init__(self):
        w = np.asarray(self.client_weights, dtype=np.float64)
        if w.shape != (len(self.shards),):
            raise ConfigurationError("one weight per shard is required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("client weights must be non-negative and sum to 1")
        if not self.shards:
            raise ConfigurationError("dataset needs at least one shard")

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """``(K, m, n, d)`` inputs and ``(K, m, n, d_v)`` labels; shards must be equal-sized."""
        cached = self.__dict__.get("_stacked")
        if cached is None:
            sizes = {len(s) for s in self.shards}
            if len(sizes) != 1:
                raise ConfigurationError("stacking requires equal shard sizes")
            cached = (np.stack([s.h for s in self.shards]), np.stack([s.y for s in self.shards]))
            object.__setattr__(self, "_stacked", cached)
        return cached


def _param_draw(rng: SeededRng, dims: ModelDims) -> AttentionParams:
    scale = 1.0 / np.sqrt(dims.d)
    wq = gaussian_matrix(rng, dims.d, dims.d_k, std=scale)
    wk = gaussian_matrix(rng, dims.d, dims.d_k, std=scale)
    wv = gaussian_matrix(rng, dims.d, dims.d_v, std=scale)
    return AttentionParams(wq, wk, wv)


def generate_teacher(rng: SeededRng, dims: ModelDims) -> AttentionParams:
    """Teacher with i.i.d. N(0, 1/d) entries in every block."""
    return _param_draw(rng, dims)


def init_params(seed: int, dims: ModelDims) -> AttentionParams:
    """Student initialization: N(0, 1/d) entries from the experiment's init stream."""
    return _param_draw(SeededRng(derive_seed(seed, INIT_STREAM)), dims)


def generate_dataset(cfg: DataConfig) -> FederatedDataset:
    dims = cfg.dims
    teacher = generate_teacher(SeededRng(cfg.teacher_seed), dims)
    root = SeededRng(cfg.data_seed)
    shards = []
    means = np.zeros((cfg.num_clients, dims.d))
    m, n, d = cfg.examples_per_client, dims.n, dims.d
    for k in range(cfg.num_clients):
        rng = root.child(k)
        mu = cfg.rho * rng.normal(d)
        h = gaussian_matrix(rng, m * n, d, mean_row=mu).reshape(m, n, d)
        noise = rng.normal((m, n, dims.d_v))
        y = _forward_batched(h, teacher.wq, teacher.wk, teacher.wv) + cfg.noise_std * noise
        shards.append(Shard(h, y))
        means[k] = mu
    weights = np.full(cfg.num_clients, 1.0 / cfg.num_clients)
    return FederatedDataset(tuple(shards), weights, teacher, means, dims)


def global_loss(params: AttentionParams, dataset: FederatedDataset, lam: float) -> float:
    """Weighted sum of client ridge objectives (the ridge term counts once since weights sum to 1)."""
    total = 0.0
    for p, shard in zip(dataset.client_weights, dataset.shards):
        total += p * regularized_loss(params, shard, lam)
    return float(total)


# ------------------------------------------------------------ snapshot I/O


def save_dataset(dataset: FederatedDataset, path: str | Path, cfg: DataConfig | None = None) -> Path:
    """Write a JSON snapshot (dims, seeds, weights, teacher, shards)."""
    path = Path(path)
    doc = {
        "format": "fedfrozen-dataset/1",
        "dims": asdict(dataset.dims),
        "config": None if cfg is None else {**asdict(cfg), "dims": asdict(cfg.dims)},
        "client_weights": dataset.client_weights.tolist(),
        "client_means": dataset.client_means.tolist(),
        "teacher": {k: getattr(dataset.teacher, k).tolist() for k in ("wq", "wk", "wv")},
        "shards": [{"h": s.h.tolist(), "y": s.y.tolist()} for s in dataset.shards],
    }
    path.write_text(json.dumps(doc))
    return path


def load_dataset(path: str | Path) -> FederatedDataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "fedfrozen-dataset/1":
        raise ConfigurationError(f"{path}: not a dataset snapshot")
    dims = ModelDims(**doc["dims"])
    teacher = AttentionParams(*(np.array(doc["teacher"][k], dtype=np.float64) for k in ("wq", "wk", "wv")))
    shards = tuple(Shard(np.array(s["h"], dtype=np.float64), np.array(s["y"], dtype=np.float64)) for s in doc["shards"])
    return FederatedDataset(
        shards,
        np.array(doc["client_weights"], dtype=np.float64),
        teacher,
        np.array(doc["client_means"], dtype=np.float64),
        dims,
    )
