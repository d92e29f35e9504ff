from __future__ import annotations

import numpy as np
import pytest

from fedfrozen.attention import AttentionParams, ModelDims, Shard
from fedfrozen.data import DataConfig, generate_dataset
from fedfrozen.matrix_core import SeededRng, gaussian_matrix

SMALL = ModelDims(d=6, d_k=3, d_v=2, n=4)


def random_params(rng: SeededRng, dims: ModelDims = SMALL, scale: float = 1.0) -> AttentionParams:
    s = scale / np.sqrt(dims.d)
    return AttentionParams(
        gaussian_matrix(rng, dims.d, dims.d_k, std=s),
        gaussian_matrix(rng, dims.d, dims.d_k, std=s),
        gaussian_matrix(rng, dims.d, dims.d_v, std=s),
    )


def random_shard(rng: SeededRng, dims: ModelDims = SMALL, m: int = 3) -> Shard:
    h = gaussian_matrix(rng, m * dims.n, dims.d).reshape(m, dims.n, dims.d)
    y = rng.normal((m, dims.n, dims.d_v))
    return Shard(h, y)


def small_config(seed: int = 0, **kw) -> DataConfig:
    base = dict(num_clients=3, examples_per_client=4, dims=SMALL, rho=1.0)
    base.update(kw)
    return DataConfig.from_seed(seed, **base)


@pytest.fixture
def rng() -> SeededRng:
    return SeededRng(1234)


@pytest.fixture
def small_dataset():
    return generate_dataset(small_config())


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
