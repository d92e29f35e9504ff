from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from conftest import SMALL, random_params, small_config
from fedfrozen.attention import ModelDims, _grad, _loss, forward, regularized_loss
from fedfrozen.data import (
    DataConfig,
    FederatedDataset,
    generate_dataset,
    generate_teacher,
    global_loss,
    init_params,
    load_dataset,
    save_dataset,
)
from fedfrozen.matrix_core import ConfigurationError, SeededRng


def test_teacher_deterministic_and_scaled():
    dims = ModelDims(64, 32, 32, 16)
    a = generate_teacher(SeededRng(5), dims)
    b = generate_teacher(SeededRng(5), dims)
    assert all(np.array_equal(x, y) for x, y in zip((a.wq, a.wk, a.wv), (b.wq, b.wk, b.wv)))
    entries = np.concatenate([a.wq.ravel(), a.wk.ravel(), a.wv.ravel()])
    assert abs(entries.var() - 1 / 64) < 0.2 / 64


def test_teacher_output_finite_and_nonzero():
    dims = ModelDims(8, 4, 4, 5)
    teacher = generate_teacher(SeededRng(1), dims)
    rng = SeededRng(2)
    for _ in range(100):
        out = forward(rng.normal((5, 8)), teacher)
        assert np.all(np.isfinite(out)) and np.any(out != 0)


def test_default_shapes():
    ds = generate_dataset(DataConfig.from_seed(0))
    assert ds.num_clients == 10
    for shard in ds.shards:
        assert shard.h.shape == (40, 16, 64)
        assert shard.y.shape == (40, 16, 32)
    assert np.allclose(ds.client_weights, 0.1)


def test_rho_zero_means_and_rows_indistinguishable():
    dims = ModelDims(8, 2, 2, 16)
    ds = generate_dataset(DataConfig.from_seed(3, num_clients=2, examples_per_client=625, dims=dims, rho=0.0))
    assert np.all(ds.client_means == 0)
    a = ds.shards[0].h.reshape(-1, 8)
    b = ds.shards[1].h.reshape(-1, 8)
    assert a.shape[0] == 10_000
    p = stats.ttest_ind(a, b, axis=0, equal_var=False).pvalue
    # Bonferroni over the coordinates
    assert np.min(p) * 8 > 1e-3


def test_noiseless_teacher_has_zero_loss():
    ds = generate_dataset(small_config(noise_std=0.0))
    assert global_loss(ds.teacher, ds, 0.0) < 1e-20


def test_generation_bit_identical():
    a = generate_dataset(small_config(seed=4))
    b = generate_dataset(small_config(seed=4))
    for s, t in zip(a.shards, b.shards):
        assert np.array_equal(s.h, t.h) and np.array_equal(s.y, t.y)


def test_teacher_shared_across_rho():
    a = generate_dataset(small_config(rho=0.0))
    b = generate_dataset(small_config(rho=2.0))
    assert np.array_equal(a.teacher.wq, b.teacher.wq)


def test_heterogeneity_grows_with_rho():
    wins = 0
    for seed in range(50):
        dists = {}
        for rho in (0.5, 2.0):
            mu = generate_dataset(small_config(seed=seed, rho=rho, num_clients=4)).client_means
            dists[rho] = np.mean([np.linalg.norm(mu[i] - mu[j]) for i in range(4) for j in range(i + 1, 4)])
        wins += dists[2.0] > dists[0.5]
    assert wins >= 49


def test_global_loss_identities(rng):
    single = generate_dataset(small_config(num_clients=1))
    p = random_params(rng)
    assert global_loss(p, single, 0.1) == pytest.approx(regularized_loss(p, single.shards[0], 0.1), rel=1e-15)

    ds = generate_dataset(small_config())
    same = FederatedDataset((ds.shards[0],) * 3, np.full(3, 1 / 3), ds.teacher, ds.client_means, ds.dims)
    assert global_loss(p, same, 0.1) == pytest.approx(regularized_loss(p, ds.shards[0], 0.1), rel=1e-12)

    w = np.array([0.2, 0.3, 0.5])
    weighted = FederatedDataset(ds.shards, w, ds.teacher, ds.client_means, ds.dims)
    oracle = sum(wk * regularized_loss(p, s, 0.1) for wk, s in zip(w, ds.shards))
    assert abs(global_loss(p, weighted, 0.1) - oracle) <= 1e-12 * oracle


def test_dataset_validation(small_dataset):
    ds = small_dataset
    with pytest.raises(ConfigurationError):
        FederatedDataset(ds.shards, np.array([0.5, 0.5, 0.5]), ds.teacher, ds.client_means, ds.dims)
    with pytest.raises(ConfigurationError):
        DataConfig(num_clients=0)
    with pytest.raises(ConfigurationError):
        DataConfig(rho=-1.0)


def test_teacher_recoverable_by_centralized_descent():
    # At the literal eta = 1e-3 the scale of this loss needs far more than
    # 5000 steps; a 10x step reaches the noise floor (see the decisions log).
    dims = SMALL
    ds = generate_dataset(DataConfig.from_seed(0, num_clients=2, examples_per_client=40, dims=dims, rho=0.0))
    h = np.concatenate([s.h for s in ds.shards])
    y = np.concatenate([s.y for s in ds.shards])
    p = init_params(0, dims)
    q, k, v = p.wq, p.wk, p.wv
    for _ in range(5000):
        a, b, c = _grad(h, y, q, k, v, 0.0)
        q, k, v = q - 1e-2 * a, k - 1e-2 * b, v - 1e-2 * c
    floor = 0.5 * 1e-4 * dims.n * dims.d_v
    assert _loss(h, y, q, k, v, 0.0) <= 2 * floor


def test_snapshot_roundtrip(tmp_path, small_dataset):
    path = save_dataset(small_dataset, tmp_path / "d.json", small_config())
    back = load_dataset(path)
    assert back.dims == small_dataset.dims
    for s, t in zip(small_dataset.shards, back.shards):
        assert np.array_equal(s.h, t.h) and np.array_equal(s.y, t.y)
    assert np.array_equal(back.teacher.wv, small_dataset.teacher.wv)
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path / "bad.json")
