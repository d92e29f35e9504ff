"""Finite-difference check of the analytic attention gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..attention import AttentionParams, ModelDims, Shard, gradient, regularized_loss
from ..data import _param_draw
from ..matrix_core import ConfigurationError, SeededRng, gaussian_matrix

__all__ = ["GradcheckReport", "gradcheck", "random_instance", "GRADCHECK_TOLERANCE", "MAX_DIM_PRODUCT"]

GRADCHECK_TOLERANCE = 1e-4
MAX_DIM_PRODUCT = 10_000
BLOCKS = ("wq", "wk", "wv")


@dataclass(frozen=True)
class GradcheckReport:
    dims: ModelDims
    seed: int
    errors: dict[str, float]  # block -> max relative error
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"gradcheck d={self.dims.d} d_k={self.dims.d_k} d_v={self.dims.d_v} n={self.dims.n} seed={self.seed}"]
        for b in BLOCKS:
            out.append(f"  {b}: max relative error {self.errors[b]:.3e}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return out


def random_instance(dims: ModelDims, seed: int, examples: int = 3) -> tuple[AttentionParams, Shard]:
    """Parameters plus a small shard with random targets."""
    rng = SeededRng(seed)
    params = _param_draw(rng, dims)
    h = gaussian_matrix(rng, examples * dims.n, dims.d).reshape(examples, dims.n, dims.d)
    y = rng.normal((examples, dims.n, dims.d_v))
    return params, Shard(h, y)


def _numeric(params: AttentionParams, shard: Shard, lam: float, block: str, step: float) -> np.ndarray:
    base = getattr(params, block)
    out = np.empty_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        f_plus = regularized_loss(AttentionParams(**{**_blocks(params), block: plus}), shard, lam)
        f_minus = regularized_loss(AttentionParams(**{**_blocks(params), block: minus}), shard, lam)
        out[idx] = (f_plus - f_minus) / (2.0 * step)
    return out


def _blocks(p: AttentionParams) -> dict[str, np.ndarray]:
    return {"wq": p.wq, "wk": p.wk, "wv": p.wv}


def gradcheck(
    dims: ModelDims = ModelDims(d=6, d_k=3, d_v=3, n=4),
    seed: int = 0,
    lam: float = 1e-3,
    step: float = 1e-5,
    tolerance: float = GRADCHECK_TOLERANCE,
    corrupt_block: Optional[str] = None,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients block by block.

    The error of a block is ``max|analytic - numeric| / max|numeric|``, so tiny
    entries do not inflate it.  ``corrupt_block`` perturbs one analytic block
    by 1% and exists only as a negative control.
    """
    if dims.d * dims.d_k * dims.d_v * dims.n > MAX_DIM_PRODUCT:
        raise ConfigurationError(f"gradcheck needs d*d_k*d_v*n <= {MAX_DIM_PRODUCT}")
    if corrupt_block is not None and corrupt_block not in BLOCKS:
        raise ConfigurationError(f"unknown block {corrupt_block!r}")
    params, shard = random_instance(dims, seed)
    analytic = _blocks(gradient(params, shard, lam))
    if corrupt_block is not None:
        analytic[corrupt_block] = analytic[corrupt_block] * 1.01
    errors = {}
    for b in BLOCKS:
        num = _numeric(params, shard, lam, b, step)
        scale = max(float(np.max(np.abs(num))), 1e-300)
        errors[b] = float(np.max(np.abs(analytic[b] - num)) / scale)
    return GradcheckReport(dims, seed, errors, tolerance)
