"""Single-layer linear attention ``O = softmax(HWq) softmax(HWk)^T H Wv``.

The softmax is row-wise over the ``d_k`` query/key features.  Losses are
per-example ``0.5 * ||O - Y||_F^2`` averaged over the examples of a shard,
with an optional ridge term ``0.5 * lam * ||Wv||_F^2`` on the value block.

Array kernels (names starting with an underscore) accept any number of
leading batch axes: ``h`` is ``(..., m, n, d)`` and the weights are
``(..., d, d_k)``.  The round engine uses that to step all clients at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .matrix_core import ConfigurationError, NonFiniteError, frobenius_norm

__all__ = [
    "ModelDims",
    "AttentionParams",
    "Example",
    "Shard",
    "Gradients",
    "feature_map",
    "attention_matrix",
    "forward",
    "loss",
    "regularized_loss",
    "gradient",
    "value_design_matrices",
    "as_shard",
]


@dataclass(frozen=True)
class ModelDims:
    d: int
    d_k: int
    d_v: int
    n: int

    def __post_init__(self):
        for name in ("d", "d_k", "d_v", "n"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"ModelDims.{name} must be positive")

    @property
    def kernel_size(self) -> int:
        """Number of scalars in (Wq, Wk)."""
        return 2 * self.d * self.d_k

    @property
    def value_size(self) -> int:
        return self.d * self.d_v

    @property
    def param_count(self) -> int:
        return self.kernel_size + self.value_size


@dataclass(frozen=True)
class AttentionParams:
    """Kernel block ``phi = (wq, wk)`` and value block ``theta = wv``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        if self.wq.shape != self.wk.shape:
            raise ConfigurationError(f"wq {self.wq.shape} and wk {self.wk.shape} differ")
        if self.wq.shape[-2] != self.wv.shape[-2]:
            raise ConfigurationError("wq and wv must share the embedding dimension")

    @property
    def phi(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.wq, self.wk)

    @property
    def theta(self) -> np.ndarray:
        return self.wv

    @property
    def dims_dk_dv(self) -> tuple[int, int, int]:
        return self.wq.shape[-2], self.wq.shape[-1], self.wv.shape[-1]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.wq.ravel(), self.wk.ravel(), self.wv.ravel()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, d: int, d_k: int, d_v: int) -> "AttentionParams":
        vec = np.asarray(vec, dtype=np.float64)
        nk = d * d_k
        if vec.shape != (2 * nk + d * d_v,):
            raise ConfigurationError(f"vector of length {vec.size} does not match dims")
        return cls(
            vec[:nk].reshape(d, d_k).copy(),
            vec[nk : 2 * nk].reshape(d, d_k).copy(),
            vec[2 * nk :].reshape(d, d_v).copy(),
        )

    def with_theta(self, wv: np.ndarray) -> "AttentionParams":
        return AttentionParams(self.wq, self.wk, wv)

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.wq.copy(), self.wk.copy(), self.wv.copy())


Gradients = AttentionParams
"""Gradients share the (g_wq, g_wk, g_wv) layout of the parameters."""


@dataclass(frozen=True)
class Example:
    h: np.ndarray  # n x d
    y: np.ndarray  # n x d_v


@dataclass(frozen=True)
class Shard:
    """A client's examples stacked: ``h`` is ``(m, n, d)``, ``y`` is ``(m, n, d_v)``."""

    h: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.h.ndim != 3 or self.y.ndim != 3:
            raise ConfigurationError("shard arrays must be 3-D (examples, tokens, features)")
        if self.h.shape[:2] != self.y.shape[:2]:
            raise ConfigurationError(f"h {self.h.shape} and y {self.y.shape} disagree")
        if self.h.shape[0] < 1:
            raise ConfigurationError("dataset is empty")

    def __len__(self) -> int:
        return self.h.shape[0]

    def examples(self) -> list[Example]:
        return [Example(self.h[i], self.y[i]) for i in range(len(self))]


DatasetLike = Union[Shard, Sequence[Example]]


def as_shard(dataset: DatasetLike) -> Shard:
    if isinstance(dataset, Shard):
        return dataset
    items = list(dataset)
    if not items:
        raise ConfigurationError("dataset is empty")
    return Shard(np.stack([e.h for e in items]), np.stack([e.y for e in items]))


# ---------------------------------------------------------------- kernels


def feature_map(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    e = np.array(z, dtype=np.float64)
    e -= e.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def _project(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (..., m, n, d) @ (..., d, c) as one GEMM per batch entry
    *lead, m, n, d = h.shape
    out = h.reshape(*lead, m * n, d) @ w
    return out.reshape(*lead, m, n, w.shape[-1])


def _kernel_features(h, wq, wk):
    p = feature_map(_project(h, wq))
    s = feature_map(_project(h, wk))
    z = (p @ np.swapaxes(s, -1, -2)) @ h
    return p, s, z


def _forward_parts(h, wq, wk, wv):
    # O = P (S^T (H Wv)); avoids forming the n x n kernel and Z.
    d_k = wq.shape[-1]
    proj = _project(h, np.concatenate([wq, wk, wv], axis=-1))
    p = feature_map(proj[..., :d_k])
    s = feature_map(proj[..., d_k : 2 * d_k])
    v = proj[..., 2 * d_k :]
    return p, s, v, p @ (np.swapaxes(s, -1, -2) @ v)


def _forward_batched(h, wq, wk, wv):
    return _forward_parts(h, wq, wk, wv)[3]


def _loss(h, y, wq, wk, wv, lam):
    res = _forward_batched(h, wq, wk, wv) - y
    m = h.shape[-3]
    data = 0.5 * np.sum(res * res, axis=(-3, -2, -1)) / m
    return data + 0.5 * lam * np.sum(wv * wv, axis=(-2, -1))


def _grad(h, y, wq, wk, wv, lam):
    """Analytic gradients of the averaged, ridge-regularized loss.

    With residual G = O - Y, V = H Wv and per-example kernel A = P S^T:
    dWv = Z^T G = H^T S (P^T G), dA = G V^T, dP = dA S, dS = dA^T P,
    and each softmax row contributes the Jacobian diag(p) - p p^T.
    """
    p, s, v, out = _forward_parts(h, wq, wk, wv)
    g = out - y
    *lead, m, n, d = h.shape
    d_k = wq.shape[-1]
    pt = np.swapaxes(p, -1, -2)
    gt = np.swapaxes(g, -1, -2)
    u = s @ (pt @ g)
    dp = g @ (np.swapaxes(v, -1, -2) @ s)
    ds = v @ (gt @ p)
    dq = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dk = s * (ds - np.sum(ds * s, axis=-1, keepdims=True))
    back = np.concatenate([dq, dk, u], axis=-1).reshape(*lead, m * n, -1)
    full = np.swapaxes(h.reshape(*lead, m * n, d), -1, -2) @ back
    full *= 1.0 / m
    g_wq = full[..., :d_k]
    g_wk = full[..., d_k : 2 * d_k]
    g_wv = full[..., 2 * d_k :] + lam * wv
    return g_wq, g_wk, g_wv


def _design(h, y, wq, wk):
    _, _, z = _kernel_features(h, wq, wk)
    *lead, m, n, d = h.shape
    zf = z.reshape(*lead, m * n, d)
    yf = y.reshape(*lead, m * n, y.shape[-1])
    zt = np.swapaxes(zf, -1, -2)
    return (zt @ zf) / m, (zt @ yf) / m


# ------------------------------------------------------------- public API


def _check_lambda(lam: float) -> float:
    if lam < 0:
        raise ConfigurationError(f"ridge coefficient must be non-negative, got {lam}")
    return float(lam)


def _check_shapes(h: np.ndarray, wq, wk, wv=None) -> None:
    d = h.shape[-1]
    if wq.shape[0] != d or wk.shape[0] != d or (wv is not None and wv.shape[0] != d):
        raise ConfigurationError(f"embedding dim {d} does not match parameter shapes")
    if wq.shape != wk.shape:
        raise ConfigurationError("wq and wk shapes differ")


def attention_matrix(h: np.ndarray, phi: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """``Z = softmax(H Wq) softmax(H Wk)^T H`` for one ``n x d`` example."""
    wq, wk = phi
    _check_shapes(h, wq, wk)
    p = feature_map(h @ wq)
    s = feature_map(h @ wk)
    return (p @ s.T) @ h


def forward(h: np.ndarray, params: AttentionParams) -> np.ndarray:
    _check_shapes(h, params.wq, params.wk, params.wv)
    return attention_matrix(h, params.phi) @ params.wv


def loss(params: AttentionParams, dataset: DatasetLike) -> float:
    """Unregularized client objective: mean over examples of 0.5 ||O - Y||_F^2."""
    return regularized_loss(params, dataset, 0.0)


def regularized_loss(params: AttentionParams, dataset: DatasetLike, lam: float) -> float:
    lam = _check_lambda(lam)
    shard = as_shard(dataset)
    _check_shapes(shard.h, params.wq, params.wk, params.wv)
    return float(_loss(shard.h, shard.y, params.wq, params.wk, params.wv, lam))


def gradient(params: AttentionParams, dataset: DatasetLike, lam: float) -> Gradients:
    lam = _check_lambda(lam)
    shard = as_shard(dataset)
    _check_shapes(shard.h, params.wq, params.wk, params.wv)
    g = Gradients(*_grad(shard.h, shard.y, params.wq, params.wk, params.wv, lam))
    for block in (g.wq, g.wk, g.wv):
        if not np.all(np.isfinite(block)):
            raise NonFiniteError("gradient contains non-finite entries")
    return g


def value_design_matrices(
    phi: tuple[np.ndarray, np.ndarray], dataset: DatasetLike
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(gram, moment)`` = mean over examples of ``Z^T Z`` and ``Z^T Y``.

    With the kernel fixed the loss is quadratic in ``Wv``:
    ``0.5 tr(Wv^T gram Wv) - tr(Wv^T moment) + const``.
    """
    shard = as_shard(dataset)
    wq, wk = phi
    _check_shapes(shard.h, wq, wk)
    return _design(shard.h, shard.y, wq, wk)


def gradient_norm(g: Gradients, blocks: Iterable[str] = ("wq", "wk", "wv")) -> float:
    return float(np.sqrt(sum(frobenius_norm(getattr(g, b)) ** 2 for b in blocks)))
