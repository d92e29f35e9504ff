"""Analysis quantities: kernel profile, bias/residual split, drift, dissimilarity, cost ratio.

With the kernel fixed the regularized objective is a ridge regression in the
value block, so the profile ``h(phi) = min_theta f_lam(phi, theta)`` has the
closed form ``theta* = (sum_k p_k gram_k + lam I)^-1 sum_k p_k moment_k``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import attention as att
from .attention import AttentionParams
from .data import FederatedDataset
from .matrix_core import ConfigurationError, SingularMatrixError, frobenius_norm, solve_spd

__all__ = [
    "PROFILE_JITTER",
    "ProfileResult",
    "DecompositionReport",
    "DissimilarityFit",
    "BiasSeries",
    "profile",
    "freezing_bias_series",
    "residual",
    "profile_gap",
    "decompose",
    "client_drift",
    "estimate_dissimilarity",
    "comm_cost_ratio",
    "qk_fraction",
]

PROFILE_JITTER = 1e-10
B2_GRID = tuple(1.0 + 0.25 * i for i in range(61))  # 1, 1.25, ..., 16


def _phi_digest(phi) -> str:
    wq, wk = phi
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(wq, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(wk, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class ProfileResult:
    h_value: float
    theta_star: np.ndarray
    gram_condition_estimate: float
    phi_digest: str
    moment_norm: float

    def summary(self) -> dict:
        return {
            "h_value": self.h_value,
            "gram_condition_estimate": self.gram_condition_estimate,
            "theta_star_norm": frobenius_norm(self.theta_star),
        }


@dataclass(frozen=True)
class DecompositionReport:
    tau: int
    bias_proxy: float
    residual: float
    contraction_factor: float
    certificate: float

    def summary(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DissimilarityFit:
    M_squared: float
    B_squared: float
    sample_points: int

    def holds(self, local_sq: float, global_sq: float) -> bool:
        return local_sq <= self.M_squared + self.B_squared * global_sq


@dataclass(frozen=True)
class BiasSeries:
    rounds: tuple[int, ...]
    h_values: tuple[float, ...]

    @property
    def reference(self) -> float:
        return min(self.h_values)

    @property
    def bias(self) -> tuple[float, ...]:
        """Profile values relative to the series minimum (the optimum itself is not computable)."""
        ref = self.reference
        return tuple(v - ref for v in self.h_values)


def _weighted_design(phi, dataset: FederatedDataset):
    h, y = dataset.stacked()
    gram_k, moment_k = att._design(h, y, *phi)
    w = dataset.client_weights
    gram = w[0] * gram_k[0]
    moment = w[0] * moment_k[0]
    for k in range(1, len(w)):
        gram = gram + w[k] * gram_k[k]
        moment = moment + w[k] * moment_k[k]
    return gram, moment


def _global_reg_loss(params: AttentionParams, dataset: FederatedDataset, lam: float) -> float:
    h, y = dataset.stacked()
    per_client = att._loss(h, y, params.wq, params.wk, params.wv, 0.0)
    w = dataset.client_weights
    total = w[0] * per_client[0]
    for k in range(1, len(w)):
        total = total + w[k] * per_client[k]
    return float(total + 0.5 * lam * np.sum(params.wv * params.wv))


def profile(phi, dataset: FederatedDataset, lam: float) -> ProfileResult:
    """Closed-form minimum of the regularized global loss over the value block.

    ``lam == 0`` uses a ``PROFILE_JITTER`` ridge so the Cholesky solve is
    defined.
    """
    if lam < 0:
        raise ConfigurationError("lam must be non-negative")
    gram, moment = _weighted_design(phi, dataset)
    ridge = lam if lam > 0 else PROFILE_JITTER
    system = gram + ridge * np.eye(gram.shape[0])
    try:
        theta = solve_spd(system, moment)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            exc.pivot,
            f"profile system singular at pivot {exc.pivot} (ridge {ridge:g}; "
            f"lam=0 falls back to jitter {PROFILE_JITTER:g})",
        ) from exc
    eig = np.linalg.eigvalsh(system)
    cond = float(eig[-1] / eig[0]) if eig[0] > 0 else float("inf")
    h_value = _global_reg_loss(AttentionParams(phi[0], phi[1], theta), dataset, lam)
    return ProfileResult(h_value, theta, cond, _phi_digest(phi), frobenius_norm(moment))


def freezing_bias_series(
    trajectory: Sequence[tuple[np.ndarray, np.ndarray]],
    dataset: FederatedDataset,
    lam: float,
    rounds: Optional[Sequence[int]] = None,
) -> BiasSeries:
    """Profile value at every kernel of a trajectory."""
    if rounds is None:
        rounds = range(len(trajectory))
    values = tuple(profile(phi, dataset, lam).h_value for phi in trajectory)
    return BiasSeries(tuple(int(r) for r in rounds), values)


def residual(params: AttentionParams, prof: ProfileResult, dataset: FederatedDataset, lam: float) -> float:
    """``f_lam(phi, theta) - h(phi)``; tiny negative round-off is clipped to zero."""
    if _phi_digest(params.phi) != prof.phi_digest:
        raise ConfigurationError("profile was computed for a different kernel")
    r = _global_reg_loss(params, dataset, lam) - prof.h_value
    if r < -1e-10 * max(1.0, abs(prof.h_value)):
        raise ArithmeticError(f"residual {r:g} below zero: profile is not minimal")
    return max(r, 0.0)


def profile_gap(params: AttentionParams, prof: ProfileResult, dataset: FederatedDataset, lam: float) -> float:
    """Same quantity as :func:`residual`, evaluated as the quadratic form
    ``0.5 * <D, (G + lam I) D>`` with ``D = theta - theta_star``.

    Free of the cancellation in ``f - h``, so it stays accurate down to the
    round-off of ``D`` itself.
    """
    if _phi_digest(params.phi) != prof.phi_digest:
        raise ConfigurationError("profile was computed for a different kernel")
    gram, _ = _weighted_design(params.phi, dataset)
    delta = params.wv - prof.theta_star
    return 0.5 * float(np.sum(delta * (gram @ delta + lam * delta)))


def decompose(
    tau: int,
    params: AttentionParams,
    dataset: FederatedDataset,
    lam: float,
    eta: float,
    local_steps: int,
    total_rounds: int,
    reference: float,
) -> DecompositionReport:
    """Bias/residual split at candidate freezing round ``tau``.

    ``reference`` stands in for the unknown regularized optimum (normally the
    smallest profile value seen).  ``certificate`` is
    ``bias + rho^(T - tau) * residual`` with ``rho = 1 - 3/4 lam eta E``.
    """
    prof = profile(params.phi, dataset, lam)
    res = residual(params, prof, dataset, lam)
    rho = 1.0 - 0.75 * lam * eta * local_steps
    bias = prof.h_value - reference
    return DecompositionReport(tau, bias, res, rho, bias + rho ** (total_rounds - tau) * res)


def client_drift(
    broadcast: AttentionParams,
    clients: Sequence[AttentionParams],
    weights: Sequence[float],
    blocks: Iterable[str] = ("wq", "wk", "wv"),
) -> float:
    """Weighted mean distance of post-update client models from the broadcast model."""
    blocks = tuple(blocks)
    if len(clients) != len(weights):
        raise ConfigurationError("one weight per client is required")
    total = 0.0
    for w, c in zip(weights, clients):
        sq = sum(float(np.sum((getattr(c, b) - getattr(broadcast, b)) ** 2)) for b in blocks)
        total += w * np.sqrt(sq)
    return float(total)


def _gradient_energy(params: AttentionParams, dataset: FederatedDataset, lam: float) -> tuple[float, float]:
    """(sum_k p_k ||grad F_k||^2, ||sum_k p_k grad F_k||^2) over all blocks."""
    h, y = dataset.stacked()
    K = dataset.num_clients
    tile = [np.repeat(b[None], K, axis=0) for b in (params.wq, params.wk, params.wv)]
    grads = att._grad(h, y, *tile, lam)
    w = dataset.client_weights
    local = sum(np.sum(g * g, axis=(1, 2)) for g in grads)
    local_sq = float(np.dot(w, local))
    global_sq = 0.0
    for g in grads:
        mean = w[0] * g[0]
        for k in range(1, K):
            mean = mean + w[k] * g[k]
        global_sq += float(np.sum(mean * mean))
    return local_sq, global_sq


def estimate_dissimilarity(
    dataset: FederatedDataset,
    lam: float,
    probe_points: Sequence[AttentionParams],
) -> DissimilarityFit:
    """Fit ``sum_k p_k ||grad F_k||^2 <= M^2 + B^2 ||grad f||^2`` over probe points.

    For each ``B^2`` on the grid 1, 1.25, ..., 16 the smallest valid ``M^2``
    is the worst probe's excess (clamped at 0).  The chosen pair minimizes the
    bound averaged over the probes, ``M^2 + B^2 mean(||grad f||^2)``; ties go
    to the smaller ``M^2 + B^2``.
    """
    if len(probe_points) < 2:
        raise ConfigurationError("need at least two probe points")
    pairs = [_gradient_energy(p, dataset, lam) for p in probe_points]
    local = np.array([a for a, _ in pairs])
    glob = np.array([b for _, b in pairs])
    mean_glob = float(glob.mean())
    best = None
    for b2 in B2_GRID:
        excess = float(np.max(local - b2 * glob))
        # sum_k p_k ||g_k||^2 >= ||sum_k p_k g_k||^2 always; identical client
        # gradients only miss equality by round-off.
        if excess <= 1e-12 * max(1.0, float(local.max())):
            excess = 0.0
        m2 = max(excess, 0.0)
        key = (m2 + b2 * mean_glob, m2 + b2)
        if best is None or key < best[0]:
            best = (key, m2, b2)
    _, m2, b2 = best
    return DissimilarityFit(m2, b2, len(probe_points))


def qk_fraction(d: int, d_k: int, d_v: int) -> float:
    """Share of query/key parameters in one linear-attention layer."""
    return 2 * d * d_k / (2 * d * d_k + d * d_v)


def comm_cost_ratio(qk_frac: float, warm_frac: float) -> float:
    """Traffic of warm-up-then-freeze relative to always sending the full model."""
    for name, v in (("qk_fraction", qk_frac), ("warm_fraction", warm_frac)):
        if not 0.0 <= v <= 1.0:
            raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
    return warm_frac + (1.0 - warm_frac) * (1.0 - qk_frac)
