"""Federated round engine: local updates, server aggregation, seven methods.

All clients are stepped together: client copies of the parameters are
stacked along a leading axis of length K and pushed through the batched
attention kernels.  Server reductions run over that axis in client-index
order so results are reproducible bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import attention as att
from .attention import AttentionParams, Shard
from .data import FederatedDataset
from .matrix_core import ConfigurationError, NonFiniteError

__all__ = [
    "Method",
    "MethodSpec",
    "AlgorithmState",
    "RoundRecord",
    "DivergenceError",
    "local_update_full",
    "local_update_value_only",
    "aggregate",
    "init_state",
    "run_round",
    "run_training",
    "TrainingResult",
    "BYTES_PER_SCALAR",
]

BYTES_PER_SCALAR = 8


class Method(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"
    FEDAVGM = "fedavgm"
    FEDADAM = "fedadam"
    FEDNOVA = "fednova"
    FEDFROZEN = "fedfrozen"


@dataclass(frozen=True)
class MethodSpec:
    """Method choice plus local and server hyperparameters.

    Server-side defaults follow the baselines' usual settings: FedAvgM with
    server LR 1 and momentum 0.9, FedAdam with server LR 1e-3, betas
    (0.9, 0.99) and tau 1e-3, FedNova with server LR 1.

    ``client_steps`` optionally gives each client its own number of local
    steps (FedNova's tau_k); otherwise every client runs ``local_steps``.
    ``warm_rounds`` is only read by FedFrozen.
    """

    kind: Method = Method.FEDAVG
    eta: float = 2e-4
    local_steps: int = 20
    lam: float = 1e-3
    mu: float = 0.0
    server_lr: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    warm_rounds: Optional[int] = None
    client_steps: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Method(self.kind))
        if self.client_steps is not None:
            object.__setattr__(self, "client_steps", tuple(int(s) for s in self.client_steps))
        if not self.eta >= 0:
            raise ConfigurationError("eta must be non-negative")
        if self.local_steps < 1:
            raise ConfigurationError("local_steps must be >= 1")
        if self.client_steps is not None and min(self.client_steps) < 1:
            raise ConfigurationError("every client needs at least one local step")
        if self.lam < 0:
            raise ConfigurationError("lam must be non-negative")
        if self.mu < 0:
            raise ConfigurationError("mu must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.tau <= 0 and self.kind is Method.FEDADAM:
            raise ConfigurationError("FedAdam needs tau > 0")
        if self.server_lr <= 0:
            raise ConfigurationError("server_lr must be positive")
        if self.kind is Method.FEDFROZEN and (self.warm_rounds is None or self.warm_rounds < 0):
            raise ConfigurationError("FedFrozen needs warm_rounds >= 0")

    def steps_for(self, num_clients: int) -> np.ndarray:
        if self.client_steps is None:
            return np.full(num_clients, self.local_steps, dtype=np.int64)
        if len(self.client_steps) != num_clients:
            raise ConfigurationError(f"client_steps has {len(self.client_steps)} entries, expected {num_clients}")
        return np.asarray(self.client_steps, dtype=np.int64)


@dataclass
class AlgorithmState:
    server: AttentionParams
    round_index: int = 0
    frozen_kernel: Optional[tuple[np.ndarray, np.ndarray]] = None
    # SCAFFOLD control variates: server c and per-client c_k (stacked on axis 0)
    control: Optional[AttentionParams] = None
    client_control: Optional[AttentionParams] = None
    # FedAvgM momentum / FedAdam first and second moments
    server_m: Optional[AttentionParams] = None
    server_v: Optional[AttentionParams] = None
    # per-client (gram, moment) for the frozen kernel, stacked on axis 0
    design_cache: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)


@dataclass
class RoundRecord:
    """Metrics after one round.  ``bytes_*`` are totals over all clients."""

    round_index: int
    loss_reg: float
    loss_raw: float
    drift: float
    profile_h: Optional[float]
    bytes_up: int
    bytes_down: int
    phase: int = 1

    def as_dict(self) -> dict:
        return {
            "round": self.round_index,
            "loss_reg": self.loss_reg,
            "loss_raw": self.loss_raw,
            "drift": self.drift,
            "profile_h": self.profile_h,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "phase": self.phase,
        }


class DivergenceError(NonFiniteError):
    """Training produced NaN/Inf.  Carries the inputs of the offending round."""

    def __init__(self, message: str, round_index: int, server: AttentionParams):
        super().__init__(message)
        self.round_index = round_index
        self.server = server


# -------------------------------------------------------------- param maths


def _blocks(p: AttentionParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return p.wq, p.wk, p.wv


def _zip(fn, *ps: AttentionParams) -> AttentionParams:
    return AttentionParams(*(fn(*bs) for bs in zip(*(_blocks(p) for p in ps))))


def _zeros_like(p: AttentionParams) -> AttentionParams:
    return _zip(np.zeros_like, p)


def _tile(p: AttentionParams, k: int) -> AttentionParams:
    return _zip(lambda b: np.repeat(b[None], k, axis=0), p)


def _weighted_sum(stacked: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # fixed client order
    out = weights[0] * stacked[0]
    for k in range(1, stacked.shape[0]):
        out = out + weights[k] * stacked[k]
    return out


def _wmean(stacked: AttentionParams, weights: np.ndarray) -> AttentionParams:
    return _zip(lambda b: _weighted_sum(b, weights), stacked)


def _all_finite(*arrays: np.ndarray) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)


# ------------------------------------------------------------ local updates


@np.errstate(over="ignore", invalid="ignore")  # non-finite results are checked explicitly
def _local_full(h, y, start: AttentionParams, eta, steps, lam, mu=0.0, correction=None):
    """Full-model gradient steps for a stack of clients.

    ``start`` blocks and ``correction`` blocks carry the client axis (or
    none for a single client); ``steps`` holds each client's step count.
    """
    wq, wk, wv = (b.copy() for b in _blocks(start))
    anchor = _blocks(start)
    steps = np.atleast_1d(np.asarray(steps))
    single = start.wq.ndim == 2
    for j in range(int(steps.max())):
        gq, gk, gv = att._grad(h, y, wq, wk, wv, lam)
        if mu:
            gq = gq + mu * (wq - anchor[0])
            gk = gk + mu * (wk - anchor[1])
            gv = gv + mu * (wv - anchor[2])
        if correction is not None:
            gq = gq + correction.wq
            gk = gk + correction.wk
            gv = gv + correction.wv
        if not _all_finite(gq, gk, gv):
            raise NonFiniteError(f"non-finite gradient at local step {j}")
        if single or np.all(steps > j):
            wq -= eta * gq
            wk -= eta * gk
            wv -= eta * gv
        else:
            active = (steps > j).astype(np.float64)[:, None, None]
            wq -= (eta * active) * gq
            wk -= (eta * active) * gk
            wv -= (eta * active) * gv
    return AttentionParams(wq, wk, wv)


@np.errstate(over="ignore", invalid="ignore")  # non-finite results are checked explicitly
def _local_value(gram, moment, theta, eta, steps, lam):
    """Value-block steps with the kernel frozen: grad = gram theta - moment + lam theta."""
    theta = theta.copy()
    steps = np.atleast_1d(np.asarray(steps))
    single = theta.ndim == 2
    for j in range(int(steps.max())):
        g = gram @ theta - moment + lam * theta
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite value gradient at local step {j}")
        if single or np.all(steps > j):
            theta -= eta * g
        else:
            theta -= (eta * (steps > j).astype(np.float64)[:, None, None]) * g
    return theta


def local_update_full(
    params: AttentionParams,
    shard: Shard,
    eta: float,
    steps: int,
    lam: float,
    mu: float = 0.0,
    correction: AttentionParams | None = None,
) -> AttentionParams:
    """Run ``steps`` full-batch gradient steps on one client's ridge objective.

    ``mu`` adds the FedProx term ``mu (w - w_start)`` to every block's
    gradient; ``correction`` is added to the gradient at every step
    (SCAFFOLD passes ``c - c_k``).
    """
    if steps < 1:
        raise ConfigurationError("local update needs at least one step")
    shard = att.as_shard(shard)
    return _local_full(shard.h, shard.y, params, eta, steps, lam, mu, correction)


def local_update_value_only(
    params: AttentionParams,
    frozen_phi: tuple[np.ndarray, np.ndarray],
    shard: Shard,
    eta: float,
    steps: int,
    lam: float,
) -> AttentionParams:
    """Gradient steps on the value block only; the kernel is returned as given."""
    if steps < 1:
        raise ConfigurationError("local update needs at least one step")
    gram, moment = att.value_design_matrices(frozen_phi, shard)
    theta = _local_value(gram, moment, params.wv, eta, steps, lam)
    return AttentionParams(frozen_phi[0], frozen_phi[1], theta)


# -------------------------------------------------------------- aggregation


def aggregate(
    spec: MethodSpec,
    state: AlgorithmState,
    client_params: AttentionParams,
    weights: np.ndarray,
    client_steps: Sequence[int] | None = None,
    value_only: bool = False,
) -> AlgorithmState:
    """Fold stacked client results into a new server state (round index unchanged).

    ``client_params`` blocks have a leading client axis.  With
    ``value_only`` the kernel of the server is kept and only ``wv`` is
    averaged (FedFrozen phase 2).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (client_params.wq.shape[0],):
        raise ConfigurationError("one weight per client result is required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ConfigurationError("client weights must be non-negative and sum to 1")
    server = state.server
    kind = spec.kind
    new = replace(state)

    if value_only:
        new.server = server.with_theta(_weighted_sum(client_params.wv, weights))
        return new

    if kind in (Method.FEDAVG, Method.FEDPROX, Method.FEDFROZEN):
        new.server = _wmean(client_params, weights)
    elif kind is Method.SCAFFOLD:
        new.server = _wmean(client_params, weights)
        steps = np.asarray(client_steps if client_steps is not None else spec.steps_for(len(weights)), dtype=np.float64)
        if spec.eta <= 0:
            raise ConfigurationError("SCAFFOLD control update needs eta > 0")
        scale = (1.0 / (spec.eta * steps))[:, None, None]
        c, ck = state.control, state.client_control
        # c_k+ = c_k - c + (w^t - w_k) / (eta tau_k)
        ck_new = _zip(lambda a, b, cc, w: a - cc[None] + (w[None] - b) * scale, ck, client_params, c, server)
        delta = _zip(lambda a, b: a - b, ck_new, ck)
        new.client_control = ck_new
        new.control = _zip(lambda cc, dd: cc + _weighted_sum(dd, weights), c, delta)
    elif kind is Method.FEDNOVA:
        steps = np.asarray(client_steps if client_steps is not None else spec.steps_for(len(weights)), dtype=np.float64)
        tau_eff = float(np.dot(weights, steps))
        inv = (1.0 / steps)[:, None, None]
        d = _zip(lambda w, b: _weighted_sum((w[None] - b) * inv, weights), server, client_params)
        new.server = _zip(lambda w, dd: w - (spec.server_lr * tau_eff) * dd, server, d)
    elif kind is Method.FEDAVGM:
        pseudo = _zip(lambda w, b: w - _weighted_sum(b, weights), server, client_params)
        m = pseudo if state.server_m is None else _zip(lambda mm, g: spec.momentum * mm + g, state.server_m, pseudo)
        new.server_m = m
        new.server = _zip(lambda w, mm: w - spec.server_lr * mm, server, m)
    elif kind is Method.FEDADAM:
        pseudo = _zip(lambda w, b: w - _weighted_sum(b, weights), server, client_params)
        m0 = state.server_m if state.server_m is not None else _zeros_like(server)
        v0 = state.server_v if state.server_v is not None else _zeros_like(server)
        m = _zip(lambda mm, g: spec.beta1 * mm + (1 - spec.beta1) * g, m0, pseudo)
        v = _zip(lambda vv, g: spec.beta2 * vv + (1 - spec.beta2) * g * g, v0, pseudo)
        new.server_m, new.server_v = m, v
        new.server = _zip(lambda w, mm, vv: w - spec.server_lr * mm / (np.sqrt(vv) + spec.tau), server, m, v)
    else:  # pragma: no cover
        raise ConfigurationError(f"unknown method {kind}")
    return new


# --------------------------------------------------------------- round loop


def init_state(spec: MethodSpec, params: AttentionParams, num_clients: int) -> AlgorithmState:
    state = AlgorithmState(server=params.copy())
    if spec.kind is Method.SCAFFOLD:
        state.control = _zeros_like(params)
        state.client_control = _tile(_zeros_like(params), num_clients)
    if spec.kind is Method.FEDFROZEN and spec.warm_rounds == 0:
        state.frozen_kernel = (params.wq.copy(), params.wk.copy())
    return state


@np.errstate(over="ignore", invalid="ignore")  # non-finite results are checked explicitly
def _global_losses(dataset: FederatedDataset, params: AttentionParams, lam: float) -> tuple[float, float]:
    h, y = dataset.stacked()
    per_client = att._loss(h, y, params.wq, params.wk, params.wv, 0.0)
    raw = float(_weighted_sum(per_client, dataset.client_weights))
    reg = raw + 0.5 * lam * float(np.sum(params.wv * params.wv))
    return reg, raw


def _drift(server: AttentionParams, clients: AttentionParams, weights, value_only: bool) -> float:
    blocks = ("wv",) if value_only else ("wq", "wk", "wv")
    sq = sum(np.sum((getattr(clients, b) - getattr(server, b)[None]) ** 2, axis=(1, 2)) for b in blocks)
    return float(_weighted_sum(np.sqrt(sq), np.asarray(weights)))


def _in_phase2(spec: MethodSpec, round_index: int) -> bool:
    return spec.kind is Method.FEDFROZEN and round_index >= spec.warm_rounds


def run_round(
    state: AlgorithmState,
    dataset: FederatedDataset,
    spec: MethodSpec,
    total_rounds: int | None = None,
    with_profile: bool = False,
) -> tuple[AlgorithmState, RoundRecord]:
    """One communication round: broadcast, local updates, aggregation, metrics."""
    t = state.round_index
    if total_rounds is not None and t >= total_rounds:
        raise ConfigurationError(f"round {t} is past the configured {total_rounds} rounds")
    h, y = dataset.stacked()
    weights = dataset.client_weights
    K = dataset.num_clients
    steps = spec.steps_for(K)
    dims = dataset.dims
    server = state.server
    phase2 = _in_phase2(spec, t)

    if phase2:
        first_frozen = state.design_cache is None
        if state.frozen_kernel is None:
            state.frozen_kernel = (server.wq.copy(), server.wk.copy())
        if first_frozen:
            state.design_cache = att._design(h, y, *state.frozen_kernel)
        gram, moment = state.design_cache
        try:
            theta = _local_value(gram, moment, np.repeat(server.wv[None], K, axis=0), spec.eta, steps, spec.lam)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc), t, server) from exc
        clients = AttentionParams(
            np.broadcast_to(server.wq, (K,) + server.wq.shape),
            np.broadcast_to(server.wk, (K,) + server.wk.shape),
            theta,
        )
        new = aggregate(spec, state, clients, weights, steps, value_only=True)
        up = BYTES_PER_SCALAR * dims.value_size * K
        down = BYTES_PER_SCALAR * (dims.value_size + (dims.kernel_size if first_frozen else 0)) * K
    else:
        start = _tile(server, K)
        correction = None
        if spec.kind is Method.SCAFFOLD:
            correction = _zip(lambda c, ck: c[None] - ck, state.control, state.client_control)
        mu = spec.mu if spec.kind is Method.FEDPROX else 0.0
        try:
            clients = _local_full(h, y, start, spec.eta, steps, spec.lam, mu, correction)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc), t, server) from exc
        new = aggregate(spec, state, clients, weights, steps)
        factor = 2 if spec.kind is Method.SCAFFOLD else 1
        up = down = factor * BYTES_PER_SCALAR * dims.param_count * K

    new.round_index = t + 1
    if _in_phase2(spec, new.round_index) and new.frozen_kernel is None:
        new.frozen_kernel = (new.server.wq.copy(), new.server.wk.copy())
    if not _all_finite(*_blocks(new.server)):
        raise DivergenceError(f"server parameters became non-finite in round {t}", t, server)

    loss_reg, loss_raw = _global_losses(dataset, new.server, spec.lam)
    if not (np.isfinite(loss_reg) and np.isfinite(loss_raw)):
        raise DivergenceError(f"global loss became non-finite in round {t}", t, server)
    profile_h = None
    if with_profile:
        from .diagnostics import profile

        profile_h = profile(new.server.phi, dataset, spec.lam).h_value
    record = RoundRecord(
        round_index=t,
        loss_reg=loss_reg,
        loss_raw=loss_raw,
        drift=_drift(server, clients, weights, phase2),
        profile_h=profile_h,
        bytes_up=int(up),
        bytes_down=int(down),
        phase=2 if phase2 else 1,
    )
    return new, record


@dataclass
class TrainingResult:
    records: list[RoundRecord]
    final: AttentionParams
    state: AlgorithmState
    initial_loss_reg: float
    initial_profile_h: Optional[float]
    snapshots: dict[int, AlgorithmState] = field(default_factory=dict)


def run_training(
    spec: MethodSpec,
    dataset: FederatedDataset,
    total_rounds: int,
    init: AttentionParams,
    record_profile_every: int = 0,
    snapshot_rounds: Sequence[int] = (),
    state: AlgorithmState | None = None,
) -> TrainingResult:
    """Run rounds until ``total_rounds`` have been completed.

    ``record_profile_every`` > 0 evaluates the profile objective after every
    that-many rounds (and at the start).  ``snapshot_rounds`` keeps copies of
    the state at the *start* of those rounds so callers can branch off a
    shared prefix.  Passing ``state`` resumes from it.
    """
    if total_rounds < 1:
        raise ConfigurationError("total_rounds must be >= 1")
    if spec.kind is Method.FEDFROZEN and spec.warm_rounds > total_rounds:
        raise ConfigurationError("warm_rounds cannot exceed total_rounds")
    if state is None:
        state = init_state(spec, init, dataset.num_clients)
    initial_reg, _ = _global_losses(dataset, state.server, spec.lam)
    initial_h = None
    if record_profile_every > 0:
        from .diagnostics import profile

        initial_h = profile(state.server.phi, dataset, spec.lam).h_value
    wanted = set(int(r) for r in snapshot_rounds)
    snapshots: dict[int, AlgorithmState] = {}
    records = []
    while state.round_index < total_rounds:
        if state.round_index in wanted:
            snapshots[state.round_index] = replace(state)
        with_profile = record_profile_every > 0 and (state.round_index + 1) % record_profile_every == 0
        try:
            state, rec = run_round(state, dataset, spec, total_rounds, with_profile)
        except DivergenceError as exc:
            # keep what was completed so sweeps can log it and still branch off earlier snapshots
            exc.partial = TrainingResult(records, state.server, state, initial_reg, initial_h, snapshots)
            raise
        records.append(rec)
    if total_rounds in wanted:
        snapshots[total_rounds] = replace(state)
    return TrainingResult(records, state.server, state, initial_reg, initial_h, snapshots)
