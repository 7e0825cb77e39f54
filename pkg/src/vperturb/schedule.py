"""Predictable history-adaptive covariance schedules.

A schedule emits one covariance per SGD step, computed only from strictly
earlier trajectory data. Predictability is enforced structurally: the only
inputs to :func:`next_covariance` are an immutable :class:`HistoryView`
snapshot (which cannot contain the current step's gradient or batch) and
schedule state whose moving statistics are updated exclusively with gradients
from completed steps.

Reference covariances for the comparison cost carry an admissibility
certificate. Synchronized (zero-cost) references are only granted to schedule
kinds whose covariance is reconstructible without the training sample; the
data-driven kinds must go through ghost or explicit references, which pay the
covariance-comparison cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gauss
from .errors import AdmissibilityError, ConfigError, InputError, SequencingError
from .gauss import Covariance, Diagonal, Isotropic, LowRankRidge
from .train import Trajectory

__all__ = [
    "HistoryView",
    "ScheduleSpec",
    "ScheduleState",
    "ReferenceSpec",
    "SCHEDULE_KINDS",
    "DETERMINISTIC_KINDS",
    "make_history_view",
    "init_state",
    "next_covariance",
    "advance",
    "reference_covariance",
    "replay_schedule",
    "spec_from_toml",
    "spec_to_toml",
]

SCHEDULE_KINDS = (
    "fixed_isotropic",
    "fixed_dense",
    "adaptive_scalar",
    "adaptive_diagonal",
    "adam_proportional",
    "adam_inverse",
    "lowrank_ridge",
)

# kinds whose covariance sequence never looks at sample-dependent data
DETERMINISTIC_KINDS = ("fixed_isotropic", "fixed_dense")

_QHAT_DECAY = 0.9


@dataclass(frozen=True)
class HistoryView:
    """Immutable snapshot of the trajectory strictly before step ``t``.

    Contains iterates W_1..W_t but gradients, batches and step sizes only up
    to step t-1, so a schedule physically cannot read current-step data.
    """

    step: int
    past_iterates: tuple[np.ndarray, ...]
    past_gradients: tuple[np.ndarray, ...]
    past_batch_indices: tuple[tuple[int, ...], ...]
    past_step_sizes: tuple[float, ...]
    scalar_stats: dict

    def stat(self, name: str):
        if name not in self.scalar_stats:
            raise InputError(f"history view has no statistic {name!r}")
        return self.scalar_stats[name]


def make_history_view(trajectory: Trajectory, t: int) -> HistoryView:
    """Snapshot H_{t-1}: everything recorded strictly before step ``t``.

    The default pathwise statistics are exponential moving averages (decay
    0.9, zero-initialized) of the squared gradient norm (``qhat``) and of the
    coordinate-wise squared gradients (``qhat_diag``).
    """
    T = trajectory.horizon
    if not 1 <= t <= T - 1:
        raise InputError(f"step {t} out of range [1, {T - 1}]")
    past = trajectory.steps[: t - 1]
    d = trajectory.dim
    qhat = 0.0
    qhat_diag = np.zeros(d)
    for s in past:
        qhat = _QHAT_DECAY * qhat + (1.0 - _QHAT_DECAY) * float(s.g @ s.g)
        qhat_diag = _QHAT_DECAY * qhat_diag + (1.0 - _QHAT_DECAY) * s.g * s.g
    iterates = tuple(s.w for s in trajectory.steps[:t])
    return HistoryView(
        step=t,
        past_iterates=iterates,
        past_gradients=tuple(s.g for s in past),
        past_batch_indices=tuple(s.batch for s in past),
        past_step_sizes=tuple(s.eta for s in past),
        scalar_stats={"qhat": qhat, "qhat_diag": qhat_diag},
    )


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    dim: int
    horizon: int
    sigma: float = 0.1  # fixed_isotropic
    sigma0: float = 0.1  # adaptive scalar/diagonal base scale
    c: float = 1.0  # adaptive statistic gain
    beta: float = 0.9  # Adam-like EMA decay
    rho: float = 0.1  # Adam-like / low-rank scale
    eps: float = 1e-8
    lambda0: float = 1e-3
    rank: int = 2
    stat: str = "qhat"
    covariances: tuple[Covariance, ...] = ()  # fixed_dense per-step list

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.dim < 1 or self.horizon < 2:
            raise ConfigError("schedule needs dim >= 1 and horizon >= 2")
        for name in ("sigma", "sigma0", "rho", "eps", "lambda0"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"schedule parameter {name} must be > 0")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must be in (0, 1)")
        if self.c < 0:
            raise ConfigError("c must be >= 0")
        if self.kind == "fixed_dense":
            if len(self.covariances) != self.horizon - 1:
                raise ConfigError("fixed_dense needs one covariance per step")
            if any(cv.dim != self.dim for cv in self.covariances):
                raise ConfigError("fixed_dense covariance dimension mismatch")


@dataclass
class ScheduleState:
    """Single-owner mutable schedule state.

    ``v`` is the Adam-like second-moment EMA; it is H_{t-1}-measurable because
    :func:`advance` only ever feeds it the gradient of the step that just
    completed. ``accumulated`` is the running sum of emitted covariances
    (zero sentinel at t=1).
    """

    spec: ScheduleSpec
    t: int = 1
    v: np.ndarray = field(default=None)  # type: ignore[assignment]
    accumulated: Covariance = field(default=None)  # type: ignore[assignment]
    emitted: list = field(default_factory=list)
    _pending: Covariance | None = None

    def __post_init__(self):
        if self.v is None:
            self.v = np.zeros(self.spec.dim)
        if self.accumulated is None:
            self.accumulated = gauss.zero(self.spec.dim)


def init_state(spec: ScheduleSpec) -> ScheduleState:
    return ScheduleState(spec=spec)


def next_covariance(state: ScheduleState, view: HistoryView) -> Covariance:
    """Emit the step-t covariance from strictly-past data."""
    spec = state.spec
    if view.step != state.t:
        raise SequencingError(f"view is for step {view.step}, schedule is at step {state.t}")
    if state._pending is not None:
        raise SequencingError("next_covariance called twice without advance")
    d = spec.dim
    if spec.kind == "fixed_isotropic":
        cov = Isotropic(spec.sigma**2, d)
    elif spec.kind == "fixed_dense":
        cov = spec.covariances[state.t - 1]
    elif spec.kind == "adaptive_scalar":
        q = float(view.stat(spec.stat))
        cov = Isotropic(spec.sigma0**2 * (1.0 + spec.c * q), d)
    elif spec.kind == "adaptive_diagonal":
        q = np.asarray(view.stat("qhat_diag"), dtype=float)
        cov = Diagonal(spec.sigma0**2 * (1.0 + spec.c * q))
    elif spec.kind == "adam_proportional":
        cov = Diagonal(spec.rho**2 * (np.sqrt(state.v) + spec.eps) + spec.lambda0)
    elif spec.kind == "adam_inverse":
        cov = Diagonal(spec.rho**2 / (np.sqrt(state.v) + spec.eps) + spec.lambda0)
    elif spec.kind == "lowrank_ridge":
        cols = []
        for g in view.past_gradients[-spec.rank :]:
            norm = float(np.linalg.norm(g))
            if norm > 0:
                cols.append(g / norm)
        if cols:
            u = np.stack(cols, axis=1)
            cov = LowRankRidge(spec.lambda0, u, np.full(u.shape[1], spec.rho**2))
        else:
            cov = LowRankRidge(spec.lambda0, np.zeros((d, 0)), np.zeros(0))
    else:  # pragma: no cover - guarded in ScheduleSpec
        raise ConfigError(f"unknown schedule kind {spec.kind!r}")
    state._pending = cov
    return cov


def advance(state: ScheduleState, emitted_cov: Covariance, g_prev: np.ndarray | None = None) -> ScheduleState:
    """Consume the emitted covariance and (optionally) the completed step's gradient.

    ``g_prev`` is the gradient of the step that just finished; it feeds the
    Adam-like second-moment EMA for the *next* emission only.
    """
    if state._pending is None:
        raise SequencingError("advance called before next_covariance emitted a covariance")
    if emitted_cov is not state._pending and not gauss.covs_equal(emitted_cov, state._pending):
        raise SequencingError("advance called with a covariance that was not the pending emission")
    state.accumulated = gauss.add(state.accumulated, emitted_cov)
    state.emitted.append(emitted_cov)
    state.t += 1
    if g_prev is not None:
        g_prev = np.asarray(g_prev, dtype=float)
        if g_prev.shape != (state.spec.dim,):
            raise InputError("g_prev has wrong length")
        state.v = state.spec.beta * state.v + (1.0 - state.spec.beta) * g_prev * g_prev
    state._pending = None
    return state


# ---------------------------------------------------------------------------
# reference covariances


_SYNCHRONIZED_MODES = ("synchronized_deterministic", "synchronized_public", "prefix_observable")
_CERT_FOR_MODE = {
    "synchronized_deterministic": "deterministic",
    "synchronized_public": "public",
    "prefix_observable": "prefix_observable",
    "ghost": "ghost",
    "explicit": "explicit",
}


@dataclass(frozen=True)
class ReferenceSpec:
    """Reference-covariance mode plus the certificate that justifies it."""

    mode: str
    certificate: str = ""
    public_seed: int | None = None
    explicit_covariances: tuple[Covariance, ...] = ()

    def __post_init__(self):
        if self.mode not in _CERT_FOR_MODE:
            raise ConfigError(f"unknown reference mode {self.mode!r}")
        if not self.certificate:
            object.__setattr__(self, "certificate", _CERT_FOR_MODE[self.mode])

    @property
    def synchronized(self) -> bool:
        return self.mode in _SYNCHRONIZED_MODES


def check_admissible(ref: ReferenceSpec, spec: ScheduleSpec) -> None:
    """Reject synchronized references for sample-driven schedules.

    Predictability is not synchronization: a schedule may legally emit a
    history-dependent covariance, yet the reference kernel may not reuse it
    unless the covariance is reconstructible without the training sample.
    """
    if not ref.synchronized:
        return
    if ref.certificate != _CERT_FOR_MODE[ref.mode]:
        raise AdmissibilityError(
            f"certificate {ref.certificate!r} does not justify mode {ref.mode!r}"
        )
    if spec.kind not in DETERMINISTIC_KINDS:
        raise AdmissibilityError(
            f"schedule kind {spec.kind!r} is sample-driven; a synchronized reference "
            "requires a deterministic, public, or prefix-observable covariance"
        )


def reference_covariance(
    ref: ReferenceSpec,
    spec: ScheduleSpec,
    actual: Covariance,
    ghost_cov: Covariance | None = None,
    step: int = 1,
):
    """Return ``(reference covariance, cost_is_zero_certified)``.

    Synchronized modes return the actual covariance with a zero-cost
    certificate; ghost mode returns the schedule rule applied to an
    independent ghost history and always pays the comparison cost.
    """
    check_admissible(ref, spec)
    if ref.synchronized:
        return actual, True
    if ref.mode == "ghost":
        if ghost_cov is None:
            raise InputError("ghost reference mode requires a ghost-schedule covariance")
        if ghost_cov.dim != actual.dim:
            raise InputError("ghost covariance dimension mismatch")
        return ghost_cov, False
    # explicit
    if not 1 <= step <= len(ref.explicit_covariances):
        raise InputError("explicit reference list does not cover this step")
    cov = ref.explicit_covariances[step - 1]
    if cov.dim != actual.dim:
        raise InputError("explicit covariance dimension mismatch")
    return cov, gauss.covs_equal(cov, actual)


def replay_schedule(trajectory: Trajectory, spec: ScheduleSpec):
    """Deterministically recompute the full covariance sequence of a trajectory.

    Returns ``(per_step, accumulated_before)`` where ``per_step[t-1]`` is
    Sigma_t and ``accumulated_before[t-1]`` is Sigma_{1:t} (the accumulated
    covariance *before* step t's emission, i.e. the zero sentinel at t=1).
    """
    if spec.dim != trajectory.dim or spec.horizon != trajectory.horizon:
        raise InputError("schedule spec does not match trajectory dimensions")
    state = init_state(spec)
    per_step = []
    accumulated_before = []
    for t in range(1, trajectory.horizon):
        view = make_history_view(trajectory, t)
        accumulated_before.append(state.accumulated)
        cov = next_covariance(state, view)
        per_step.append(cov)
        advance(state, cov, g_prev=trajectory.steps[t - 1].g)
    return per_step, accumulated_before, state.accumulated


# ---------------------------------------------------------------------------
# TOML section


_TOML_KEYS = {"kind", "sigma", "sigma0", "c", "beta", "rho", "eps", "lambda0", "rank", "stat"}


def spec_from_toml(section: dict, dim: int, horizon: int) -> ScheduleSpec:
    unknown = set(section) - _TOML_KEYS
    if unknown:
        raise ConfigError(f"unknown [schedule] keys: {sorted(unknown)}")
    if "kind" not in section:
        raise ConfigError("missing [schedule].kind")
    kind = section["kind"]
    if kind == "fixed_dense":
        raise ConfigError("fixed_dense schedules are API-only (no TOML matrix syntax)")
    kwargs = {k: v for k, v in section.items() if k != "kind"}
    for key in ("sigma", "sigma0", "c", "beta", "rho", "eps", "lambda0"):
        if key in kwargs:
            kwargs[key] = float(kwargs[key])
    if "rank" in kwargs:
        kwargs["rank"] = int(kwargs["rank"])
    return ScheduleSpec(kind=kind, dim=dim, horizon=horizon, **kwargs)


def spec_to_toml(spec: ScheduleSpec) -> dict:
    out = {"kind": spec.kind}
    relevant = {
        "fixed_isotropic": ("sigma",),
        "fixed_dense": (),
        "adaptive_scalar": ("sigma0", "c", "stat"),
        "adaptive_diagonal": ("sigma0", "c"),
        "adam_proportional": ("beta", "rho", "eps", "lambda0"),
        "adam_inverse": ("beta", "rho", "eps", "lambda0"),
        "lowrank_ridge": ("rank", "lambda0", "rho"),
    }[spec.kind]
    for key in relevant:
        out[key] = getattr(spec, key)
    return out
