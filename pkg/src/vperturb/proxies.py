"""Per-step and terminal proxy estimators for virtual-perturbation diagnostics.

Implements the full diagnostic loop: for every checkpoint, the gradient
deviation (or subbatch fluctuation) proxy in the chosen inverse-covariance
geometry, the Monte Carlo gradient-sensitivity proxy under the accumulated
covariance, and the covariance-comparison cost; then the terminal output
sensitivity on train and eval samples, the penalty difference, and the summary
diagnostic that combines them with the 2 eta_t^2 coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _io, gauss, rng, schedule, train
from .errors import ConfigError, InputError, RunError
from .gauss import Covariance, Diagonal, Isotropic

__all__ = [
    "ProxyOptions",
    "CheckpointRecord",
    "ProxyReport",
    "deviation_proxy",
    "fluctuation_proxy",
    "fluctuation_proxy_K",
    "sensitivity_proxy",
    "covariance_mismatch_proxy",
    "output_sensitivity_proxy",
    "penalty_difference",
    "run_algorithm1",
    "report_to_csv",
    "report_to_summary",
]

_DEVIATION_MODES = ("dev", "dev_ref", "fluc", "fluc_ref", "fluc_K")


@dataclass(frozen=True)
class ProxyOptions:
    checkpoints: tuple[int, ...]
    mc_samples: int = 1000
    mc_samples_final: int = 1000
    deviation_mode: str = "dev"
    seed: int = 0
    common_random_numbers: bool = True

    def __post_init__(self):
        if self.deviation_mode not in _DEVIATION_MODES:
            raise ConfigError(f"unknown deviation mode {self.deviation_mode!r}")
        if self.mc_samples < 1 or self.mc_samples_final < 1:
            raise InputError("Monte Carlo sample counts must be >= 1")
        object.__setattr__(self, "checkpoints", tuple(sorted(set(int(t) for t in self.checkpoints))))

    @property
    def reference_geometry(self) -> bool:
        return self.deviation_mode.endswith("_ref")


@dataclass(frozen=True)
class CheckpointRecord:
    t: int
    v_hat: float
    v_mode: str
    gamma_hat: float | None
    gamma_mode: str
    c_hat: float
    trace_sigma_t: float
    trace_sigma_1t: float
    eta: float


@dataclass(frozen=True)
class ProxyReport:
    records: tuple[CheckpointRecord, ...]
    delta_train: float
    delta_eval: float
    r_hat: float
    b_hat: float
    b_hat_sharper: float
    metadata: dict = field(default_factory=dict)


def _mahal_many(diffs: np.ndarray, weight: Covariance) -> np.ndarray:
    """Row-wise squared Mahalanobis norms in the inverse-``weight`` metric."""
    if isinstance(weight, Isotropic):
        weight._check_invertible()
        return np.sum(diffs * diffs, axis=1) / weight.sigma_sq
    if isinstance(weight, Diagonal):
        return np.sum(diffs * diffs / weight.entries, axis=1)
    return np.array([gauss.mahalanobis_sq(row, weight) for row in diffs])


def deviation_proxy(g_t: np.ndarray, ghat: np.ndarray, weight: Covariance) -> float:
    """||g_t - ghat||^2 in the inverse-``weight`` geometry."""
    g_t = np.asarray(g_t, dtype=float)
    ghat = np.asarray(ghat, dtype=float)
    if g_t.shape != ghat.shape:
        raise InputError("gradient shapes differ")
    return gauss.mahalanobis_sq(g_t - ghat, weight)


def pair_scaling(b1: int, b2: int) -> float:
    """Scaling for the two-subbatch difference proxy.

    Targets the covariance of a half-size minibatch gradient: the factor
    2*b1*b2 / (b1+b2)^2 reduces to 1/2 for equal halves and corrects the
    i.i.d. covariance scaling (1/b1 + 1/b2) otherwise.
    """
    if b1 < 1 or b2 < 1:
        raise InputError("subbatch sizes must be >= 1")
    return 2.0 * b1 * b2 / float(b1 + b2) ** 2


def fluctuation_proxy(g1, g2, sizes: tuple[int, int], weight: Covariance) -> float:
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    return pair_scaling(*sizes) * gauss.mahalanobis_sq(g1 - g2, weight)


def fluctuation_proxy_K(grads, weight: Covariance) -> float:
    """Empirical subbatch fluctuation: (1/(K-1)) sum_k ||g_k - mean||^2_weight."""
    grads = [np.asarray(g, dtype=float) for g in grads]
    k = len(grads)
    if k < 2:
        raise InputError("need at least 2 subbatch gradients")
    stack = np.stack(grads)
    diffs = stack - stack.mean(axis=0)
    return float(np.sum(_mahal_many(diffs, weight)) / (k - 1))


def sensitivity_proxy(
    model,
    w_t: np.ndarray,
    accumulated: Covariance,
    weight: Covariance,
    eval_batch: np.ndarray,
    m: int,
    rng_: np.random.Generator,
) -> float:
    """MC estimate of the gradient change under accumulated perturbations.

    (1/m) sum_j ||g(w + zeta_j, eval) - g(w, eval)||^2_weight with
    zeta_j ~ N(0, Sigma_{1:t}); exactly 0 for the zero accumulated sentinel.
    """
    if m < 1:
        raise InputError("m must be >= 1")
    if eval_batch is None or len(eval_batch) == 0:
        raise InputError("sensitivity proxy needs a nonempty eval batch")
    if accumulated.is_zero:
        return 0.0
    w_t = np.asarray(w_t, dtype=float)
    zetas = accumulated.sample(m, rng_)
    base = model.grad(w_t, eval_batch)
    perturbed = model.grad_many(w_t[None, :] + zetas, eval_batch)
    return float(np.mean(_mahal_many(perturbed - base[None, :], weight)))


def covariance_mismatch_proxy(sigma_t: Covariance, sigma_ref: Covariance) -> float:
    return gauss.cov_compare_cost(sigma_t, sigma_ref)


def output_sensitivity_proxy(
    model,
    w_final: np.ndarray,
    accumulated_final: Covariance,
    samples: np.ndarray,
    m_final: int,
    rng_: np.random.Generator,
    zetas: np.ndarray | None = None,
) -> float:
    """(1/m) sum_j [L(w) - L(w + zeta_j)] with zeta_j ~ N(0, Sigma_{1:T}).

    ``zetas`` may be supplied to share draws between train and eval
    evaluations (common random numbers).
    """
    if m_final < 1:
        raise InputError("m_final must be >= 1")
    if accumulated_final.is_zero:
        return 0.0
    w_final = np.asarray(w_final, dtype=float)
    if zetas is None:
        zetas = accumulated_final.sample(m_final, rng_)
    base = model.loss(w_final, samples)
    perturbed = model.loss_many(w_final[None, :] + zetas, samples)
    if not np.all(np.isfinite(perturbed)):
        raise RunError("perturbed loss is nonfinite")
    return float(np.mean(base - perturbed))


def penalty_difference(delta_eval: float, delta_train: float) -> float:
    return abs(float(delta_eval) - float(delta_train))


# ---------------------------------------------------------------------------
# the full diagnostic loop


def run_algorithm1(
    model,
    dataset: train.Dataset,
    trajectory: train.Trajectory,
    schedule_spec: schedule.ScheduleSpec,
    reference_spec: schedule.ReferenceSpec,
    options: ProxyOptions,
    ghost_trajectory: train.Trajectory | None = None,
) -> ProxyReport:
    """Run the proxy-estimation loop over a recorded trajectory."""
    T = trajectory.horizon
    for t in options.checkpoints:
        if not 1 <= t <= T - 1:
            raise InputError(f"checkpoint {t} out of range [1, {T - 1}]")
    fluc_mode = options.deviation_mode.startswith("fluc")
    if fluc_mode:
        for t in options.checkpoints:
            if trajectory.steps[t - 1].g_sub is None:
                raise ConfigError(
                    f"deviation mode {options.deviation_mode!r} needs recorded subbatch "
                    f"gradients, missing at step {t}"
                )
    schedule.check_admissible(reference_spec, schedule_spec)

    per_step, accumulated_before, accumulated_final = schedule.replay_schedule(
        trajectory, schedule_spec
    )
    ghost_per_step = None
    if reference_spec.mode == "ghost":
        if ghost_trajectory is None:
            raise InputError("ghost reference mode requires a ghost trajectory")
        ghost_per_step, _, _ = schedule.replay_schedule(ghost_trajectory, schedule_spec)

    has_eval = dataset.eval_samples is not None and len(dataset.eval_samples) > 0
    records = []
    certified_flags = []
    for t in options.checkpoints:
        step = trajectory.steps[t - 1]
        sigma_t = per_step[t - 1]
        ghost_cov = ghost_per_step[t - 1] if ghost_per_step is not None else None
        ref_cov, certified = schedule.reference_covariance(
            reference_spec, schedule_spec, sigma_t, ghost_cov=ghost_cov, step=t
        )
        certified_flags.append(certified)
        weight = ref_cov if options.reference_geometry else sigma_t

        if fluc_mode:
            if options.deviation_mode == "fluc_K":
                v_hat = fluctuation_proxy_K(step.g_sub, weight)
            else:
                sizes = step.sub_sizes or (len(step.batch) // 2, len(step.batch) - len(step.batch) // 2)
                v_hat = fluctuation_proxy(step.g_sub[0], step.g_sub[1], (sizes[0], sizes[1]), weight)
        else:
            if not has_eval:
                raise ConfigError("deviation modes need eval samples for the population proxy")
            ghat = model.grad(step.w, dataset.eval_samples)
            v_hat = deviation_proxy(step.g, ghat, weight)

        if has_eval:
            gamma_hat = sensitivity_proxy(
                model,
                step.w,
                accumulated_before[t - 1],
                weight,
                dataset.eval_samples,
                options.mc_samples,
                rng.stream(options.seed, 100, t),
            )
            gamma_mode = "ref" if options.reference_geometry else "sync"
        else:
            gamma_hat = None
            gamma_mode = "not_computed"

        c_hat = 0.0 if certified else covariance_mismatch_proxy(sigma_t, ref_cov)
        records.append(
            CheckpointRecord(
                t=t,
                v_hat=v_hat,
                v_mode=options.deviation_mode,
                gamma_hat=gamma_hat,
                gamma_mode=gamma_mode,
                c_hat=c_hat,
                trace_sigma_t=sigma_t.trace(),
                trace_sigma_1t=accumulated_before[t - 1].trace(),
                eta=step.eta,
            )
        )

    w_final = trajectory.final_iterate()
    final_rng = rng.stream(options.seed, 200)
    if accumulated_final.is_zero:
        zetas = None
    else:
        zetas = accumulated_final.sample(options.mc_samples_final, final_rng)
    shared = zetas if options.common_random_numbers else None
    delta_train = output_sensitivity_proxy(
        model, w_final, accumulated_final, dataset.train, options.mc_samples_final,
        rng.stream(options.seed, 201), zetas=shared,
    )
    if has_eval:
        delta_eval = output_sensitivity_proxy(
            model, w_final, accumulated_final, dataset.eval_samples, options.mc_samples_final,
            rng.stream(options.seed, 202), zetas=shared,
        )
        r_hat = penalty_difference(delta_eval, delta_train)
    else:
        delta_eval = float("nan")
        r_hat = 0.0

    b_hat = r_hat
    b_hat_sharper = r_hat
    gamma_missing = []
    for rec in records:
        gamma = rec.gamma_hat if rec.gamma_hat is not None else 0.0
        if rec.gamma_hat is None:
            gamma_missing.append(rec.t)
        b_hat += 2.0 * rec.eta**2 * (rec.v_hat + gamma) + rec.c_hat
        b_hat_sharper += rec.eta**2 * (rec.v_hat + gamma) + rec.c_hat

    metadata = {
        "schedule": schedule.spec_to_toml(schedule_spec),
        "reference_mode": reference_spec.mode,
        "reference_certificate": reference_spec.certificate,
        "cost_certified": certified_flags,
        "deviation_mode": options.deviation_mode,
        "mc_samples": options.mc_samples,
        "mc_samples_final": options.mc_samples_final,
        "seed": options.seed,
        "common_random_numbers": options.common_random_numbers,
        "subbatch_pair_scaling": "2*b1*b2/(b1+b2)^2",
        "gamma_not_computed_at": gamma_missing,
        "trajectory_hash": train.trajectory_hash(trajectory),
    }
    return ProxyReport(
        records=tuple(records),
        delta_train=delta_train,
        delta_eval=delta_eval,
        r_hat=r_hat,
        b_hat=b_hat,
        b_hat_sharper=b_hat_sharper,
        metadata=metadata,
    )


def report_to_csv(report: ProxyReport) -> str:
    header = ["t", "V_hat", "V_mode", "Gamma_hat", "C_hat", "tr_sigma_t", "tr_sigma_1t", "eta"]
    lines = [",".join(header)]
    for rec in report.records:
        lines.append(
            ",".join(
                _io.csv_field(v)
                for v in (
                    rec.t,
                    rec.v_hat,
                    rec.v_mode,
                    rec.gamma_hat,
                    rec.c_hat,
                    rec.trace_sigma_t,
                    rec.trace_sigma_1t,
                    rec.eta,
                )
            )
        )
    return "\r\n".join(lines) + "\r\n"


def report_to_summary(report: ProxyReport) -> dict:
    return {
        "delta_train": report.delta_train,
        "delta_eval": report.delta_eval,
        "R_hat": report.r_hat,
        "B_hat": report.b_hat,
        "B_hat_sharper": report.b_hat_sharper,
        "checkpoints": [rec.t for rec in report.records],
        "per_step": [
            {
                "t": rec.t,
                "V_hat": rec.v_hat,
                "V_mode": rec.v_mode,
                "Gamma_hat": rec.gamma_hat,
                "Gamma_mode": rec.gamma_mode,
                "C_hat": rec.c_hat,
                "tr_sigma_t": rec.trace_sigma_t,
                "tr_sigma_1t": rec.trace_sigma_1t,
                "eta": rec.eta,
            }
            for rec in report.records
        ],
        "metadata": report.metadata,
    }
