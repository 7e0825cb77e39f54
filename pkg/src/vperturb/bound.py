"""Generalization-bound assembly and curvature/smoothness penalty controls.

Combines per-step deviation, sensitivity, and covariance-comparison terms into
the square-root bound expressions (general, synchronized, and comparable
variants), and provides second-order controls on the output-sensitivity
penalty: exact trace-against-Hessian leading terms, Hessian-Lipschitz
remainders, and the global smoothness fallback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AdmissibilityError, InputError, RunError
from .gauss import Covariance, third_moment_bound

__all__ = [
    "BoundInputs",
    "BoundReport",
    "general_bound",
    "synchronized_bound",
    "comparable_bound",
    "smoothness_penalty",
    "curvature_expansion",
    "curvature_mismatch_penalty",
    "r_from_loss_range",
    "inputs_from_summary",
    "report_to_json",
]


@dataclass(frozen=True)
class BoundInputs:
    """Everything needed to assemble a bound value.

    ``ev``/``egamma``/``c`` are per-step expectations (or their
    single-trajectory proxy estimates; ``estimator`` records which).
    """

    r: float
    n: int
    etas: tuple[float, ...]
    ev: tuple[float, ...]
    egamma: tuple[float, ...]
    c: tuple[float, ...]
    r_delta: float = 0.0
    kappa: float | None = None
    mu: float | None = None
    rho_s: float | None = None
    rho_s_prime: float | None = None
    trace_sigma_final: float | None = None
    estimator: str = "single_trajectory"

    def __post_init__(self):
        if self.r < 0:
            raise InputError("sub-Gaussian constant R must be nonnegative")
        if self.n < 1:
            raise InputError("training size n must be >= 1")
        for name in ("etas", "ev", "egamma", "c"):
            vals = tuple(float(v) for v in getattr(self, name))
            if any(v < 0 for v in vals):
                raise InputError(f"{name} entries must be nonnegative")
            object.__setattr__(self, name, vals)
        lengths = {len(self.etas), len(self.ev), len(self.egamma), len(self.c)}
        if len(lengths) != 1:
            raise InputError("per-step term lists must have equal length")
        if self.r_delta < 0:
            raise InputError("R_delta must be nonnegative")


@dataclass(frozen=True)
class BoundReport:
    info_term: float
    cov_term_sum: float
    sqrt_term: float
    penalty: float
    total: float
    variant: str
    penalty_control: str = "raw"
    estimator: str = "single_trajectory"


def _assemble(inputs: BoundInputs, info_term: float, cov_sum: float, variant: str) -> BoundReport:
    inside = (2.0 * inputs.r**2 / inputs.n) * (info_term + cov_sum)
    sqrt_term = math.sqrt(inside)
    return BoundReport(
        info_term=info_term,
        cov_term_sum=cov_sum,
        sqrt_term=sqrt_term,
        penalty=inputs.r_delta,
        total=sqrt_term + inputs.r_delta,
        variant=variant,
        estimator=inputs.estimator,
    )


def general_bound(inputs: BoundInputs) -> BoundReport:
    """sqrt((2R^2/n) * sum_t [2 eta_t^2 (EV_t + EGamma_t) + C_t]) + R_delta."""
    info = sum(2.0 * e**2 * (v + g) for e, v, g in zip(inputs.etas, inputs.ev, inputs.egamma))
    return _assemble(inputs, info, sum(inputs.c), "general")


def synchronized_bound(inputs: BoundInputs) -> BoundReport:
    """Zero-cost variant; only valid when every comparison cost vanishes."""
    if any(ci != 0.0 for ci in inputs.c):
        raise AdmissibilityError("synchronized bound requires all comparison costs to be zero")
    info = sum(2.0 * e**2 * (v + g) for e, v, g in zip(inputs.etas, inputs.ev, inputs.egamma))
    report = _assemble(inputs, info, 0.0, "synchronized")
    return report


def comparable_bound(inputs: BoundInputs) -> BoundReport:
    """sqrt((2R^2/n) * [2 kappa * sum eta^2 (EV+EGamma) + sum C]) + R_delta.

    ``ev``/``egamma`` here are the synchronized-geometry terms; kappa prices
    the switch to the reference geometry.
    """
    if inputs.kappa is None:
        raise InputError("comparable bound requires kappa")
    if inputs.kappa < 1.0:
        raise InputError("kappa must be >= 1")
    info = inputs.kappa * sum(
        2.0 * e**2 * (v + g) for e, v, g in zip(inputs.etas, inputs.ev, inputs.egamma)
    )
    return _assemble(inputs, info, sum(inputs.c), "comparable")


def smoothness_penalty(mu: float, expected_trace_final: float) -> float:
    """Global penalty control mu * E[Tr(accumulated covariance)]."""
    if mu < 0 or expected_trace_final < 0:
        raise InputError("smoothness penalty inputs must be nonnegative")
    return float(mu) * float(expected_trace_final)


def _trace_against_hessian(hessian_apply, sigma: Covariance) -> float:
    """Tr(H * Sigma) by exact column enumeration (d HVP calls)."""
    dense = sigma.dense()
    d = dense.shape[0]
    total = 0.0
    for j in range(d):
        try:
            col = np.asarray(hessian_apply(dense[:, j]), dtype=float)
        except Exception as exc:  # noqa: BLE001 - HVP handles are user-supplied
            raise RunError(f"Hessian-vector product failed: {exc}") from exc
        if col.shape != (d,) or not np.all(np.isfinite(col)):
            raise RunError("Hessian-vector product returned an invalid vector")
        total += col[j]
    return float(total)


def curvature_expansion(hessian_apply, sigma_final: Covariance, rho: float):
    """Leading term and remainder of the second-order sensitivity expansion.

    Returns ``(leading, remainder_bound)`` with leading = -1/2 Tr(H Sigma)
    and remainder_bound = (sqrt(3) rho / 6) Tr(Sigma)^{3/2}.
    """
    if rho < 0:
        raise InputError("rho must be nonnegative")
    if sigma_final.is_zero:
        return 0.0, 0.0
    leading = -0.5 * _trace_against_hessian(hessian_apply, sigma_final)
    remainder = (rho / 6.0) * third_moment_bound(sigma_final)
    return leading, remainder


def curvature_mismatch_penalty(
    h_train_apply, h_eval_apply, sigma_final: Covariance, rho_train: float, rho_eval: float
) -> float:
    """1/2 |Tr((H_eval - H_train) Sigma)| plus both Hessian-Lipschitz tails."""
    if rho_train < 0 or rho_eval < 0:
        raise InputError("rho constants must be nonnegative")
    if sigma_final.is_zero:
        return 0.0
    tr_train = _trace_against_hessian(h_train_apply, sigma_final)
    tr_eval = _trace_against_hessian(h_eval_apply, sigma_final)
    tail = ((rho_train + rho_eval) / 6.0) * third_moment_bound(sigma_final)
    return 0.5 * abs(tr_eval - tr_train) + tail


def r_from_loss_range(loss_min: float, loss_max: float) -> float:
    """Valid sub-Gaussian constant for a loss bounded in [loss_min, loss_max]."""
    if loss_max < loss_min:
        raise InputError("loss_max must be >= loss_min")
    return 0.5 * (float(loss_max) - float(loss_min))


def inputs_from_summary(summary: dict, r: float, n: int, **extra) -> BoundInputs:
    """Build bound inputs from a diagnostic summary (proxy estimates)."""
    rows = summary["per_step"]
    return BoundInputs(
        r=r,
        n=n,
        etas=tuple(row["eta"] for row in rows),
        ev=tuple(row["V_hat"] for row in rows),
        egamma=tuple(row["Gamma_hat"] if row["Gamma_hat"] is not None else 0.0 for row in rows),
        c=tuple(row["C_hat"] for row in rows),
        r_delta=summary["R_hat"],
        **extra,
    )


def report_to_json(report: BoundReport) -> dict:
    return {
        "variant": report.variant,
        "info_term": report.info_term,
        "cov_term_sum": report.cov_term_sum,
        "sqrt_term": report.sqrt_term,
        "penalty": report.penalty,
        "total": report.total,
        "penalty_control": report.penalty_control,
        "estimator": report.estimator,
    }
