"""Brute-force numerical oracles for the Gaussian-smoothing machinery.

Everything here is deliberately independent of the closed forms it certifies:
KL divergences come from trapezoidal grid integration, mutual information
from mixture-entropy integrals, moments from textbook Gaussian identities,
and the predictability check from structural recomputation on corrupted data.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import gauss, schedule
from .errors import DomainError, InputError
from .gauss import Covariance, Isotropic
from .schedule import ScheduleSpec
from .train import Trajectory

__all__ = [
    "Grid1D",
    "Grid2D",
    "ToyChainSpec",
    "auto_grid",
    "kl_numeric",
    "kl_numeric_2d",
    "mixture_smoothing_check",
    "mismatch_lemma_check",
    "toy_chain_mi",
    "accumulated_cov_check",
    "third_moment_oracle_1d",
    "quadratic_delta_oracle",
    "predictability_sentinel",
]

_COVERAGE_STD = 8.0


@dataclass(frozen=True)
class Grid1D:
    lower: float
    upper: float
    points: int = 4001

    def __post_init__(self):
        if self.upper <= self.lower or self.points < 3:
            raise InputError("grid needs upper > lower and >= 3 points")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.points)

    @property
    def weights(self) -> np.ndarray:
        h = (self.upper - self.lower) / (self.points - 1)
        w = np.full(self.points, h)
        w[0] = w[-1] = h / 2.0
        return w

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))


@dataclass(frozen=True)
class Grid2D:
    lower: tuple[float, float]
    upper: tuple[float, float]
    points: int = 801

    def axes(self):
        return (
            np.linspace(self.lower[0], self.upper[0], self.points),
            np.linspace(self.lower[1], self.upper[1], self.points),
        )

    def mesh(self):
        x, y = self.axes()
        return np.meshgrid(x, y, indexing="ij")

    def integrate(self, values: np.ndarray) -> float:
        x, y = self.axes()
        return float(np.trapezoid(np.trapezoid(values, y, axis=1), x))


def auto_grid(means, stds, points: int = 4001, pad_std: float = 10.0) -> Grid1D:
    """1-D grid covering every listed Gaussian component out to pad_std sigmas."""
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    if np.any(stds <= 0):
        raise InputError("stds must be positive")
    lo = float(np.min(means - pad_std * stds))
    hi = float(np.max(means + pad_std * stds))
    return Grid1D(lo, hi, points)


def _check_coverage(grid: Grid1D, means, stds) -> None:
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    if grid.lower > np.min(means - _COVERAGE_STD * stds) or grid.upper < np.max(
        means + _COVERAGE_STD * stds
    ):
        raise DomainError("grid does not cover 8 standard deviations of every component")


def _gauss_pdf(xs: np.ndarray, mean: float, var: float) -> np.ndarray:
    return np.exp(-0.5 * (xs - mean) ** 2 / var) / math.sqrt(2.0 * math.pi * var)


def _mixture_pdf(xs: np.ndarray, means, var: float, weights) -> np.ndarray:
    out = np.zeros_like(xs)
    for m, w in zip(means, weights):
        out += w * _gauss_pdf(xs, m, var)
    return out


def kl_numeric(p_density, q_density, grid: Grid1D) -> float:
    """Trapezoidal integral of p log(p/q) over the grid."""
    xs = grid.xs
    p = np.asarray(p_density(xs), dtype=float)
    q = np.asarray(q_density(xs), dtype=float)
    if np.any((p > 1e-300) & (q <= 0.0)):
        raise DomainError("q vanishes where p has mass")
    mass = grid.integrate(p)
    if abs(mass - 1.0) > 1e-6:
        raise DomainError(f"p integrates to {mass}, grid coverage insufficient")
    active = p > 1e-300
    integrand = np.zeros_like(p)
    integrand[active] = p[active] * np.log(p[active] / q[active])
    return grid.integrate(integrand)


def kl_numeric_2d(p_density, q_density, grid: Grid2D) -> float:
    x, y = grid.mesh()
    p = np.asarray(p_density(x, y), dtype=float)
    q = np.asarray(q_density(x, y), dtype=float)
    if np.any((p > 1e-300) & (q <= 0.0)):
        raise DomainError("q vanishes where p has mass")
    mass = grid.integrate(p)
    if abs(mass - 1.0) > 1e-6:
        raise DomainError(f"p integrates to {mass}, grid coverage insufficient")
    active = p > 1e-300
    integrand = np.zeros_like(p)
    integrand[active] = p[active] * np.log(p[active] / q[active])
    return grid.integrate(integrand)


def mixture_smoothing_check(atoms_x, atoms_y, coupling, sigma: float, grid: Grid1D | None = None):
    """Smoothed-mixture KL versus the coupling-cost bound.

    Returns ``(lhs, rhs)`` with lhs = KL of the two sigma-smoothed atom
    mixtures and rhs = E||X - Y||^2 / (2 sigma^2) under the coupling.
    """
    atoms_x = np.asarray(atoms_x, dtype=float)
    atoms_y = np.asarray(atoms_y, dtype=float)
    coupling = np.asarray(coupling, dtype=float)
    if sigma <= 0:
        raise InputError("sigma must be positive")
    if len(atoms_x) > 4 or len(atoms_y) > 4:
        raise InputError("at most 4 atoms per marginal")
    if coupling.shape != (len(atoms_x), len(atoms_y)) or np.any(coupling < 0):
        raise InputError("coupling must be a nonnegative matrix over atom pairs")
    if abs(coupling.sum() - 1.0) > 1e-12:
        raise InputError("coupling must sum to 1")
    px = coupling.sum(axis=1)
    py = coupling.sum(axis=0)
    all_atoms = np.concatenate([atoms_x, atoms_y])
    if grid is None:
        grid = auto_grid(all_atoms, np.full(all_atoms.shape, sigma))
    _check_coverage(grid, all_atoms, np.full(all_atoms.shape, sigma))
    var = sigma**2
    lhs = kl_numeric(
        lambda xs: _mixture_pdf(xs, atoms_x, var, px),
        lambda xs: _mixture_pdf(xs, atoms_y, var, py),
        grid,
    )
    rhs = float(np.sum(coupling * (atoms_x[:, None] - atoms_y[None, :]) ** 2)) / (2.0 * var)
    return lhs, rhs


def mismatch_lemma_check(
    atoms, probs, m: float, sigma: float, sigma_ref: float, grid: Grid1D | None = None
):
    """Mixture-vs-single-Gaussian KL against the mean-cost + covariance-cost bound.

    lhs = KL( sum_i p_i N(x_i, sigma^2) || N(m, sigma_ref^2) );
    rhs = E||X - m||^2 / (2 sigma_ref^2) + cov_compare_cost.
    """
    atoms = np.asarray(atoms, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if sigma <= 0 or sigma_ref <= 0:
        raise InputError("sigma values must be positive")
    if probs.shape != atoms.shape or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise InputError("probs must be a distribution over the atoms")
    all_means = np.concatenate([atoms, [m]])
    all_stds = np.concatenate([np.full(atoms.shape, sigma), [sigma_ref]])
    if grid is None:
        grid = auto_grid(all_means, all_stds)
    _check_coverage(grid, all_means, all_stds)
    lhs = kl_numeric(
        lambda xs: _mixture_pdf(xs, atoms, sigma**2, probs),
        lambda xs: _gauss_pdf(xs, m, sigma_ref**2),
        grid,
    )
    mean_cost = float(probs @ (atoms - m) ** 2) / (2.0 * sigma_ref**2)
    cov_cost = gauss.cov_compare_cost(Isotropic(sigma**2, 1), Isotropic(sigma_ref**2, 1))
    return lhs, mean_cost + cov_cost


@dataclass(frozen=True)
class ToyChainSpec:
    """Scalar chain W_{t+1} = a_t W_t + b_t s + c_t + N(0, sigma_t^2), s ~ Unif{-1,+1}.

    Affine drifts keep every conditional law Gaussian, so the exact mutual
    information between the final state and s is a two-component mixture
    integral. The reference drift is the s-average a_t w + c_t.
    """

    drifts: tuple[tuple[float, float, float], ...]
    sigmas: tuple[float, ...]
    w0: float = 0.0

    def __post_init__(self):
        if len(self.drifts) != len(self.sigmas) or not self.drifts:
            raise InputError("need one (a, b, c) drift per step")
        if any(s <= 0 for s in self.sigmas):
            raise InputError("noise sigmas must be positive")

    @classmethod
    def one_step(cls, eta: float, sigma: float) -> "ToyChainSpec":
        return cls(drifts=(((0.0, -eta, 0.0)),), sigmas=(sigma,))


def toy_chain_mi(spec: ToyChainSpec, grid: Grid1D | None = None):
    """Exact mutual information of the toy chain versus its chain bound.

    Returns ``(exact_mi, chain_bound)`` in nats. The chain bound sums, per
    step, the expected Gaussian KL between the actual kernel and the
    population-drift reference kernel: sum_t b_t^2 / (2 sigma_t^2).
    """
    mean_pos = mean_neg = spec.w0
    var = 0.0
    chain_bound = 0.0
    for (a, b, c), s in zip(spec.drifts, spec.sigmas):
        mean_pos = a * mean_pos + b * 1.0 + c
        mean_neg = a * mean_neg + b * (-1.0) + c
        var = a * a * var + s * s
        chain_bound += b * b / (2.0 * s * s)
    std = math.sqrt(var)
    means = np.array([mean_pos, mean_neg])
    if grid is None:
        grid = auto_grid(means, np.full(2, std))
    _check_coverage(grid, means, np.full(2, std))
    xs = grid.xs
    p_pos = _gauss_pdf(xs, mean_pos, var)
    p_neg = _gauss_pdf(xs, mean_neg, var)
    mix = 0.5 * p_pos + 0.5 * p_neg
    exact_mi = 0.0
    for p_s in (p_pos, p_neg):
        active = p_s > 1e-300
        integrand = np.zeros_like(p_s)
        integrand[active] = p_s[active] * np.log(p_s[active] / mix[active])
        exact_mi += 0.5 * grid.integrate(integrand)
    return exact_mi, chain_bound


def accumulated_cov_check(
    trajectory: Trajectory, spec: ScheduleSpec, t: int, replications: int, seed: int = 0
):
    """Empirical covariance of the accumulated virtual perturbation at step t.

    Holds the trajectory (hence the whole covariance sequence) fixed and
    redraws the noise sequence ``replications`` times. Returns
    ``(empirical_cov, target)`` where target is the accumulated covariance.
    """
    if replications < 100:
        raise InputError("need at least 100 replications")
    per_step, accumulated_before, _ = schedule.replay_schedule(trajectory, spec)
    if not 1 <= t <= len(per_step) + 1:
        raise InputError(f"step {t} out of range")
    target = accumulated_before[t - 1] if t <= len(accumulated_before) else None
    if target is None:
        state = gauss.zero(trajectory.dim)
        for cov in per_step:
            state = gauss.add(state, cov)
        target = state
    d = trajectory.dim
    if target.is_zero:
        return np.zeros((d, d)), target
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    xi = np.zeros((replications, d))
    for cov in per_step[: t - 1]:
        xi += cov.sample(replications, g)
    empirical = xi.T @ xi / replications
    return empirical, target


def third_moment_oracle_1d(sigma: float) -> float:
    """E|Z|^3 for Z ~ N(0, sigma^2): 2 sqrt(2/pi) sigma^3."""
    if sigma < 0:
        raise InputError("sigma must be nonnegative")
    return 2.0 * math.sqrt(2.0 / math.pi) * sigma**3


def quadratic_delta_oracle(a: np.ndarray, cov: Covariance) -> float:
    """Exact expected loss drop -1/2 Tr(A Sigma) for a quadratic loss."""
    a = np.asarray(a, dtype=float)
    return -0.5 * float(np.trace(a @ cov.dense()))


def _corrupt_after(trajectory: Trajectory, t: int) -> Trajectory:
    """Replace step t's sample-dependent fields (and all later steps) with garbage."""
    steps = list(trajectory.steps)
    d = trajectory.dim
    nan_vec = np.full(d, np.nan)
    rec = steps[t - 1]
    steps[t - 1] = dataclasses.replace(
        rec,
        g=nan_vec,
        g_sub=None,
        sub_sizes=None,
        batch=(),
        loss_train=0.0,
        loss_eval=0.0,
    )
    for k in range(t, len(steps)):
        steps[k] = dataclasses.replace(
            steps[k],
            w=nan_vec,
            g=nan_vec,
            g_sub=None,
            sub_sizes=None,
            batch=(),
            loss_train=0.0,
            loss_eval=0.0,
        )
    return Trajectory(meta=dict(trajectory.meta), steps=tuple(steps))


def predictability_sentinel(trajectory: Trajectory, spec: ScheduleSpec) -> bool:
    """True iff no step's covariance depends on that step's (or later) data.

    For every step t, corrupts the step-t sample-dependent records and all
    subsequent steps, re-derives the covariance sequence up to t, and demands
    a bitwise-identical emission at t.
    """
    per_step, _, _ = schedule.replay_schedule(trajectory, spec)
    for t in range(1, trajectory.horizon):
        corrupted = _corrupt_after(trajectory, t)
        state = schedule.init_state(spec)
        for k in range(1, t + 1):
            view = schedule.make_history_view(corrupted, k)
            cov = schedule.next_covariance(state, view)
            if k < t:
                schedule.advance(state, cov, g_prev=corrupted.steps[k - 1].g)
        if not gauss.covs_equal(cov, per_step[t - 1]):
            return False
    return True
