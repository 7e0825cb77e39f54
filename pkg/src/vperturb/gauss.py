"""Structured covariance algebra and Gaussian divergences.

Four positive-definite covariance representations (isotropic, diagonal, dense,
low-rank + ridge) with exact trace / log-determinant / solve / sampling per
representation, plus the Gaussian KL divergence, the covariance-comparison
cost, a third-moment trace bound, and the precision-comparability constant.

The degenerate ``Isotropic(0)`` value is permitted as an accumulation sentinel
(the zero accumulated covariance at step 1); inverse-based operations reject
it with :class:`DomainError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError

__all__ = [
    "Covariance",
    "Isotropic",
    "Diagonal",
    "Dense",
    "LowRankRidge",
    "GaussianMoments",
    "zero",
    "add",
    "scale",
    "mahalanobis_sq",
    "gaussian_kl",
    "cov_compare_cost",
    "third_moment_bound",
    "comparability_kappa",
]

_DENSE_PIVOT_TOL = 1e-12


class Covariance:
    """Common interface of the structured covariance variants."""

    dim: int

    # -- representation-specific primitives -------------------------------

    def trace(self) -> float:
        raise NotImplementedError

    def logdet(self) -> float:
        raise NotImplementedError

    def solve(self, x: np.ndarray) -> np.ndarray:
        """Return Sigma^{-1} x."""
        raise NotImplementedError

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Return Sigma x."""
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        """Materialize the full matrix."""
        raise NotImplementedError

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``count`` i.i.d. rows from N(0, Sigma)."""
        raise NotImplementedError

    def scale(self, c: float) -> "Covariance":
        raise NotImplementedError

    def min_eig_lower_bound(self) -> float:
        """A cheap per-representation lower bound on the minimum eigenvalue."""
        raise NotImplementedError

    # -- shared helpers ---------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return isinstance(self, Isotropic) and self.sigma_sq == 0.0

    def _check_vector(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise InputError(f"expected vector of length {self.dim}, got shape {x.shape}")
        return x

    def _check_invertible(self) -> None:
        if self.is_zero:
            raise DomainError("degenerate zero covariance has no inverse")


def _as_positive_scalar(name: str, v: float) -> float:
    v = float(v)
    if not np.isfinite(v) or v < 0:
        raise DomainError(f"{name} must be a finite nonnegative scalar, got {v}")
    return v


@dataclass(frozen=True, eq=False)
class Isotropic(Covariance):
    """sigma_sq * I.  ``sigma_sq == 0`` is the accumulation sentinel."""

    sigma_sq: float
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "sigma_sq", _as_positive_scalar("sigma_sq", self.sigma_sq))
        if self.dim < 1:
            raise InputError("dim must be >= 1")

    def trace(self) -> float:
        return self.sigma_sq * self.dim

    def logdet(self) -> float:
        self._check_invertible()
        return self.dim * np.log(self.sigma_sq)

    def solve(self, x):
        self._check_invertible()
        return self._check_vector(x) / self.sigma_sq

    def matvec(self, x):
        return self._check_vector(x) * self.sigma_sq

    def dense(self):
        return self.sigma_sq * np.eye(self.dim)

    def sample(self, count, rng):
        z = rng.standard_normal((count, self.dim))
        return z * np.sqrt(self.sigma_sq)

    def scale(self, c):
        return Isotropic(self.sigma_sq * _check_scale(c), self.dim)

    def min_eig_lower_bound(self):
        return self.sigma_sq


@dataclass(frozen=True, eq=False)
class Diagonal(Covariance):
    entries: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 1 or e.size < 1:
            raise InputError("entries must be a 1-D vector")
        if not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise DomainError("diagonal entries must be finite and > 0")
        e = e.copy()
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "dim", e.size)

    def trace(self):
        return float(np.sum(self.entries))

    def logdet(self):
        return float(np.sum(np.log(self.entries)))

    def solve(self, x):
        return self._check_vector(x) / self.entries

    def matvec(self, x):
        return self._check_vector(x) * self.entries

    def dense(self):
        return np.diag(self.entries)

    def sample(self, count, rng):
        z = rng.standard_normal((count, self.dim))
        return z * np.sqrt(self.entries)

    def scale(self, c):
        return Diagonal(self.entries * _check_scale(c))

    def min_eig_lower_bound(self):
        return float(np.min(self.entries))


@dataclass(frozen=True, eq=False)
class Dense(Covariance):
    matrix: np.ndarray
    dim: int = field(init=False)
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InputError("matrix must be square")
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(m).max())):
            raise DomainError("matrix is not symmetric")
        m = 0.5 * (m + m.T)
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise DomainError("matrix is not positive definite") from exc
        if np.min(np.diag(chol)) ** 2 <= _DENSE_PIVOT_TOL:
            raise DomainError("matrix fails the positive-definite pivot tolerance")
        m = m.copy()
        m.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "dim", m.shape[0])
        object.__setattr__(self, "_chol", chol)

    def trace(self):
        return float(np.trace(self.matrix))

    def logdet(self):
        return float(2.0 * np.sum(np.log(np.diag(self._chol))))

    def solve(self, x):
        x = self._check_vector(x)
        y = np.linalg.solve(self._chol, x)
        return np.linalg.solve(self._chol.T, y)

    def matvec(self, x):
        return self.matrix @ self._check_vector(x)

    def dense(self):
        return np.array(self.matrix)

    def sample(self, count, rng):
        z = rng.standard_normal((count, self.dim))
        return z @ self._chol.T

    def scale(self, c):
        return Dense(self.matrix * _check_scale(c))

    def min_eig_lower_bound(self):
        return float(np.linalg.eigvalsh(self.matrix)[0])


@dataclass(frozen=True, eq=False)
class LowRankRidge(Covariance):
    """lambda0 * I + U diag(weights) U^T with U of shape (dim, rank)."""

    lambda0: float
    factors: np.ndarray
    weights: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        lam = float(self.lambda0)
        if not np.isfinite(lam) or lam <= 0:
            raise DomainError("lambda0 must be > 0")
        u = np.asarray(self.factors, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if u.ndim != 2:
            raise InputError("factors must be a (dim, rank) matrix")
        if w.shape != (u.shape[1],):
            raise InputError("weights length must match factor rank")
        if w.size and (not np.all(np.isfinite(w)) or np.any(w <= 0)):
            raise DomainError("weights must be finite and > 0")
        u = u.copy()
        w = w.copy()
        u.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "lambda0", lam)
        object.__setattr__(self, "factors", u)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "dim", u.shape[0])

    @property
    def rank(self) -> int:
        return self.factors.shape[1]

    def trace(self):
        return float(self.lambda0 * self.dim + np.sum(self.weights * np.sum(self.factors**2, axis=0)))

    def logdet(self):
        # matrix-determinant lemma: det = lambda0^d det(I_r + D U^T U / lambda0)
        if self.rank == 0:
            return self.dim * np.log(self.lambda0)
        core = np.eye(self.rank) + (self.weights[:, None] * (self.factors.T @ self.factors)) / self.lambda0
        sign, ld = np.linalg.slogdet(core)
        if sign <= 0:
            raise DomainError("low-rank core is not positive definite")
        return float(self.dim * np.log(self.lambda0) + ld)

    def solve(self, x):
        # Woodbury: Sigma^{-1} = I/l - U (diag(1/w) + U^T U / l)^{-1} U^T / l^2
        x = self._check_vector(x)
        lam = self.lambda0
        if self.rank == 0:
            return x / lam
        u = self.factors
        core = np.diag(1.0 / self.weights) + (u.T @ u) / lam
        y = np.linalg.solve(core, u.T @ x)
        return x / lam - (u @ y) / (lam * lam)

    def matvec(self, x):
        x = self._check_vector(x)
        out = self.lambda0 * x
        if self.rank:
            out = out + self.factors @ (self.weights * (self.factors.T @ x))
        return out

    def dense(self):
        m = self.lambda0 * np.eye(self.dim)
        if self.rank:
            m = m + (self.factors * self.weights) @ self.factors.T
        return m

    def sample(self, count, rng):
        # isotropic component plus independent factor component
        z0 = rng.standard_normal((count, self.dim)) * np.sqrt(self.lambda0)
        if self.rank == 0:
            return z0
        z1 = rng.standard_normal((count, self.rank))
        return z0 + (z1 * np.sqrt(self.weights)) @ self.factors.T

    def scale(self, c):
        c = _check_scale(c)
        return LowRankRidge(self.lambda0 * c, self.factors, self.weights * c)

    def min_eig_lower_bound(self):
        return self.lambda0


def _check_scale(c: float) -> float:
    c = float(c)
    if not np.isfinite(c) or c <= 0:
        raise InputError(f"scale factor must be > 0, got {c}")
    return c


def zero(dim: int) -> Isotropic:
    """The zero accumulated-covariance sentinel."""
    return Isotropic(0.0, dim)


def covs_equal(a: Covariance, b: Covariance) -> bool:
    """Exact (bitwise) equality of two covariance values."""
    if type(a) is not type(b) or a.dim != b.dim:
        return False
    if isinstance(a, Isotropic):
        return a.sigma_sq == b.sigma_sq
    if isinstance(a, Diagonal):
        return np.array_equal(a.entries, b.entries)
    if isinstance(a, Dense):
        return np.array_equal(a.matrix, b.matrix)
    return (
        a.lambda0 == b.lambda0
        and np.array_equal(a.factors, b.factors)
        and np.array_equal(a.weights, b.weights)
    )


# ---------------------------------------------------------------------------
# algebra


def _check_same_dim(a: Covariance, b: Covariance) -> None:
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")


def add(a: Covariance, b: Covariance) -> Covariance:
    """Sum of two covariances with representation promotion.

    Promotion keeps the cheapest exact representation closed under
    accumulation: iso+iso stays isotropic, diagonal absorbs isotropic,
    low-rank absorbs isotropic into the ridge and concatenates factor blocks,
    anything involving a dense operand materializes.
    """
    _check_same_dim(a, b)
    if a.is_zero:
        return b
    if b.is_zero:
        return a
    if isinstance(a, Dense) or isinstance(b, Dense):
        return Dense(a.dense() + b.dense())
    if isinstance(a, Isotropic) and isinstance(b, Isotropic):
        return Isotropic(a.sigma_sq + b.sigma_sq, a.dim)
    if isinstance(a, LowRankRidge) or isinstance(b, LowRankRidge):
        if isinstance(b, LowRankRidge) and not isinstance(a, LowRankRidge):
            a, b = b, a
        assert isinstance(a, LowRankRidge)
        if isinstance(b, Isotropic):
            return LowRankRidge(a.lambda0 + b.sigma_sq, a.factors, a.weights)
        if isinstance(b, LowRankRidge):
            return LowRankRidge(
                a.lambda0 + b.lambda0,
                np.concatenate([a.factors, b.factors], axis=1),
                np.concatenate([a.weights, b.weights]),
            )
        # low-rank + diagonal has no structured closed form
        return Dense(a.dense() + b.dense())
    # remaining: diagonal with isotropic or diagonal
    da = a.entries if isinstance(a, Diagonal) else np.full(a.dim, a.sigma_sq)
    db = b.entries if isinstance(b, Diagonal) else np.full(b.dim, b.sigma_sq)
    return Diagonal(da + db)


def scale(cov: Covariance, c: float) -> Covariance:
    return cov.scale(c)


def mahalanobis_sq(x: np.ndarray, cov: Covariance) -> float:
    """x^T Sigma^{-1} x (Woodbury path for the low-rank representation)."""
    x = np.asarray(x, dtype=float)
    return float(x @ cov.solve(x))


def _trace_of_solve(q: Covariance, p: Covariance) -> float:
    """Tr(Sigma_q^{-1} Sigma_p) with fast paths for scaled structures."""
    _check_same_dim(q, p)
    if isinstance(q, Isotropic):
        q._check_invertible()
        return p.trace() / q.sigma_sq
    if isinstance(q, Diagonal):
        if isinstance(p, Isotropic):
            return float(p.sigma_sq * np.sum(1.0 / q.entries))
        if isinstance(p, Diagonal):
            return float(np.sum(p.entries / q.entries))
        return float(np.sum(np.diag(p.dense()) / q.entries))
    # dense or low-rank reference: column-wise solves
    pm = p.dense()
    return float(sum(q.solve(pm[:, j])[j] for j in range(q.dim)))


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: Covariance

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        if m.shape != (self.cov.dim,):
            raise InputError("mean length must equal cov.dim")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mean", m)


def gaussian_kl(p: GaussianMoments, q: GaussianMoments) -> float:
    """KL(N(mu_p, Sigma_p) || N(mu_q, Sigma_q)).

    0.5 * [ ||mu_p - mu_q||^2_{Sigma_q^{-1}} + Tr(Sigma_q^{-1} Sigma_p) - d
            + log det Sigma_q - log det Sigma_p ]
    """
    _check_same_dim(p.cov, q.cov)
    q.cov._check_invertible()
    p.cov._check_invertible()
    d = p.cov.dim
    quad = mahalanobis_sq(p.mean - q.mean, q.cov)
    return 0.5 * (quad + _trace_of_solve(q.cov, p.cov) - d + q.cov.logdet() - p.cov.logdet())


def cov_compare_cost(actual: Covariance, reference: Covariance) -> float:
    """Gaussian covariance KL cost of comparing actual against reference.

    0.5 * [ Tr(Sigma_ref^{-1} Sigma) - d + log det Sigma_ref - log det Sigma ];
    equals ``gaussian_kl`` with equal means.
    """
    _check_same_dim(actual, reference)
    reference._check_invertible()
    actual._check_invertible()
    d = actual.dim
    return 0.5 * (_trace_of_solve(reference, actual) - d + reference.logdet() - actual.logdet())


def third_moment_bound(cov: Covariance) -> float:
    """Upper bound sqrt(3) * Tr(Sigma)^{3/2} on E ||zeta||^3, zeta ~ N(0, Sigma)."""
    return float(np.sqrt(3.0) * cov.trace() ** 1.5)


def comparability_kappa(sigma: Covariance, sigma_ref: Covariance) -> float:
    """Smallest kappa with Sigma_ref^{-1} <= kappa Sigma^{-1}.

    This is the largest generalized eigenvalue of (Sigma, Sigma_ref); cheap
    coordinate ratios are used for isotropic/diagonal pairs.
    """
    _check_same_dim(sigma, sigma_ref)
    sigma._check_invertible()
    sigma_ref._check_invertible()
    if isinstance(sigma, Isotropic) and isinstance(sigma_ref, Isotropic):
        return sigma.sigma_sq / sigma_ref.sigma_sq
    if isinstance(sigma, (Isotropic, Diagonal)) and isinstance(sigma_ref, (Isotropic, Diagonal)):
        s = sigma.entries if isinstance(sigma, Diagonal) else np.full(sigma.dim, sigma.sigma_sq)
        r = (
            sigma_ref.entries
            if isinstance(sigma_ref, Diagonal)
            else np.full(sigma_ref.dim, sigma_ref.sigma_sq)
        )
        return float(np.max(s / r))
    from scipy.linalg import eigh

    vals = eigh(sigma.dense(), sigma_ref.dense(), eigvals_only=True)
    return float(np.max(vals))
