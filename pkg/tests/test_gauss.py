import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vperturb import gauss
from vperturb.errors import DomainError, InputError
from vperturb.gauss import Dense, Diagonal, GaussianMoments, Isotropic, LowRankRidge


def random_cov(rng, d, kind):
    if kind == "iso":
        return Isotropic(rng.uniform(0.1, 2.0), d)
    if kind == "diag":
        return Diagonal(rng.uniform(0.1, 2.0, size=d))
    if kind == "dense":
        m = rng.standard_normal((d, d))
        return Dense(m @ m.T / d + 0.2 * np.eye(d))
    r = min(2, d)
    u = rng.standard_normal((d, r))
    u, _ = np.linalg.qr(u)
    return LowRankRidge(0.3, u, rng.uniform(0.1, 1.0, size=r))


ALL_KINDS = ("iso", "diag", "dense", "lowrank")


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_representation_consistency(kind):
    rng = np.random.default_rng(3)
    cov = random_cov(rng, 4, kind)
    dense = cov.dense()
    assert np.allclose(np.trace(dense), cov.trace())
    sign, logdet = np.linalg.slogdet(dense)
    assert sign > 0
    assert np.isclose(logdet, cov.logdet(), atol=1e-10)
    x = rng.standard_normal(4)
    assert np.allclose(dense @ cov.solve(x), x, atol=1e-9)
    assert np.allclose(cov.matvec(x), dense @ x)
    eigmin = np.linalg.eigvalsh(dense)[0]
    assert cov.min_eig_lower_bound() <= eigmin + 1e-12


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_sampling_matches_covariance(kind):
    rng = np.random.default_rng(11)
    cov = random_cov(rng, 3, kind)
    draws = cov.sample(60_000, np.random.default_rng(0))
    emp = draws.T @ draws / len(draws)
    assert np.allclose(emp, cov.dense(), atol=0.05)


def test_zero_sentinel():
    z = gauss.zero(3)
    assert z.is_zero
    assert z.trace() == 0.0
    assert np.all(z.sample(5, np.random.default_rng(0)) == 0.0)
    with pytest.raises(DomainError):
        z.solve(np.ones(3))
    with pytest.raises(DomainError):
        z.logdet()


def test_add_promotions():
    a = Isotropic(0.5, 3)
    b = Isotropic(0.25, 3)
    s = gauss.add(a, b)
    assert isinstance(s, Isotropic) and s.sigma_sq == 0.75
    # zero sentinel passes the other operand through untouched
    assert gauss.add(gauss.zero(3), a) is a
    d = Diagonal(np.array([1.0, 2.0, 3.0]))
    s = gauss.add(a, d)
    assert isinstance(s, Diagonal)
    assert np.allclose(s.entries, [1.5, 2.5, 3.5])
    rng = np.random.default_rng(1)
    lr = random_cov(rng, 3, "lowrank")
    s = gauss.add(lr, a)
    assert isinstance(s, LowRankRidge) and np.isclose(s.lambda0, lr.lambda0 + 0.5)
    s2 = gauss.add(lr, lr)
    assert isinstance(s2, LowRankRidge) and s2.rank == 4
    assert np.allclose(s2.dense(), 2 * lr.dense())
    dn = random_cov(rng, 3, "dense")
    s3 = gauss.add(dn, d)
    assert isinstance(s3, Dense)
    assert np.allclose(s3.dense(), dn.dense() + d.dense())


def test_covs_equal_is_bitwise():
    a = Diagonal(np.array([1.0, 2.0]))
    b = Diagonal(np.array([1.0, 2.0]))
    c = Diagonal(np.array([1.0, 2.0 + 1e-16]))
    assert gauss.covs_equal(a, b)
    assert gauss.covs_equal(a, c)  # 2.0 + 1e-16 rounds to 2.0 exactly
    assert not gauss.covs_equal(a, Diagonal(np.array([1.0, 2.5])))
    assert not gauss.covs_equal(a, Isotropic(1.0, 2))


def test_kl_closed_forms():
    # equal distributions
    p = GaussianMoments(np.zeros(2), Isotropic(1.0, 2))
    assert gauss.gaussian_kl(p, p) == pytest.approx(0.0, abs=1e-12)
    # pure mean shift in unit covariance: half squared distance
    q = GaussianMoments(np.array([1.0, 0.0]), Isotropic(1.0, 2))
    assert gauss.gaussian_kl(q, p) == pytest.approx(0.5, abs=1e-12)
    # 1-D variance mismatch
    p1 = GaussianMoments(np.zeros(1), Isotropic(1.0, 1))
    q1 = GaussianMoments(np.zeros(1), Isotropic(2.0, 1))
    assert gauss.gaussian_kl(p1, q1) == pytest.approx(0.5 * (0.5 - 1 + np.log(2)), abs=1e-12)


@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=4))
@settings(max_examples=40, deadline=None)
def test_kl_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    p = GaussianMoments(rng.standard_normal(d), random_cov(rng, d, rng.choice(ALL_KINDS)))
    q = GaussianMoments(rng.standard_normal(d), random_cov(rng, d, rng.choice(ALL_KINDS)))
    assert gauss.gaussian_kl(p, q) >= -1e-9


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_cov_compare_cost_nonnegative_and_mean_free(seed):
    rng = np.random.default_rng(seed)
    d = 3
    a = random_cov(rng, d, rng.choice(ALL_KINDS))
    b = random_cov(rng, d, rng.choice(ALL_KINDS))
    cost = gauss.cov_compare_cost(a, b)
    assert cost >= -1e-10
    mu = rng.standard_normal(d)
    kl = gauss.gaussian_kl(GaussianMoments(mu, a), GaussianMoments(mu, b))
    assert kl == pytest.approx(cost, rel=1e-9, abs=1e-12)


def test_comparability_kappa():
    a = Diagonal(np.array([1.0, 4.0]))
    b = Diagonal(np.array([2.0, 2.0]))
    assert gauss.comparability_kappa(a, b) == pytest.approx(2.0, abs=1e-12)
    assert gauss.comparability_kappa(a, a) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(5)
    s = random_cov(rng, 3, "dense")
    r = random_cov(rng, 3, "dense")
    kappa = gauss.comparability_kappa(s, r)
    # kappa is the smallest constant with Sigma <= kappa * Sigma_ref
    gap = np.linalg.eigvalsh(kappa * r.dense() - s.dense())[0]
    assert gap >= -1e-9


def test_third_moment_bound_value():
    assert gauss.third_moment_bound(Isotropic(1.0, 1)) == pytest.approx(np.sqrt(3), abs=1e-12)
    c = Diagonal(np.array([0.5, 1.5]))
    assert gauss.third_moment_bound(c) == pytest.approx(np.sqrt(3) * 2.0**1.5, abs=1e-12)


def test_input_validation():
    with pytest.raises(DomainError):
        Isotropic(-1.0, 2)
    with pytest.raises(DomainError):
        Diagonal(np.array([1.0, -0.5]))
    with pytest.raises(DomainError):
        Dense(np.array([[1.0, 2.0], [0.0, 1.0]]))  # asymmetric
    with pytest.raises(DomainError):
        Dense(np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    with pytest.raises(InputError):
        gauss.add(Isotropic(1.0, 2), Isotropic(1.0, 3))


def test_mahalanobis_matches_dense():
    rng = np.random.default_rng(9)
    for kind in ALL_KINDS:
        cov = random_cov(rng, 4, kind)
        x = rng.standard_normal(4)
        expected = x @ np.linalg.solve(cov.dense(), x)
        assert gauss.mahalanobis_sq(x, cov) == pytest.approx(expected, rel=1e-9)
