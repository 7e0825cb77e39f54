import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vperturb import bound, gauss, train
from vperturb.errors import AdmissibilityError, InputError, RunError
from vperturb.gauss import Isotropic


def make_inputs(**overrides):
    base = dict(
        r=1.0,
        n=50,
        etas=(0.1, 0.1, 0.05),
        ev=(2.0, 1.5, 1.0),
        egamma=(0.3, 0.2, 0.1),
        c=(0.0, 0.0, 0.0),
        r_delta=0.01,
    )
    base.update(overrides)
    return bound.BoundInputs(**base)


def test_general_bound_arithmetic():
    inputs = bound.BoundInputs(r=1.0, n=2, etas=(1.0,), ev=(1.0,), egamma=(0.0,), c=(0.0,))
    rep = bound.general_bound(inputs)
    assert rep.total == pytest.approx(math.sqrt(2.0))
    assert rep.sqrt_term + rep.penalty == rep.total
    zero = bound.general_bound(
        bound.BoundInputs(r=1.0, n=2, etas=(1.0,), ev=(0.0,), egamma=(0.0,), c=(0.0,), r_delta=0.3)
    )
    assert zero.total == 0.3


def test_synchronized_matches_general_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = rng.integers(1, 6)
        inputs = bound.BoundInputs(
            r=float(rng.uniform(0.1, 3)),
            n=int(rng.integers(1, 500)),
            etas=tuple(rng.uniform(0, 1, k)),
            ev=tuple(rng.uniform(0, 5, k)),
            egamma=tuple(rng.uniform(0, 5, k)),
            c=(0.0,) * k,
            r_delta=float(rng.uniform(0, 1)),
        )
        assert bound.general_bound(inputs).total == bound.synchronized_bound(inputs).total


def test_synchronized_arithmetic_and_admissibility():
    inputs = bound.BoundInputs(r=1.0, n=4, etas=(1.0,), ev=(1.0,), egamma=(0.0,), c=(0.0,))
    assert bound.synchronized_bound(inputs).total == pytest.approx(1.0)
    with pytest.raises(AdmissibilityError):
        bound.synchronized_bound(make_inputs(c=(0.0, 0.1, 0.0)))


def test_comparable_bound():
    inputs = make_inputs(kappa=1.0)
    assert bound.comparable_bound(inputs).total == bound.synchronized_bound(inputs).total
    doubled = bound.comparable_bound(make_inputs(kappa=2.0))
    base = bound.comparable_bound(inputs)
    # kappa doubles the deviation/sensitivity mass inside the root
    assert (doubled.total - doubled.penalty) ** 2 == pytest.approx(
        2 * (base.total - base.penalty) ** 2
    )
    with pytest.raises(InputError):
        bound.comparable_bound(make_inputs(kappa=0.5))
    with pytest.raises(InputError):
        bound.comparable_bound(make_inputs())  # kappa missing


@given(st.integers(min_value=0, max_value=5000))
@settings(max_examples=30, deadline=None)
def test_monotonicity(seed):
    rng = np.random.default_rng(seed)
    inputs = make_inputs()
    base = bound.general_bound(inputs).total
    j = int(rng.integers(0, 3))
    bump = float(rng.uniform(0.01, 1.0))
    for field in ("ev", "egamma", "c"):
        vals = list(getattr(inputs, field))
        vals[j] += bump
        assert bound.general_bound(make_inputs(**{field: tuple(vals)})).total >= base
    assert bound.general_bound(make_inputs(r=1.0 + bump)).total >= base
    assert bound.general_bound(make_inputs(r_delta=0.01 + bump)).total >= base


def test_input_validation():
    with pytest.raises(InputError):
        make_inputs(r=-1.0)
    with pytest.raises(InputError):
        make_inputs(n=0)
    with pytest.raises(InputError):
        make_inputs(ev=(1.0, -1.0, 0.0))
    with pytest.raises(InputError):
        make_inputs(etas=(0.1, 0.1))  # length mismatch


def test_smoothness_penalty():
    assert bound.smoothness_penalty(0.0, 5.0) == 0.0
    assert bound.smoothness_penalty(2.0, 0.04) == pytest.approx(0.08)
    with pytest.raises(InputError):
        bound.smoothness_penalty(-1.0, 1.0)


def test_curvature_expansion_constant_hessian():
    a = np.eye(3)
    leading, remainder = bound.curvature_expansion(lambda v: a @ v, Isotropic(1.0, 3), 0.0)
    assert leading == pytest.approx(-1.5)
    assert remainder == 0.0
    leading, remainder = bound.curvature_expansion(lambda v: a @ v, gauss.zero(3), 1.0)
    assert leading == 0.0 and remainder == 0.0
    _, remainder = bound.curvature_expansion(lambda v: a @ v, Isotropic(1.0, 3), 2.0)
    assert remainder == pytest.approx((math.sqrt(3) * 2 / 6) * 3**1.5)


def test_curvature_expansion_matches_dense_hessian_mlp():
    spec = {"kind": "mlp", "in_dim": 2, "hidden": 3}
    model = train.build_model(spec)
    dataset = train.build_dataset(spec, {"seed": 11, "n_train": 20})
    rng = np.random.default_rng(6)
    w = 0.4 * rng.standard_normal(model.dim)
    sigma = gauss.Diagonal(rng.uniform(0.1, 1.0, model.dim))
    leading, _ = bound.curvature_expansion(
        lambda v: model.hvp(w, v, dataset.train), sigma, 0.0
    )
    # finite-difference dense Hessian oracle
    d = model.dim
    eps = 1e-5
    h = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        h[:, j] = (model.grad(w + e, dataset.train) - model.grad(w - e, dataset.train)) / (2 * eps)
    expected = -0.5 * np.trace(h @ sigma.dense())
    assert leading == pytest.approx(expected, rel=1e-4)


def test_curvature_mismatch_penalty():
    a = np.eye(2)
    assert bound.curvature_mismatch_penalty(lambda v: a @ v, lambda v: a @ v,
                                            Isotropic(1.0, 2), 0.0, 0.0) == 0.0
    b = 2 * np.eye(2)
    val = bound.curvature_mismatch_penalty(lambda v: a @ v, lambda v: b @ v,
                                           Isotropic(1.0, 2), 0.0, 0.0)
    assert val == pytest.approx(1.0)


def test_hvp_failure_becomes_run_error():
    def broken(v):
        raise ValueError("boom")

    with pytest.raises(RunError):
        bound.curvature_expansion(broken, Isotropic(1.0, 2), 0.0)

    def nonfinite(v):
        return np.full(2, np.nan)

    with pytest.raises(RunError):
        bound.curvature_expansion(nonfinite, Isotropic(1.0, 2), 0.0)


def test_comparable_dominates_reference_geometry_general():
    rng = np.random.default_rng(13)
    for _ in range(100):
        k = int(rng.integers(1, 5))
        d = 3
        etas = rng.uniform(0.01, 0.5, k)
        sigmas = [gauss.Diagonal(rng.uniform(0.1, 2.0, d)) for _ in range(k)]
        refs = [gauss.Diagonal(rng.uniform(0.1, 2.0, d)) for _ in range(k)]
        diffs = [rng.standard_normal(d) for _ in range(k)]
        ev_sync = [gauss.mahalanobis_sq(x, s) for x, s in zip(diffs, sigmas)]
        ev_ref = [gauss.mahalanobis_sq(x, r) for x, r in zip(diffs, refs)]
        costs = [gauss.cov_compare_cost(s, r) for s, r in zip(sigmas, refs)]
        kappa = max(gauss.comparability_kappa(s, r) for s, r in zip(sigmas, refs))
        common = dict(r=1.0, n=40, etas=tuple(etas), egamma=(0.0,) * k, c=tuple(costs))
        general = bound.general_bound(bound.BoundInputs(ev=tuple(ev_ref), **common))
        comparable = bound.comparable_bound(
            bound.BoundInputs(ev=tuple(ev_sync), kappa=max(kappa, 1.0), **common)
        )
        assert comparable.total >= general.total - 1e-9


def _dense_hessian(model, w, samples, eps=1e-5):
    d = model.dim
    h = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        h[:, j] = (model.grad(w + e, samples) - model.grad(w - e, samples)) / (2 * eps)
    return 0.5 * (h + h.T)


def test_remainder_bound_controls_mlp_expansion_error():
    spec = {"kind": "mlp", "in_dim": 2, "hidden": 2}
    model = train.build_model(spec)
    dataset = train.build_dataset(spec, {"seed": 17, "n_train": 25})
    rng = np.random.default_rng(8)
    w = 0.3 * rng.standard_normal(model.dim)
    sigma = Isotropic(0.01, model.dim)
    # heuristic Hessian-Lipschitz estimate: max operator-norm difference over
    # distance across sampled pairs in the perturbation range (an estimate,
    # not a certificate)
    points = [w] + [w + sigma.sample(1, np.random.default_rng(s))[0] for s in range(6)]
    hessians = [_dense_hessian(model, p, dataset.train) for p in points]
    rho = 0.0
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            dist = float(np.linalg.norm(points[i] - points[j]))
            if dist > 1e-9:
                gap = float(np.linalg.norm(hessians[i] - hessians[j], 2))
                rho = max(rho, gap / dist)
    rho *= 2.0  # safety factor on the sampled estimate
    leading, remainder = bound.curvature_expansion(
        lambda v: model.hvp(w, v, dataset.train), sigma, rho
    )
    m = 40_000
    zetas = sigma.sample(m, np.random.default_rng(99))
    vals = model.loss(w, dataset.train) - model.loss_many(w[None, :] + zetas, dataset.train)
    delta_hat = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(m))
    assert abs(delta_hat - leading) <= remainder + 3 * se


def test_r_from_loss_range():
    assert bound.r_from_loss_range(0.0, 4.0) == 2.0
    with pytest.raises(InputError):
        bound.r_from_loss_range(1.0, 0.0)


def test_inputs_from_summary_round_trip():
    summary = {
        "R_hat": 0.02,
        "per_step": [
            {"t": 1, "eta": 0.1, "V_hat": 2.0, "Gamma_hat": None, "C_hat": 0.0},
            {"t": 2, "eta": 0.1, "V_hat": 1.0, "Gamma_hat": 0.5, "C_hat": 0.1},
        ],
    }
    inputs = bound.inputs_from_summary(summary, r=1.0, n=10)
    assert inputs.egamma == (0.0, 0.5)
    assert inputs.c == (0.0, 0.1)
    assert inputs.r_delta == 0.02
    rep = bound.general_bound(inputs)
    payload = bound.report_to_json(rep)
    assert payload["total"] == rep.total and payload["variant"] == "general"
