import numpy as np
import pytest

from vperturb import gauss, proxies, rng, schedule, train
from vperturb.errors import AdmissibilityError, ConfigError, InputError
from vperturb.gauss import Diagonal, Isotropic
from vperturb.proxies import ProxyOptions
from vperturb.schedule import ReferenceSpec, ScheduleSpec


@pytest.fixture(scope="module")
def setup():
    cfg = {
        "model": {"kind": "quadratic", "dim": 3},
        "dataset": {"seed": 7, "n_train": 40},
        "sgd": {
            "T": 7,
            "eta": {"kind": "constant", "eta0": 0.1},
            "batch": 8,
            "seed": 7,
            "subbatch": "pair",
        },
    }
    model = train.build_model(cfg["model"])
    dataset = train.build_dataset(cfg["model"], cfg["dataset"])
    traj = train.run_sgd(cfg)
    return cfg, model, dataset, traj


def test_deviation_proxy_geometry():
    g = np.array([1.0, 2.0])
    ghat = np.array([0.0, 0.0])
    assert proxies.deviation_proxy(g, ghat, Isotropic(1.0, 2)) == pytest.approx(5.0)
    assert proxies.deviation_proxy(g, ghat, Isotropic(0.5, 2)) == pytest.approx(10.0)
    w = Diagonal(np.array([1.0, 4.0]))
    assert proxies.deviation_proxy(g, ghat, w) == pytest.approx(1.0 + 1.0)
    with pytest.raises(InputError):
        proxies.deviation_proxy(g, np.zeros(3), Isotropic(1.0, 2))


def test_pair_scaling():
    assert proxies.pair_scaling(5, 5) == pytest.approx(0.5)
    assert proxies.pair_scaling(4, 3) == pytest.approx(24 / 49)
    with pytest.raises(InputError):
        proxies.pair_scaling(0, 3)


def test_fluctuation_proxies():
    g1 = np.array([1.0, 0.0])
    g2 = np.array([0.0, 0.0])
    w = Isotropic(1.0, 2)
    assert proxies.fluctuation_proxy(g1, g2, (5, 5), w) == pytest.approx(0.5)
    # K-subbatch version: two gradients reduce to half the squared gap
    assert proxies.fluctuation_proxy_K([g1, g2], w) == pytest.approx(0.5)
    grads = [np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([0.0, 0.0])]
    mean = np.mean(grads, axis=0)
    expected = sum(float((g - mean) @ (g - mean)) for g in grads) / 2
    assert proxies.fluctuation_proxy_K(grads, w) == pytest.approx(expected)
    with pytest.raises(InputError):
        proxies.fluctuation_proxy_K([g1], w)


def test_sensitivity_proxy_quadratic_matches_analytic(setup):
    _, model, dataset, _ = setup
    # for a quadratic, g(w + z) - g(w) = A z, so the expected squared norm
    # in the Sigma_t^{-1} geometry is Tr(Sigma_t^{-1} A Sigma_acc A)
    acc = Diagonal(np.array([0.04, 0.02, 0.06]))
    weight = Isotropic(0.01, 3)
    val = proxies.sensitivity_proxy(
        model, np.zeros(3), acc, weight, dataset.eval_samples, 40_000, rng.stream(0, 1)
    )
    a = model.a
    expected = np.trace(np.linalg.solve(weight.dense(), a @ acc.dense() @ a))
    assert val == pytest.approx(expected, rel=0.05)
    # zero accumulated covariance short-circuits to exactly zero
    assert (
        proxies.sensitivity_proxy(
            model, np.zeros(3), gauss.zero(3), weight, dataset.eval_samples, 10, rng.stream(0, 2)
        )
        == 0.0
    )


def test_output_sensitivity_proxy_sign_and_crn(setup):
    _, model, dataset, traj = setup
    acc = Isotropic(0.05, 3)
    w = traj.final_iterate()
    g = rng.stream(3, 1)
    zetas = acc.sample(500, g)
    a = proxies.output_sensitivity_proxy(model, w, acc, dataset.train, 500, None, zetas=zetas)
    b = proxies.output_sensitivity_proxy(model, w, acc, dataset.train, 500, None, zetas=zetas)
    assert a == b  # shared draws give identical estimates
    # quadratic losses increase under perturbation on average: delta < 0
    assert a < 0


def test_run_algorithm1_synchronized(setup):
    cfg, model, dataset, traj = setup
    spec = ScheduleSpec(kind="fixed_isotropic", dim=3, horizon=7, sigma=0.1)
    opts = ProxyOptions(checkpoints=(1, 2, 3, 4, 5, 6), mc_samples=300, mc_samples_final=300, seed=1)
    rep = proxies.run_algorithm1(
        model, dataset, traj, spec, ReferenceSpec(mode="synchronized_deterministic"), opts
    )
    assert all(rec.c_hat == 0.0 for rec in rep.records)
    assert rep.records[0].gamma_hat == 0.0  # no accumulated noise before step 1
    assert all(rec.gamma_hat >= 0 for rec in rep.records)
    assert rep.r_hat == abs(rep.delta_eval - rep.delta_train)
    expected_b = rep.r_hat + sum(
        2 * rec.eta**2 * (rec.v_hat + rec.gamma_hat) + rec.c_hat for rec in rep.records
    )
    assert rep.b_hat == pytest.approx(expected_b, rel=1e-12)
    assert rep.b_hat_sharper <= rep.b_hat


def test_run_algorithm1_ghost_pays_cost(setup):
    cfg, model, dataset, traj = setup
    ghost_cfg = {
        "model": cfg["model"],
        "dataset": {**cfg["dataset"], "seed": 99},
        "sgd": {**cfg["sgd"], "seed": 99},
    }
    ghost = train.run_sgd(ghost_cfg)
    spec = ScheduleSpec(kind="adaptive_scalar", dim=3, horizon=7)
    opts = ProxyOptions(checkpoints=(2, 4, 6), mc_samples=200, mc_samples_final=200, seed=1)
    rep = proxies.run_algorithm1(model, dataset, traj, spec, ReferenceSpec(mode="ghost"), opts,
                                 ghost_trajectory=ghost)
    assert all(rec.c_hat >= 0 for rec in rep.records)
    assert any(rec.c_hat > 0 for rec in rep.records)
    with pytest.raises(InputError):
        proxies.run_algorithm1(model, dataset, traj, spec, ReferenceSpec(mode="ghost"), opts)


def test_run_algorithm1_rejects_bad_configs(setup):
    cfg, model, dataset, traj = setup
    spec = ScheduleSpec(kind="adaptive_scalar", dim=3, horizon=7)
    opts = ProxyOptions(checkpoints=(1,), mc_samples=10, mc_samples_final=10)
    with pytest.raises(AdmissibilityError):
        proxies.run_algorithm1(
            model, dataset, traj, spec, ReferenceSpec(mode="synchronized_deterministic"), opts
        )
    with pytest.raises(InputError):
        ProxyOptions(checkpoints=(0,), mc_samples=0)
    with pytest.raises(ConfigError):
        ProxyOptions(checkpoints=(1,), deviation_mode="bogus")
    with pytest.raises(InputError):
        proxies.run_algorithm1(
            model, dataset, traj, spec,
            ReferenceSpec(mode="ghost"),
            ProxyOptions(checkpoints=(7,), mc_samples=10, mc_samples_final=10),
        )


def test_fluc_mode_requires_subbatch_gradients(setup):
    cfg, model, dataset, _ = setup
    plain = train.run_sgd({**cfg, "sgd": {**cfg["sgd"], "subbatch": "none"}})
    spec = ScheduleSpec(kind="fixed_isotropic", dim=3, horizon=7)
    opts = ProxyOptions(checkpoints=(1,), deviation_mode="fluc", mc_samples=10, mc_samples_final=10)
    with pytest.raises(ConfigError):
        proxies.run_algorithm1(
            model, dataset, plain, spec, ReferenceSpec(mode="synchronized_deterministic"), opts
        )


def test_csv_shape_and_determinism(setup):
    cfg, model, dataset, traj = setup
    spec = ScheduleSpec(kind="fixed_isotropic", dim=3, horizon=7)
    opts = ProxyOptions(checkpoints=(1, 3, 5), mc_samples=100, mc_samples_final=100, seed=2)
    ref = ReferenceSpec(mode="synchronized_deterministic")
    rep1 = proxies.run_algorithm1(model, dataset, traj, spec, ref, opts)
    rep2 = proxies.run_algorithm1(model, dataset, traj, spec, ref, opts)
    csv1 = proxies.report_to_csv(rep1)
    assert csv1 == proxies.report_to_csv(rep2)
    lines = csv1.split("\r\n")
    assert lines[0].split(",")[0] == "t"
    assert len([ln for ln in lines if ln]) == 4  # header + one row per checkpoint
    summary = proxies.report_to_summary(rep1)
    assert summary["B_hat"] == rep1.b_hat
    assert summary["metadata"]["trajectory_hash"] == train.trajectory_hash(traj)
