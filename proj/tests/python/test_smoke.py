import math

import numpy as np
import pytest

import odebench as ob


def test_models_and_jacobians():
    assert {"seir-log", "lorenz"} <= set(ob.registered_models())
    m = ob.make_model("lorenz")
    assert m.component_names == ["X", "Y", "Z"]
    x, th = np.array([1.0, 2.0, 3.0]), np.array([8 / 3, 28.0, 10.0])
    np.testing.assert_allclose(m.rhs(x, th), [10 * (2 - 1), 1 * (28 - 3) - 2, 1 * 2 - 8 / 3 * 3])
    h = 1e-6
    fd = np.column_stack([(m.rhs(x + h * e, th) - m.rhs(x - h * e, th)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(m.jac_state(x, th), fd, atol=1e-6)
    with pytest.raises(Exception):
        ob.make_model("nope")


def test_integrate_matches_closed_form():
    t = ob.uniform_grid(0.0, 2.0, 21)
    traj = ob.integrate("decay", np.array([1.0]), np.array([1.5]), t)
    np.testing.assert_allclose(traj.values[:, 0], np.exp(-1.5 * t), rtol=1e-7)


def test_kernel():
    h = ob.MaternHyper(2.0, 0.7, 0.0)
    assert ob.matern(h, 0.3, 0.3) == pytest.approx(4.0)
    assert ob.matern(h, 0.3, 1.1) == pytest.approx(ob.matern(h, 1.1, 0.3))
    k = ob.kernel_mats(h, ob.uniform_grid(0.0, 1.0, 9))
    assert np.allclose(k["K"], k["K"].T)
    assert np.all(np.linalg.eigvalsh(k["C"]) > 0)


def test_nuts_gaussian():
    cov = np.diag([1.0, 4.0])
    prec = np.linalg.inv(cov)
    res = ob.nuts(lambda q: (-0.5 * q @ prec @ q, -prec @ q), np.zeros(2), 500, 2000, 3)
    assert res.draws.shape == (2000, 2)
    np.testing.assert_allclose(res.draws.var(axis=0), np.diag(cov), rtol=0.25)
    assert abs(res.draws.mean(axis=0)).max() < 0.3


def test_simulate_is_deterministic():
    assert "seir-full" in ob.regime_names()
    reg = ob.regime("seir-missing-e")
    a, b = ob.simulate(reg, 11), ob.simulate(reg, 11)
    np.testing.assert_array_equal(a.values[:, 1:], b.values[:, 1:])
    assert a.mask == [False, True, True]
    assert np.isnan(a.values[:, 0]).all()
    assert a.values.shape[0] == reg.n_obs


def test_magi_gradient_matches_finite_difference():
    reg = ob.regime("lorenz-chaotic")
    data = ob.simulate(reg, 5)
    grid = reg.in_sample_grid()
    x = ob.truth(reg, grid).values
    th, ls = np.array(reg.theta), np.log(np.full(3, 1.0))
    lp, g = ob.magi_log_posterior(reg, data, x, th, ls)
    assert math.isfinite(lp)
    n = x.size
    h = 1e-5
    up, _ = ob.magi_log_posterior(reg, data, x, th * np.array([1 + h, 1, 1]), ls)
    dn, _ = ob.magi_log_posterior(reg, data, x, th * np.array([1 - h, 1, 1]), ls)
    fd = (up - dn) / (2 * h * th[0])
    assert g[n] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_pinn_infer_runs():
    reg = ob.regime("lorenz-chaotic")
    data = ob.simulate(reg, ob.dataset_seed(1, 0))
    out = ob.infer(reg, data, "pinn", epochs=200, lambda_=10.0, seed=3)
    assert not out.failed
    assert out.theta_hat.shape == (3,)
    targets = {(t, m) for t, m, _, _ in out.metrics}
    assert ("X", "rmse") in targets
    with pytest.raises(ValueError):
        ob.infer(reg, data, "bayes")
