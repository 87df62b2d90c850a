import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from qrheston.errors import DomainError
from qrheston.model import (
    FactorState,
    ModelParams,
    aggregate_z,
    dphi_half,
    initial_mean_curve,
    load_params,
    mean_drift_matrix,
    phi,
    save_params,
    variance,
)


def test_phi_is_square_below_cap_and_flat_above():
    x = np.array([-20.0, -3.0, 0.0, 2.0, 9.99, 10.0, 25.0])
    assert np.allclose(phi(x, 10.0), [400.0, 9.0, 0.0, 4.0, 9.99**2, 100.0, 100.0])
    assert np.allclose(dphi_half(x, 10.0), [-20.0, -3.0, 0.0, 2.0, 9.99, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-50, 9.9))
def test_dphi_half_is_half_derivative(x):
    h = 1e-6
    fd = (phi(x + h) - phi(x - h)) / (2 * h)
    assert float(dphi_half(x)) == pytest.approx(0.5 * float(fd), rel=1e-6, abs=1e-8)


def test_variance_floor(kernel10):
    p = ModelParams(1.0, 1.2, 0.35, 0.2, 0.0025)
    z = np.full(10, 0.2 / kernel10.c.sum())
    assert variance(p, kernel10, z) == pytest.approx(0.0025)
    assert variance(p, kernel10, np.zeros(10)) == pytest.approx(0.35 * 0.04 + 0.0025)


@pytest.mark.parametrize("bad", [dict(lam=-1.0), dict(a=-0.1), dict(b=-0.1), dict(c=0.0), dict(eta=-1.0)])
def test_params_domain(bad):
    kw = dict(lam=1.0, eta=1.0, a=0.3, b=0.1, c=0.01) | bad
    with pytest.raises(DomainError):
        ModelParams(**kw)


def test_params_round_trip(tmp_path):
    p = ModelParams.from_omega([1.0, 1.2, 0.35, 0.2, 0.0025])
    assert np.allclose(p.omega, [1.0, 1.2, 0.35, 0.2, 0.0025])
    z0 = np.linspace(-0.1, 0.1, 10)
    save_params(tmp_path / "p.json", p, z0)
    p2, z2 = load_params(tmp_path / "p.json")
    assert p2 == p and np.allclose(z2, z0)


def test_state_and_aggregate(kernel10):
    s = FactorState(np.ones(10), 100.0)
    assert s.x[0] == 100.0 and aggregate_z(kernel10, s) == pytest.approx(kernel10.c.sum())
    with pytest.raises(DomainError):
        FactorState(np.ones(10), 0.0)
    with pytest.raises(DomainError):
        aggregate_z(kernel10, np.ones(3))


def test_factor_means_solve_the_linear_ode(kernel3):
    p = ModelParams(1.5, 1.0, 0.3, 0.1, 0.01)
    z0 = np.array([0.3, -0.2, 0.1])
    A = mean_drift_matrix(p, kernel3)
    sol = solve_ivp(lambda t, m: A @ m, (0, 0.1), z0, method="Radau", rtol=1e-11, atol=1e-13, dense_output=True)
    mc = initial_mean_curve(p, kernel3, z0)
    for t in (0.01, 0.05, 0.1):
        assert np.allclose(mc.factor_means(t)[0], sol.sol(t), rtol=1e-7, atol=1e-10)
        assert mc.mean_z(t) == pytest.approx(sol.sol(t) @ kernel3.c, rel=1e-7)


def test_mean_curve_without_feedback_is_g(kernel3):
    p = ModelParams(0.0, 1.0, 0.3, 0.1, 0.01)
    z0 = np.array([0.3, -0.2, 0.1])
    mc = initial_mean_curve(p, kernel3, z0)
    t = np.array([0.0, 0.02, 0.07])
    assert np.allclose(mc.mean_z(t), mc.g(t))
