import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.stats import norm

from qrheston.errors import DomainError, GridError, NoSolutionError
from qrheston.model import ModelParams
from qrheston.pricing import (
    MATURITIES,
    SPX_STRIKES,
    VIX_WINDOW,
    IVSurface,
    VixMomentMap,
    bs_delta_vega,
    bs_price,
    bs_put,
    default_strikes,
    implied_vol,
    smile_from_terminal,
    vix_squared_from_state,
    vix_squared_nested_mc,
)


def _bs_ref(s, k, t, v):
    d1 = (math.log(s / k) + 0.5 * v * v * t) / (v * math.sqrt(t))
    return s * norm.cdf(d1) - k * norm.cdf(d1 - v * math.sqrt(t))


def test_bs_price_and_parity():
    assert float(bs_price(100.0, 95.0, 0.25, 0.3)) == pytest.approx(_bs_ref(100, 95, 0.25, 0.3), rel=1e-12)
    assert float(bs_price(100.0, 95.0, 0.25, 0.3) - bs_put(100.0, 95.0, 0.25, 0.3)) == pytest.approx(5.0)


def test_greeks_match_finite_differences():
    d, v = bs_delta_vega(100.0, 98.0, 0.08, 0.2)
    h = 1e-5
    assert float(d) == pytest.approx(float(bs_price(100 + h, 98, 0.08, 0.2) - bs_price(100 - h, 98, 0.08, 0.2)) / (2 * h),
                                     rel=1e-7)
    assert float(v) == pytest.approx(float(bs_price(100, 98, 0.08, 0.2 + h) - bs_price(100, 98, 0.08, 0.2 - h)) / (2 * h),
                                     rel=1e-7)


@settings(max_examples=100, deadline=None)
@given(k=st.floats(-0.3, 0.3), t=st.floats(0.01, 1.0), v=st.floats(0.05, 3.0))
def test_implied_vol_inverts_price(k, t, v):
    K = math.exp(k)
    p = float(bs_price(1.0, K, t, v))
    if p - max(1.0 - K, 0.0) < 1e-12:
        return
    assert implied_vol(p, 1.0, K, t) == pytest.approx(v, rel=1e-6)


@pytest.mark.parametrize("price", [0.01, 1.5, -0.1])
def test_implied_vol_rejects_arbitrage(price):
    with pytest.raises((NoSolutionError, DomainError)):
        implied_vol(price, 1.0, 0.95, 0.1)


def test_smile_of_lognormal_sample_is_flat():
    rng = np.random.default_rng(0)
    sig, tau = 0.25, 0.05
    x = np.exp(sig * math.sqrt(tau) * rng.standard_normal(400_000) - 0.5 * sig * sig * tau)
    vols, ci, ok = smile_from_terminal(x, float(x.mean()), SPX_STRIKES[2:], tau)
    assert ok.all()
    assert np.all(np.abs(vols - sig) <= 3 * ci / 1.96 + 1e-3)


def test_exact_control_variate_has_no_estimable_error():
    rng = np.random.default_rng(1)
    sig, tau = 0.2, 0.05
    x = np.exp(sig * math.sqrt(tau) * rng.standard_normal(1000) - 0.5 * sig * sig * tau)
    vols, ci, ok = smile_from_terminal(x, 1.0, [-0.05, 0.0, 0.05], tau, proxy=x, proxy_vol=sig)
    assert np.allclose(vols, sig, atol=1e-9)
    assert np.all(np.isnan(ci))


def test_surface_csv_and_json_round_trip(tmp_path):
    vols = np.linspace(0.2, 0.3, 60)
    vols[5] = np.nan
    s = IVSurface.from_flat("SPX", vols, ci_half=np.full(60, 0.01))
    s.to_csv(tmp_path / "s.csv")
    s2 = IVSurface.from_csv(tmp_path / "s.csv")
    assert np.allclose(s2.flat(), s.flat(), equal_nan=True) and not s2.mask.ravel()[5]
    s.save_json(tmp_path / "s.json")
    import json

    s3 = IVSurface.from_json(json.loads((tmp_path / "s.json").read_text()))
    assert np.allclose(s3.flat(), s.flat(), equal_nan=True)
    assert np.array_equal(s3.maturities, MATURITIES)


def test_grid_errors():
    with pytest.raises(GridError):
        IVSurface.from_flat("SPX", np.ones(59))
    with pytest.raises(GridError):
        default_strikes("DAX")


def _moment_ode_reference(p, k, z, delta):
    """Integrate the first and second moment equations of the factors directly."""
    n = k.n
    A = -np.diag(k.gamma) - p.lam * np.outer(np.ones(n), k.c)
    ones = np.ones((n, n))

    def ev(m, P):
        return p.a * (k.c @ P @ k.c - 2 * p.b * (k.c @ m) + p.b**2) + p.c

    def rhs(_, y):
        m, P = y[:n], y[n : n + n * n].reshape(n, n)
        e = ev(m, P)
        dP = A @ P + P @ A.T + p.eta**2 * e * ones
        return np.concatenate([A @ m, dP.ravel(), [e]])

    y0 = np.concatenate([z, np.outer(z, z).ravel(), [0.0]])
    sol = solve_ivp(rhs, (0, delta), y0, method="Radau", rtol=1e-12, atol=1e-14)
    return 1e4 / delta * sol.y[-1, -1]


def test_vix_moment_map_matches_ode_integration(kernel10):
    rng = np.random.default_rng(5)
    for _ in range(3):
        p = ModelParams.from_omega(rng.uniform([0.5, 1.0, 0.1, 0.01, 1e-4], [2.5, 1.5, 0.6, 0.5, 0.03]))
        z = rng.uniform(-0.5, 0.5, 10)
        assert vix_squared_from_state(p, kernel10, z) == pytest.approx(
            _moment_ode_reference(p, kernel10, z, VIX_WINDOW), rel=1e-8)


def test_vix_of_constant_variance(kernel10):
    p = ModelParams(0.0, 1.0, 0.0, 0.0, 0.04)
    assert vix_squared_from_state(p, kernel10, np.zeros(10)) == pytest.approx(400.0)
    vm = VixMomentMap(p, kernel10)
    assert np.allclose(vm.vix(np.zeros((3, 10))), 20.0)


def test_vix_nested_mc_agrees_for_mild_parameters(kernel10):
    p = ModelParams(1.0, 1.0, 0.1, 0.1, 0.02)
    z = np.full(10, 0.01)
    m, h = vix_squared_nested_mc(p, kernel10, z, paths=2000, steps=400, seed=3)
    assert abs(m - vix_squared_from_state(p, kernel10, z)) <= 1.5 * h + 1e-3 * m


def test_vix_state_shape(kernel10):
    with pytest.raises(DomainError):
        vix_squared_from_state(ModelParams(1, 1, 0.1, 0.1, 0.02), kernel10, np.zeros(3))
