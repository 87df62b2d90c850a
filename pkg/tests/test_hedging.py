import numpy as np
import pytest

from qrheston.calibration import Surrogate
from qrheston.dataset import N_FACTORS, OMEGA_HI, OMEGA_LO, NormalizationStats
from qrheston.errors import DomainError, GridError
from qrheston.hedging import (
    BsFixedHedger,
    DmlHedger,
    DmlModel,
    MtpHedger,
    bilinear,
    bs_fixed_from_price,
    fit_dml,
    hedge_pnl,
    read_market_series,
    run_hedge_market,
    run_hedge_synthetic,
    trace_factors,
)
from qrheston.model import ModelParams
from qrheston.nn import Mlp, TrainConfig
from qrheston.pricing import bs_delta_vega, bs_price
from qrheston.simulation import SimConfig, simulate

LO = np.concatenate([OMEGA_LO, np.full(N_FACTORS, -0.5)])
HI = np.concatenate([OMEGA_HI, np.full(N_FACTORS, 0.5)])


def _surrogate(seed=1, flat=None):
    stats = NormalizationStats(LO, HI, np.full(120, 0.2), np.full(120, 0.05))
    spx = Mlp((15, 12, 60), seed=seed)
    if flat is not None:
        spx.weights[-1][:] = 0.0
        spx.biases[-1][:] = (flat - 0.2) / 0.05
    return Surrogate(spx, Mlp((15, 12, 60), seed=seed + 1), stats)


def test_bilinear_reproduces_bilinear_functions(rng):
    ks, ts = np.linspace(-0.2, 0.2, 5), np.array([0.03, 0.05, 0.09])
    f = lambda k, t: 1 + 2 * k - 3 * t + 5 * k * t  # noqa: E731
    table = np.tile(f(ks[:, None], ts[None, :]), (4, 1, 1))
    k, t = rng.uniform(-0.2, 0.2, 4), rng.uniform(0.03, 0.09, 4)
    v, out = bilinear(ks, ts, table, k, t)
    assert np.allclose(v, f(k, t)) and not out.any()
    v, out = bilinear(ks, ts, table[:1], np.array([0.5]), np.array([0.05]))
    assert out[0] and v[0] == pytest.approx(f(0.2, 0.05))


def test_flat_surface_gives_black_scholes_delta(hedge_params):
    h = MtpHedger(_surrogate(flat=0.25), hedge_params)
    s, z = np.array([95.0, 100.0, 104.0]), np.zeros((3, 10))
    r = h.ratios(s, z, 98.0, 0.08)
    d, _ = bs_delta_vega(s, 98.0, 0.08, 0.25)
    assert np.allclose(r.ratio, d, atol=1e-10) and np.allclose(r.dp_dz, 0, atol=1e-10)
    assert np.allclose(r.price, bs_price(s, 98.0, 0.08, 0.25))


def test_factor_sensitivity_matches_finite_differences(hedge_params, rng):
    h = MtpHedger(_surrogate(seed=4), hedge_params)
    z = rng.uniform(-0.3, 0.3, 10)
    r = h.ratios([100.0], [z], 98.0, 0.06)
    eps = 1e-6
    fd = [(h.ratios([100.0], [z + eps * e], 98.0, 0.06).price[0]
           - h.ratios([100.0], [z - eps * e], 98.0, 0.06).price[0]) / (2 * eps) for e in np.eye(10)]
    assert np.allclose(r.dp_dz[0], fd, rtol=1e-5, atol=1e-9)
    assert r.ratio[0] == pytest.approx(r.dp_ds[0] + hedge_params.eta / 100.0 * r.dp_dz[0].sum())
    with pytest.raises(DomainError):
        h.ratios([100.0], [z], 98.0, 0.0)


def test_dml_model_interpolates_between_outputs(hedge_params, tmp_path):
    net = Mlp((11, 5), seed=0)
    net.weights[0][:] = 0.0
    net.biases[0][:] = [1.0, 2.0, 3.0, 4.0, 5.0]
    m = DmlModel(net, np.zeros(11), np.ones(11), 2.0, strike=98.0)
    p, g = m.interpolate(np.zeros((1, 11)), 0.05)
    assert p[0] == pytest.approx(5.0) and np.allclose(g, 0)
    with pytest.raises(DomainError):
        m.interpolate(np.zeros((1, 11)), 0.01)
    r = DmlHedger(m, hedge_params, clamp=True).ratios([1.0], np.zeros((1, 10)), 98.0, 0.01)
    assert r.clamped[0] and r.price[0] == pytest.approx(2.0)
    with pytest.raises(DomainError):
        DmlHedger(m, hedge_params).ratios([1.0], np.zeros((1, 10)), 100.0, 0.05)
    m.save(tmp_path / "d")
    back = DmlModel.load(tmp_path / "d")
    assert back.strike == 98.0 and np.array_equal(back.maturities, m.maturities)


def test_hedge_pnl_by_hand():
    s = np.array([[100.0, 102.0, 101.0]])
    h = BsFixedHedger(0.2)
    times = np.array([0.0, 0.01, 0.02])
    ratios, jd, jp, cl = hedge_pnl(s, np.zeros((1, 3, 1)), times, h, 100.0, 0.02, 1.0)
    d0 = bs_delta_vega(100.0, 100.0, 0.02, 0.2)[0]
    d1 = bs_delta_vega(102.0, 100.0, 0.01, 0.2)[0]
    assert jd[0, 2] == pytest.approx(2 * d0 - d1)
    assert jp[0, 1] == pytest.approx(bs_price(102.0, 100.0, 0.01, 0.2) - 1.0)
    assert jp[0, 2] == pytest.approx(1.0 - 1.0) and cl == 0.0


def test_factor_tracing_inverts_the_simulation(kernel10, hedge_params):
    cfg = SimConfig(0.03, 25, 3, seed=5)
    z0 = np.linspace(-0.1, 0.1, 10)
    b = simulate(hedge_params, kernel10, z0, 100.0, cfg)
    for p in range(3):
        assert np.allclose(trace_factors(hedge_params, kernel10, z0, b.s[p], cfg.dt), b.z[p], atol=1e-12)


def test_black_scholes_hedge_error_shrinks_with_rebalancing(kernel3):
    p = ModelParams(0.0, 1.0, 0.0, 0.0, 0.04)
    h = BsFixedHedger(0.2)
    runs = [run_hedge_synthetic(p, kernel3, np.zeros(3), 100.0, 100.0, 0.08, dt, 2000, h, sim_dt=0.0008,
                                mc_paths=2000, seed=1) for dt in (0.0008, 0.0064)]
    stds = [r.summary()["std_over_p0"] for r in runs]
    assert stds[0] < 0.5 * stds[1]
    assert runs[0].p0 == pytest.approx(float(bs_price(100.0, 100.0, 0.08, 0.2)), rel=0.05)
    with pytest.raises(DomainError):
        run_hedge_synthetic(p, kernel3, np.zeros(3), 100.0, 100.0, 0.08, 0.0001, 10, h, sim_dt=0.0008)


def test_market_series(tmp_path, kernel3, hedge_params):
    f = tmp_path / "m.csv"
    f.write_text("date,spot,option_price\n2020-01-02,100,3.0\n2020-01-03,101,3.5\n2020-01-06,100.5,3.1\n")
    dates, spot, price = read_market_series(f)
    assert len(dates) == 3
    h = bs_fixed_from_price(100.0, 100.0, 0.1, 3.0)
    run = run_hedge_market(spot, price, hedge_params, kernel3, np.zeros(3), 100.0, 0.1, h)
    assert run.j[0, 0] == 0.0 and run.j_p[0, -1] == pytest.approx(0.1)
    assert float(bs_price(100.0, 100.0, 0.1, h.sigma)) == pytest.approx(3.0)
    f.write_text("date,spot,option_price\n2020-01-02,100,3.0\n2020-01-03,101,\n")
    with pytest.raises(GridError):
        read_market_series(f)
    f.write_text("date,spot,option_price\n2020-01-03,100,3.0\n2020-01-02,101,3.1\n")
    with pytest.raises(DomainError):
        read_market_series(f)


def test_fit_dml_smoke(kernel3, hedge_params):
    model, hist = fit_dml(hedge_params, kernel3, 98.0, np.zeros(3), 100.0, n_samples=256, n_val=64, seed=2,
                          cfg=TrainConfig.dml(epochs=2))
    assert len(hist.train_loss) == 2 and model.strike == 98.0
    price, grad = model.interpolate(np.r_[100.0, np.zeros(3)][None, :], 0.08)
    assert np.isfinite(price).all() and grad.shape == (1, 4)


def _smooth_surrogate(seed=7):
    sur = _surrogate(seed=seed)
    sur.net_spx.weights[-1] *= 0.1
    return sur


def test_ratio_is_the_total_derivative_with_comoving_factors(hedge_params, rng):
    h = MtpHedger(_smooth_surrogate(), hedge_params)
    z = rng.uniform(-0.2, 0.2, 10)
    # at a strike node the +-delta_k skew difference and a small bump both average the two adjacent cells
    s, eps = 98.0 * np.exp(0.02), 1e-4

    def price(ds):
        return h.ratios([s + ds], [z + hedge_params.eta * ds / s], 98.0, 0.06).price[0]

    fd = (price(eps) - price(-eps)) / (2 * eps)
    assert h.ratios([s], [z], 98.0, 0.06).ratio[0] == pytest.approx(fd, abs=5e-3)


def test_deep_otm_short_dated_ratio_is_a_call_delta(hedge_params):
    h = MtpHedger(_smooth_surrogate(), hedge_params)
    s = 98.0 / np.exp(-0.15)
    r = h.ratios([s], np.zeros((1, 10)), 98.0, 0.03)
    assert 0.0 <= r.ratio[0] <= 1.0


def test_nothing_to_hedge_without_volatility(kernel3):
    p = ModelParams(0.0, 1.0, 0.0, 0.0, 1e-24)
    run = run_hedge_synthetic(p, kernel3, np.zeros(3), 100.0, 98.0, 0.08, 0.0024, 50, BsFixedHedger(1e-12),
                              sim_dt=0.0012, mc_paths=50)
    assert np.allclose(run.j_final, 0.0, atol=1e-9)
    assert np.array_equal(run.j, run.j_delta - run.j_p) and np.all(run.j[:, 0] == 0)


def test_rebalancing_refinement(kernel3):
    p = ModelParams(0.0, 1.0, 0.0, 0.0, 0.04)
    stds = [run_hedge_synthetic(p, kernel3, np.zeros(3), 100.0, 98.0, 0.08, dt, 1000, BsFixedHedger(0.2),
                                sim_dt=0.0012, mc_paths=1000, seed=3).summary()["std"] for dt in (0.0072, 0.0036, 0.0012)]
    assert stds[0] >= stds[1] >= stds[2]


def test_ratios_do_not_look_ahead(kernel10, hedge_params):
    b = simulate(hedge_params, kernel10, np.zeros(10), 100.0, SimConfig(0.08, 20, 30, seed=1))
    h = MtpHedger(_smooth_surrogate(), hedge_params)
    r1 = hedge_pnl(b.s, b.z, b.times, h, 98.0, 0.08, 2.9)[0]
    s2, z2 = b.s.copy(), b.z.copy()
    s2[:, 11:] *= 1.05
    z2[:, 11:] += 0.1
    r2 = hedge_pnl(s2, z2, b.times, h, 98.0, 0.08, 2.9)[0]
    assert np.array_equal(r1[:, :11], r2[:, :11]) and not np.array_equal(r1[:, 11:-1], r2[:, 11:-1])


def test_model_generated_market_reproduces_synthetic_run(kernel10, hedge_params):
    h = MtpHedger(_smooth_surrogate(), hedge_params)
    syn = run_hedge_synthetic(hedge_params, kernel10, np.zeros(10), 100.0, 98.0, 0.08, 0.0012, 1, h,
                              mc_paths=200, seed=4)
    cfg = SimConfig.from_dt(0.08, 0.0012, 200, 4)
    b = simulate(hedge_params, kernel10, np.zeros(10), 100.0, cfg)
    spot = b.s[0]
    quotes = np.r_[syn.p0, [h.ratios([spot[k]], b.z[0, k:k + 1], 98.0, 0.08 - b.times[k]).price[0]
                            for k in range(1, cfg.steps)], max(spot[-1] - 98.0, 0.0)]
    mkt = run_hedge_market(spot, quotes, hedge_params, kernel10, np.zeros(10), 98.0, 0.08, h, dt=cfg.dt)
    assert np.allclose(mkt.ratios, syn.ratios, atol=1e-9)
    assert np.allclose(mkt.j, syn.j, atol=1e-9)


def test_daily_recalibration_with_traced_states_changes_nothing(kernel10, hedge_params):
    spot = np.array([100.0, 101.0, 99.5, 100.2])
    price = np.array([3.0, 3.4, 2.6, 2.9])
    h = MtpHedger(_smooth_surrogate(), hedge_params)
    base = run_hedge_market(spot, price, hedge_params, kernel10, np.zeros(10), 98.0, 0.08, h)
    z = trace_factors(hedge_params, kernel10, np.zeros(10), spot, 1.0 / 252)
    again = run_hedge_market(spot, price, hedge_params, kernel10, np.zeros(10), 98.0, 0.08, h,
                             daily=[(hedge_params, zk) for zk in z])
    assert np.array_equal(base.ratios, again.ratios) and again.meta["recalibrated_daily"]
    other = ModelParams(2.0, 1.2, 0.35, 0.2, 0.0025)
    moved = run_hedge_market(spot, price, hedge_params, kernel10, np.zeros(10), 98.0, 0.08, h,
                             daily=[(other, zk) for zk in z])
    assert not np.array_equal(base.ratios, moved.ratios)
    with pytest.raises(DomainError):
        run_hedge_market(spot, price, hedge_params, kernel10, np.zeros(10), 98.0, 0.08, h, daily=[(other, z[0])])
