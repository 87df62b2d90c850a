"""Hedge ratios of calls under the lifted model and a discrete delta-hedging P&L simulator.

The hedge ratio accounts for the feedback of the asset on the factors, which
move by ``eta dS / S`` along with it::

    delta_t = dP/dS + (eta / S) sum_i dP/dZ^i

``MtpHedger`` obtains the partial derivatives from the SPX surface network
through a Black-Scholes decomposition; ``DmlHedger`` from a network fitted to
pathwise payoffs and pathwise derivatives.

P&L convention at rebalancing time ``t``::

    J_t = J^delta_t - J^P_t,   J^delta_t = sum_k delta_k (S_{k+1} - S_k),   J^P_t = P_t - P_0
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import Surrogate
from .errors import DomainError, GridError
from .kernel import KernelApprox
from .model import FactorState, ModelParams
from .nn import ARCHITECTURES, Mlp, TrainConfig, train_dml
from .pricing import MATURITIES, SPX_STRIKES, bs_delta_vega, bs_price, implied_vol
from .simulation import SimConfig, pathwise_derivatives, simulate, step_index, time_grid

DELTA_K = 0.01
DML_MATURITIES = np.array([0.02, 0.04, 0.06, 0.08, 0.1])


def _bracket(grid, x):
    """Index ``i`` and weight ``w`` with ``x ~ (1-w) grid[i] + w grid[i+1]``; clamps outside the hull."""
    grid = np.asarray(grid, dtype=float)
    x = np.asarray(x, dtype=float)
    outside = (x < grid[0]) | (x > grid[-1])
    xc = np.clip(x, grid[0], grid[-1])
    i = np.clip(np.searchsorted(grid, xc, side="right") - 1, 0, len(grid) - 2)
    w = (xc - grid[i]) / (grid[i + 1] - grid[i])
    return i, w, outside


def bilinear(strikes, maturities, table, k, tau):
    """Bilinear interpolation of ``table[..., strike, maturity]`` at ``(k, tau)``.

    ``table`` has shape ``(B, n_strikes, n_maturities)`` and ``k``, ``tau`` shape ``(B,)``.
    Returns values and a flag marking points clamped to the grid hull.
    """
    i, wi, oi = _bracket(strikes, k)
    j, wj, oj = _bracket(maturities, tau)
    b = np.arange(table.shape[0])
    v = ((1 - wi) * (1 - wj) * table[b, i, j] + wi * (1 - wj) * table[b, i + 1, j]
         + (1 - wi) * wj * table[b, i, j + 1] + wi * wj * table[b, i + 1, j + 1])
    return v, oi | oj


@dataclass
class RatioResult:
    ratio: np.ndarray
    price: np.ndarray
    dp_ds: np.ndarray
    dp_dz: np.ndarray
    clamped: np.ndarray


class MtpHedger:
    """Hedge ratios from the SPX model-to-prices network (strike-major 15 x 4 output)."""

    def __init__(self, surrogate: Surrogate, params: ModelParams, strikes=None, maturities=None,
                 delta_k: float = DELTA_K):
        self.sur = surrogate
        self.params = params
        self.strikes = SPX_STRIKES if strikes is None else np.asarray(strikes, dtype=float)
        self.maturities = MATURITIES if maturities is None else np.asarray(maturities, dtype=float)
        self.delta_k = delta_k

    def _inputs(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        theta = np.concatenate([np.tile(self.params.omega, (len(z), 1)), z], axis=1)
        return self.sur.stats.normalize_params(theta)

    def ratios(self, s, z, strike: float, tau) -> RatioResult:
        """Vectorized over states: ``s`` shape ``(B,)``, ``z`` shape ``(B, n)``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        tau = np.broadcast_to(np.asarray(tau, dtype=float), s.shape)
        if np.any(tau <= 0):
            raise DomainError("time to maturity must be positive")
        u = self._inputs(z)
        stats, net = self.sur.stats, self.sur.net_spx
        ns, nt = len(self.strikes), len(self.maturities)
        vols = stats.denormalize_ivs(net(u), slice(0, ns * nt)).reshape(-1, ns, nt)
        jac = net.jacobian(u) * stats.ivs_std[: ns * nt, None]
        # d u / d z = 2 / (hi - lo) for the factor coordinates
        dz_scale = 2.0 / (stats.param_hi[5:] - stats.param_lo[5:])
        jac_z = (jac[:, :, 5:] * dz_scale).reshape(-1, ns, nt, jac.shape[-1] - 5)

        k = np.log(strike / s)
        sig, clamped = bilinear(self.strikes, self.maturities, vols, k, tau)
        up, _ = bilinear(self.strikes, self.maturities, vols, k + self.delta_k, tau)
        dn, _ = bilinear(self.strikes, self.maturities, vols, k - self.delta_k, tau)
        dsig_dk = (up - dn) / (2.0 * self.delta_k)
        dsig_dz = np.stack(
            [bilinear(self.strikes, self.maturities, jac_z[..., i], k, tau)[0] for i in range(jac_z.shape[-1])],
            axis=1,
        )
        d_bs, vega = bs_delta_vega(s, strike, tau, sig)
        dp_ds = d_bs + vega * dsig_dk * (-1.0 / s)
        dp_dz = vega[:, None] * dsig_dz
        ratio = dp_ds + self.params.eta / s * dp_dz.sum(axis=1)
        price = bs_price(s, strike, tau, sig)
        return RatioResult(ratio, price, dp_ds, dp_dz, clamped)


def hedge_ratio_mtp(surrogate: Surrogate, params: ModelParams, state: FactorState, strike: float, tau: float):
    """``(ratio, clamped)`` at one state."""
    r = MtpHedger(surrogate, params).ratios([state.s], [state.z], strike, tau)
    return float(r.ratio[0]), bool(r.clamped[0])


# ------------------------------------------------------------------ DML


@dataclass
class DmlModel:
    """DML network with the affine maps between raw states/prices and network coordinates."""

    net: Mlp
    x_lo: np.ndarray
    x_hi: np.ndarray
    price_scale: float
    maturities: np.ndarray = field(default_factory=lambda: DML_MATURITIES.copy())
    strike: float = 1.0

    def to_x(self, X):
        return 2.0 * (np.asarray(X, dtype=float) - self.x_lo) / (self.x_hi - self.x_lo) - 1.0

    def prices_and_grads(self, X):
        """Prices per output maturity ``(B, m)`` and their state gradients ``(B, m, 11)``."""
        x = self.to_x(np.atleast_2d(X))
        out = self.net(x) * self.price_scale
        jac = self.net.jacobian(x) * self.price_scale * (2.0 / (self.x_hi - self.x_lo))
        return out, jac

    def interpolate(self, X, tau):
        """Price and gradient at time to maturity ``tau`` by linear interpolation across outputs."""
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (np.atleast_2d(X).shape[0],))
        if np.any(tau < self.maturities[0] - 1e-12) or np.any(tau > self.maturities[-1] + 1e-12):
            raise DomainError(f"time to maturity outside [{self.maturities[0]}, {self.maturities[-1]}]")
        out, jac = self.prices_and_grads(X)
        i, w, _ = _bracket(self.maturities, tau)
        b = np.arange(len(tau))
        price = (1 - w) * out[b, i] + w * out[b, i + 1]
        grad = (1 - w)[:, None] * jac[b, i] + w[:, None] * jac[b, i + 1]
        return price, grad

    def save(self, path) -> None:
        self.net.meta.update({"x_lo": self.x_lo.tolist(), "x_hi": self.x_hi.tolist(),
                              "price_scale": self.price_scale, "maturities": self.maturities.tolist(),
                              "strike": self.strike})
        self.net.save(path)

    @classmethod
    def load(cls, path) -> "DmlModel":
        net = Mlp.load(path)
        m = net.meta
        return cls(net, np.asarray(m["x_lo"]), np.asarray(m["x_hi"]), float(m["price_scale"]),
                   np.asarray(m["maturities"]), float(m["strike"]))


class DmlHedger:
    def __init__(self, model: DmlModel, params: ModelParams, clamp: bool = False):
        self.model, self.params, self.clamp = model, params, clamp

    def ratios(self, s, z, strike: float, tau) -> RatioResult:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if abs(strike - self.model.strike) > 1e-12 * strike:
            raise DomainError("DML network was trained for a different strike")
        tau = np.broadcast_to(np.asarray(tau, dtype=float), s.shape)
        mats = self.model.maturities
        clamped = (tau < mats[0]) | (tau > mats[-1])
        if self.clamp:
            tau = np.clip(tau, mats[0], mats[-1])
        X = np.concatenate([s[:, None], np.atleast_2d(z)], axis=1)
        price, grad = self.model.interpolate(X, tau)
        dp_ds, dp_dz = grad[:, 0], grad[:, 1:]
        ratio = dp_ds + self.params.eta / s * dp_dz.sum(axis=1)
        return RatioResult(ratio, price, dp_ds, dp_dz, clamped)


def hedge_ratio_dml(model: DmlModel, params: ModelParams, state: FactorState, strike: float, tau: float) -> float:
    """Ratio at one state; ``tau`` must lie within the network's maturities."""
    return float(DmlHedger(model, params).ratios([state.s], [state.z], strike, tau).ratio[0])


def dml_state_box(params, kernel, z0, s0, horizon, *, dt=0.0012, paths=2000, seed=0, q=0.001, pad=0.1):
    """Sampling box for DML inputs: per-coordinate quantiles ``q, 1-q`` of simulated
    states over ``[0, horizon]``, widened by ``pad`` of their range."""
    cfg = SimConfig.from_dt(horizon, dt, paths, seed)
    b = simulate(params, kernel, z0, s0, cfg)
    X = np.concatenate([b.s[..., None], b.z], axis=2).reshape(-1, kernel.n + 1)
    lo, hi = np.quantile(X, q, axis=0), np.quantile(X, 1 - q, axis=0)
    width = np.maximum(hi - lo, 1e-6 * max(1.0, abs(s0)))
    return lo - pad * width, hi + pad * width


def dml_initial_states(params, kernel, z0, s0, horizon, n, x_lo, x_hi, *, dt=0.0012, seed=0, uniform_frac=0.2):
    """Initial states for DML samples: states visited by simulated paths at uniformly drawn
    times in ``[0, horizon]``, with a fraction ``uniform_frac`` drawn uniformly from the box.

    Factor states lie near a thin correlated set; box-uniform draws alone waste most samples
    away from it."""
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 1) | 1))
    cfg = SimConfig.from_dt(horizon, dt, n, seed)
    cols = rng.integers(0, cfg.steps + 1, size=n)
    b = simulate(params, kernel, z0, s0, cfg)
    X0 = np.concatenate([b.s[np.arange(n), cols][:, None], b.z[np.arange(n), cols]], axis=1)
    box = rng.random(n) < uniform_frac
    X0[box] = rng.uniform(x_lo, x_hi, size=(int(box.sum()), len(x_lo)))
    return np.clip(X0, x_lo, x_hi)


def dml_training_set(params, kernel, strike, x_lo, x_hi, n_samples, *, maturities=DML_MATURITIES, dt=0.0012,
                     seed=0, X0=None):
    """Single-path samples: ``(X0, payoffs (N, m), mean pathwise derivative (N, 11))``.

    Initial states are uniform on the box unless ``X0`` is given."""
    if X0 is None:
        rng = np.random.Generator(np.random.Philox(key=(int(seed) << 1) | 1))
        X0 = rng.uniform(x_lo, x_hi, size=(n_samples, len(x_lo)))
    n_samples = len(X0)
    times = time_grid(maturities, dt)
    cfg = SimConfig(times[-1], len(times) - 1, n_samples, seed)
    b = simulate(params, kernel, np.zeros(kernel.n), 1.0, cfg, times=times, keep_brownian=True,
                 z_start=X0[:, 1:], s_start=X0[:, 0])
    sens = pathwise_derivatives(b, params, kernel, strike, [step_index(times, T) for T in maturities])
    Y = np.stack([p.payoff for p in sens], axis=1)
    D = np.mean([p.dpayoff_dx0 for p in sens], axis=0)
    return X0, Y, D


def fit_dml(params, kernel, strike, z0, s0, *, n_samples=50_000, n_val=5_000, dt=0.0012, seed=0,
            cfg: TrainConfig | None = None, box=None, sampling: str = "paths"):
    """Train the DML pricer for one parameter set and strike; returns ``(model, history)``.

    ``sampling`` is ``"paths"`` (states visited from ``(s0, z0)``, see ``dml_initial_states``)
    or ``"uniform"`` (uniform on the box)."""
    if sampling not in ("paths", "uniform"):
        raise ValueError(f"unknown sampling {sampling!r}")
    cfg = cfg or TrainConfig.dml(seed=seed)
    if box is None:
        box = dml_state_box(params, kernel, z0, s0, DML_MATURITIES[-1], dt=dt, seed=seed + 1)
    x_lo, x_hi = (np.asarray(v, dtype=float) for v in box)
    def states(n, sd):
        if sampling == "uniform":
            return None
        return dml_initial_states(params, kernel, z0, s0, DML_MATURITIES[-1], n, x_lo, x_hi, dt=dt, seed=sd)

    X, Y, D = dml_training_set(params, kernel, strike, x_lo, x_hi, n_samples, dt=dt, seed=seed + 2,
                               X0=states(n_samples, seed + 5))
    scale = float(np.std(Y)) or 1.0
    _, hidden, _ = ARCHITECTURES["dml"]
    net = Mlp((kernel.n + 1, *hidden, len(DML_MATURITIES)), seed=seed + 3, arch="dml")
    model = DmlModel(net, x_lo, x_hi, scale, DML_MATURITIES.copy(), strike)
    half = 0.5 * (x_hi - x_lo)
    val = None
    if n_val:
        Xv, Yv, Dv = dml_training_set(params, kernel, strike, x_lo, x_hi, n_val, dt=dt, seed=seed + 4,
                                      X0=states(n_val, seed + 6))
        val = (model.to_x(Xv), Yv / scale, Dv * half / scale)
    hist = train_dml(model.net, model.to_x(X), Y / scale, D * half / scale,
                     *(val if val else (None, None, None)), cfg=cfg)
    model.net.meta["train"] = hist.to_dict()
    return model, hist


# ------------------------------------------------------------------ P&L


class BsFixedHedger:
    """Black-Scholes delta at a fixed volatility."""

    def __init__(self, sigma: float):
        self.sigma = sigma

    def ratios(self, s, z, strike, tau) -> RatioResult:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        tau = np.broadcast_to(np.asarray(tau, dtype=float), s.shape)
        d, _ = bs_delta_vega(s, strike, tau, self.sigma)
        return RatioResult(d, bs_price(s, strike, tau, self.sigma), d, np.zeros((len(s), 0)),
                           np.zeros(len(s), dtype=bool))


@dataclass
class HedgeRun:
    strike: float
    maturity: float
    rebalance_dt: float
    method: str
    times: np.ndarray
    ratios: np.ndarray
    j_delta: np.ndarray
    j_p: np.ndarray
    p0: float
    p0_se: float = float("nan")
    clamped_fraction: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def j(self) -> np.ndarray:
        return self.j_delta - self.j_p

    @property
    def j_final(self) -> np.ndarray:
        return self.j[:, -1]

    def summary(self) -> dict:
        jt = self.j_final
        q = np.quantile(jt / self.p0, [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99])
        return {
            "method": self.method,
            "strike": self.strike,
            "maturity": self.maturity,
            "rebalance_dt": self.rebalance_dt,
            "paths": int(len(jt)),
            "p0": self.p0,
            "p0_se": self.p0_se,
            "mean": float(jt.mean()),
            "std": float(jt.std(ddof=1)) if len(jt) > 1 else 0.0,
            "mean_over_p0": float(jt.mean() / self.p0),
            "std_over_p0": float(jt.std(ddof=1) / self.p0) if len(jt) > 1 else 0.0,
            "quantiles_over_p0": dict(zip(["1%", "5%", "25%", "50%", "75%", "95%", "99%"], map(float, q))),
            "clamped_fraction": self.clamped_fraction,
            **self.meta,
        }

    def write_csv(self, path, per_path: bool = False) -> None:
        """Columns ``t, ratio, J_delta, J_P, J``: path means, or one block per path."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if per_path:
                w.writerow(["path", "t", "ratio", "J_delta", "J_P", "J"])
                for p in range(self.ratios.shape[0]):
                    for k, t in enumerate(self.times):
                        w.writerow([p, repr(float(t)), repr(float(self.ratios[p, k])), repr(float(self.j_delta[p, k])),
                                    repr(float(self.j_p[p, k])), repr(float(self.j[p, k]))])
            else:
                w.writerow(["t", "ratio", "J_delta", "J_P", "J"])
                for k, t in enumerate(self.times):
                    w.writerow([repr(float(t)), repr(float(self.ratios[:, k].mean())),
                                repr(float(self.j_delta[:, k].mean())), repr(float(self.j_p[:, k].mean())),
                                repr(float(self.j[:, k].mean()))])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def hedge_pnl(s_path, z_path, times, hedger, strike, maturity, p0, *, mark_prices=True):
    """P&L of rebalancing at every column of ``s_path`` (shape ``(P, K+1)``, last column at maturity).

    The ratio held over ``[t_k, t_{k+1}]`` uses the state at ``t_k`` only.
    ``J^P`` is marked with the hedger's own price before maturity (when
    ``mark_prices``) and with the payoff at maturity.
    """
    P, K1 = s_path.shape
    ratios = np.zeros((P, K1))
    jd = np.zeros((P, K1))
    jp = np.zeros((P, K1))
    clamped = 0
    for k in range(K1 - 1):
        tau = maturity - times[k]
        r = hedger.ratios(s_path[:, k], z_path[:, k], strike, tau)
        ratios[:, k] = r.ratio
        clamped += int(np.count_nonzero(r.clamped))
        if k > 0 and mark_prices:
            jp[:, k] = r.price - p0
        jd[:, k + 1] = jd[:, k] + r.ratio * (s_path[:, k + 1] - s_path[:, k])
    jp[:, -1] = np.maximum(s_path[:, -1] - strike, 0.0) - p0
    return ratios, jd, jp, clamped / max(1, P * (K1 - 1))


def run_hedge_synthetic(
    params: ModelParams,
    kernel: KernelApprox,
    z0,
    s0: float,
    strike: float,
    T: float,
    rebalance_dt: float,
    n_paths: int,
    hedger,
    *,
    method: str = "",
    sim_dt: float = 0.0012,
    mc_paths: int = 50_000,
    seed: int = 0,
) -> HedgeRun:
    """Hedge a call on the first ``n_paths`` of ``mc_paths`` simulated paths.

    ``P_0`` is the Monte Carlo mean payoff over all ``mc_paths``. Rebalancing
    happens every ``round(rebalance_dt / dt)`` simulation steps and at the last
    step before maturity.
    """
    if rebalance_dt < sim_dt * (1 - 1e-9):
        raise DomainError("rebalance_dt must not be shorter than the simulation step")
    cfg = SimConfig.from_dt(T, sim_dt, max(mc_paths, n_paths), seed)
    every = max(1, int(round(rebalance_dt / cfg.dt)))
    cols = np.unique(np.append(np.arange(0, cfg.steps + 1, every), cfg.steps))
    b = simulate(params, kernel, z0, s0, cfg, record=cols)
    pay = np.maximum(b.s[:, -1] - strike, 0.0)
    p0 = float(pay.mean())
    p0_se = float(pay.std(ddof=1) / math.sqrt(len(pay)))
    times = b.times[cols]
    ratios, jd, jp, cl = hedge_pnl(b.s[:n_paths], b.z[:n_paths], times, hedger, strike, T, p0)
    return HedgeRun(strike, T, rebalance_dt, method or type(hedger).__name__, times, ratios, jd, jp, p0, p0_se, cl,
                    meta={"steps": cfg.steps, "sim_dt": cfg.dt, "rebalance_every": every,
                          "effective_rebalance_dt": every * cfg.dt, "absorbed_fraction": b.absorbed_fraction})


# ------------------------------------------------------------------ market data


def read_market_series(path):
    """CSV with columns ``date, spot, option_price``; returns ``(dates, spot, price)``."""
    import datetime as _dt

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError("empty market series")
    dates = [_dt.date.fromisoformat(r["date"]) for r in rows]
    for d0, d1 in zip(dates[:-1], dates[1:]):
        if d1 <= d0:
            raise DomainError(f"dates out of order at {d1}")
    spot = np.array([float(r["spot"]) for r in rows])
    price = np.array([float(r["option_price"]) if r.get("option_price") not in (None, "") else np.nan
                      for r in rows])
    if np.any(~np.isfinite(spot)) or np.any(~np.isfinite(price)):
        missing = [str(d) for d, a, b in zip(dates, spot, price) if not (np.isfinite(a) and np.isfinite(b))]
        raise GridError(f"gaps in market series on {', '.join(missing)}")
    return dates, spot, price


def trace_factors(params: ModelParams, kernel: KernelApprox, z0, spot, dt: float) -> np.ndarray:
    """Factor path driven by realized returns: ``Z_{k+1} = (Z_k - lambda Z dt + eta dS/S) / (1 + gamma dt)``."""
    z = np.asarray(z0, dtype=float).copy()
    out = [z.copy()]
    for k in range(len(spot) - 1):
        ret = (spot[k + 1] - spot[k]) / spot[k]
        zagg = z @ kernel.c
        z = (z - params.lam * zagg * dt + params.eta * ret) / (1.0 + kernel.gamma * dt)
        out.append(z.copy())
    return np.array(out)


def run_hedge_market(spot, option_price, params: ModelParams, kernel: KernelApprox, z0, strike: float,
                     maturity: float, hedger, *, dt: float = 1.0 / 252, method: str = "",
                     daily=None) -> HedgeRun:
    """Daily hedge of a quoted option along a realized spot series.

    ``maturity`` is the time to expiry at the first date; ``J^P`` uses the quoted
    prices and ``P_0`` the first quote. Results are in currency units; divide
    by ``p0`` for the normalized trace.

    By default the day-one parameters are kept and the factors are traced from
    realized returns. ``daily`` (one ``(params, z)`` pair per date) instead sets
    the hedger's parameters and factor state from a fresh calibration each day.
    """
    spot = np.asarray(spot, dtype=float)
    option_price = np.asarray(option_price, dtype=float)
    if spot.shape != option_price.shape or spot.ndim != 1 or len(spot) < 2:
        raise DomainError("spot and option price series must be equal-length 1-d arrays")
    times = dt * np.arange(len(spot))
    if times[-1] >= maturity + 1e-12:
        raise DomainError("series extends beyond the option expiry")
    if daily is None:
        z = trace_factors(params, kernel, z0, spot, dt)
    else:
        if len(daily) != len(spot):
            raise DomainError("need one calibration per date")
        z = np.array([np.asarray(zk, dtype=float) for _, zk in daily])
    p0 = float(option_price[0])
    own = getattr(hedger, "params", None)
    P = 1
    ratios = np.zeros((P, len(spot)))
    jd = np.zeros((P, len(spot)))
    for k in range(len(spot) - 1):
        if daily is not None:
            hedger.params = daily[k][0]
        r = hedger.ratios(spot[k : k + 1], z[k : k + 1], strike, maturity - times[k])
        ratios[0, k] = r.ratio[0]
        jd[0, k + 1] = jd[0, k] + r.ratio[0] * (spot[k + 1] - spot[k])
    if daily is not None:
        hedger.params = own
    jp = (option_price - p0)[None, :]
    return HedgeRun(strike, maturity, dt, method or type(hedger).__name__, times, ratios, jd, jp, p0,
                    meta={"mode": "market", "recalibrated_daily": daily is not None})


def bs_fixed_from_price(s0: float, strike: float, tau: float, price: float) -> BsFixedHedger:
    """Black-Scholes hedger at the implied volatility of the first quote."""
    return BsFixedHedger(implied_vol(price / s0, 1.0, strike / s0, tau))
