"""Black-Scholes analytics, Monte Carlo SPX/VIX implied-volatility surfaces and VIX from the state.

All prices are undiscounted with zero rates and dividends. Surfaces are quoted
on log-moneyness: SPX strikes relative to ``S_0`` (normalised to 1), VIX
strikes relative to the model VIX future ``F = E[VIX_T]``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.special import ndtr

from .errors import DomainError, GridError, NoSolutionError, NumericalError
from .kernel import KernelApprox
from .model import FactorState, ModelParams, phi
from .simulation import PathBundle, SimConfig, simulate, step_index, time_grid

SPX_STRIKES = np.array(
    [-0.15, -0.12, -0.1, -0.08, -0.05, -0.04, -0.03, -0.02, -0.01, 0.0, 0.01, 0.02, 0.03, 0.04, 0.05]
)
VIX_STRIKES = np.array(
    [-0.1, -0.05, -0.03, -0.01, 0.01, 0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.15, 0.17, 0.19, 0.21]
)
MATURITIES = np.array([0.03, 0.05, 0.07, 0.09])
VIX_WINDOW = 30.0 / 365.0
Z95 = 1.959963984540054

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _ncdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def bs_price(s, k, tau, sigma):
    """Undiscounted Black-Scholes call. Vectorised; ``sigma = 0`` gives intrinsic value."""
    s, k, tau, sigma = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (s, k, tau, sigma)))
    sd = sigma * np.sqrt(tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(s / k) / sd + 0.5 * sd
    out = np.where(sd > 0, s * ndtr(d1) - k * ndtr(d1 - sd), np.maximum(s - k, 0.0))
    return out if out.ndim else float(out)


def bs_put(s, k, tau, sigma):
    return bs_price(s, k, tau, sigma) - (np.asarray(s) - np.asarray(k))


def bs_delta_vega(s, k, tau, sigma):
    """Call delta and vega (per unit of volatility)."""
    s, k, tau, sigma = (np.asarray(x, dtype=float) for x in (s, k, tau, sigma))
    sd = sigma * np.sqrt(tau)
    d1 = np.log(s / k) / sd + 0.5 * sd
    delta = ndtr(d1)
    vega = s * np.sqrt(tau) * np.exp(-0.5 * d1 * d1) * _INV_SQRT2PI
    if delta.ndim == 0:
        return float(delta), float(vega)
    return delta, vega


def _otm_price(price: float, s: float, k: float) -> tuple[float, bool]:
    """Convert a call price to the out-of-the-money option; returns (price, is_put)."""
    if k < s:
        return price - (s - k), True
    return price, False


def _scalar_bs(s, k, tau, sigma, put):
    sd = sigma * math.sqrt(tau)
    d1 = math.log(s / k) / sd + 0.5 * sd
    d2 = d1 - sd
    if put:
        val = k * _ncdf(-d2) - s * _ncdf(-d1)
    else:
        val = s * _ncdf(d1) - k * _ncdf(d2)
    vega = s * math.sqrt(tau) * math.exp(-0.5 * d1 * d1) * _INV_SQRT2PI
    return val, vega


def implied_vol(price: float, s: float, k: float, tau: float, *, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Black-Scholes implied volatility of an undiscounted call price.

    The price is first mapped to the out-of-the-money option through put-call
    parity, then Newton steps are taken inside a shrinking bracket, falling
    back to bisection whenever a step would leave it.
    """
    if not (s > 0 and k > 0 and tau > 0):
        raise DomainError("s, k, tau must be positive")
    intrinsic = max(s - k, 0.0)
    if not (intrinsic < price < s):
        raise NoSolutionError(f"price {price} outside ({intrinsic}, {s})")
    target, put = _otm_price(price, s, k)
    if target <= 0.0:
        raise NoSolutionError("no time value")

    lo, hi = 0.0, 1.0
    while _scalar_bs(s, k, tau, hi, put)[0] < target:
        lo, hi = hi, 2.0 * hi
        if hi > 1e4:
            raise NoSolutionError("implied volatility above 1e4")
    # Start from the Brenner-Subrahmanyam guess, clipped into the bracket.
    sig = min(max(math.sqrt(2.0 * math.pi / tau) * price / s, 0.5 * hi), hi) if lo == 0.0 else 0.5 * (lo + hi)
    # Relative to the OTM price so deep wings keep full volatility accuracy.
    abs_tol = tol * target
    for _ in range(max_iter):
        val, vega = _scalar_bs(s, k, tau, sig, put)
        diff = val - target
        if abs(diff) <= abs_tol:
            return sig
        if diff > 0:
            hi = sig
        else:
            lo = sig
        step = diff / vega if vega > 0 else math.inf
        new = sig - step
        if not (lo < new < hi):
            new = 0.5 * (lo + hi)
        if hi - lo < 1e-15 * max(1.0, hi):
            return new
        sig = new
    raise NumericalError("implied volatility did not converge")


# --------------------------------------------------------------------- surfaces


@dataclass
class IVSurface:
    """Implied volatilities on a (log-moneyness x maturity) grid, flattened strike-major."""

    asset_class: str
    strikes_logm: np.ndarray
    maturities: np.ndarray
    vols: np.ndarray
    ci_half: np.ndarray | None = None
    mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.strikes_logm = np.asarray(self.strikes_logm, dtype=float)
        self.maturities = np.asarray(self.maturities, dtype=float)
        shape = (len(self.strikes_logm), len(self.maturities))
        self.vols = np.asarray(self.vols, dtype=float).reshape(shape)
        if self.ci_half is not None:
            self.ci_half = np.asarray(self.ci_half, dtype=float).reshape(shape)
        if self.mask is None:
            self.mask = np.isfinite(self.vols)
        else:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(shape)

    @property
    def m(self) -> int:
        return self.vols.size

    def flat(self) -> np.ndarray:
        """Row ``i * n_maturities + j`` holds strike ``i``, maturity ``j``."""
        return self.vols.ravel()

    @classmethod
    def from_flat(cls, asset_class, vec, strikes=None, maturities=None, **kw) -> "IVSurface":
        strikes = default_strikes(asset_class) if strikes is None else strikes
        maturities = MATURITIES if maturities is None else maturities
        vec = np.asarray(vec, dtype=float)
        if vec.size != len(strikes) * len(maturities):
            raise GridError(f"expected {len(strikes) * len(maturities)} values, got {vec.size}")
        return cls(asset_class, strikes, maturities, vec, **kw)

    def to_rows(self):
        ci = self.ci_half if self.ci_half is not None else np.full_like(self.vols, np.nan)
        for i, k in enumerate(self.strikes_logm):
            for j, t in enumerate(self.maturities):
                v = self.vols[i, j] if self.mask[i, j] else float("nan")
                yield (self.asset_class, float(k), float(t), float(v), float(ci[i, j]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["asset_class", "logm", "maturity", "vol", "ci_half"])
            for row in self.to_rows():
                w.writerow([row[0]] + [repr(x) for x in row[1:]])

    @classmethod
    def from_csv(cls, path) -> "IVSurface":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise GridError("empty surface file")
        asset = rows[0]["asset_class"]
        ks = sorted({float(r["logm"]) for r in rows})
        ts = sorted({float(r["maturity"]) for r in rows})
        vols = np.full((len(ks), len(ts)), np.nan)
        ci = np.full_like(vols, np.nan)
        for r in rows:
            i, j = ks.index(float(r["logm"])), ts.index(float(r["maturity"]))
            vols[i, j] = float(r["vol"])
            if r.get("ci_half") not in (None, ""):
                ci[i, j] = float(r["ci_half"])
        return cls(asset, ks, ts, vols, ci_half=ci, mask=np.isfinite(vols))

    def to_json(self) -> dict:
        return {
            "asset_class": self.asset_class,
            "order": "strike-major",
            "strikes_logm": self.strikes_logm.tolist(),
            "maturities": self.maturities.tolist(),
            "vols": [None if not ok else float(v) for v, ok in zip(self.vols.ravel(), self.mask.ravel())],
            "ci_half": None if self.ci_half is None else [float(x) for x in self.ci_half.ravel()],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "IVSurface":
        vols = np.array([np.nan if v is None else v for v in d["vols"]], dtype=float)
        ci = None if d.get("ci_half") is None else np.asarray(d["ci_half"], dtype=float)
        return cls(d["asset_class"], d["strikes_logm"], d["maturities"], vols, ci_half=ci,
                   mask=np.isfinite(vols), meta=d.get("meta", {}))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def default_strikes(asset_class: str) -> np.ndarray:
    if asset_class.upper() == "SPX":
        return SPX_STRIKES
    if asset_class.upper() == "VIX":
        return VIX_STRIKES
    raise GridError(f"unknown asset class {asset_class!r}")


def _pair_means(x: np.ndarray, antithetic: bool) -> np.ndarray:
    if antithetic and x.shape[0] >= 2:
        m = x.shape[0] // 2 * 2
        return 0.5 * (x[:m:2] + x[1:m:2])
    return x


def smile_from_terminal(
    values: np.ndarray,
    forward: float,
    strikes_logm,
    tau: float,
    antithetic: bool = False,
    proxy: np.ndarray | None = None,
    proxy_vol: float | None = None,
):
    """Implied vols, 95% vol half-widths and validity for calls on simulated terminal values.

    Each strike is priced through its out-of-the-money payoff and converted to
    a call by parity against ``forward``, which must be the sample mean of
    ``values`` (or their known mean) for the parity to be exact.

    ``proxy`` holds lognormal terminal values with volatility ``proxy_vol``
    driven by the same Brownian motion; its payoff, whose mean is known in
    closed form, is used as a control variate with a regression coefficient.
    The half-width is NaN where the samples have zero variance.
    """
    ks = np.asarray(strikes_logm, dtype=float)
    vols = np.full(len(ks), np.nan)
    ci = np.full(len(ks), np.nan)
    ok = np.zeros(len(ks), dtype=bool)
    for i, lk in enumerate(ks):
        K = forward * math.exp(lk)
        put = K < forward
        pay = np.maximum(K - values, 0.0) if put else np.maximum(values - K, 0.0)
        samples = _pair_means(pay, antithetic)
        if proxy is not None:
            xpay = np.maximum(K - proxy, 0.0) if put else np.maximum(proxy - K, 0.0)
            xs = _pair_means(xpay, antithetic)
            exact = float(bs_put(forward, K, tau, proxy_vol) if put else bs_price(forward, K, tau, proxy_vol))
            xc = xs - xs.mean()
            var_x = float(xc @ xc)
            # a fixed coefficient keeps the estimator unbiased when none can be fitted
            beta = float((samples - samples.mean()) @ xc / var_x) if var_x > 0 else 1.0
            samples = samples - beta * (xs - exact)
        otm = float(samples.mean())
        se = float(samples.std(ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else float("nan")
        call = otm + (forward - K) if put else otm
        try:
            sig = implied_vol(call, forward, K, tau)
        except (NoSolutionError, NumericalError):
            continue
        _, vega = bs_delta_vega(forward, K, tau, sig)
        vols[i] = sig
        # zero sample variance (no path reaches the strike): error not estimable
        ci[i] = float("nan") if not se > 0 else Z95 * se / vega if vega > 0 else float("inf")
        ok[i] = True
    return vols, ci, ok


def _check_grid(cfg: SimConfig, maturities) -> None:
    if max(maturities) > cfg.horizon + 1e-12:
        raise DomainError("grid maturities exceed the simulation horizon")


def surface_times(cfg: SimConfig, maturities) -> np.ndarray:
    """Simulation grid hitting every maturity with steps at most ``cfg.dt``."""
    return time_grid(maturities, cfg.dt)


def spx_surface_from_bundle(
    bundle: PathBundle, strikes=None, maturities=None, antithetic=False, control_variate=True
) -> IVSurface:
    """SPX smiles from a bundle that recorded every grid maturity.

    With ``control_variate`` the payoff of ``exp(sigma0 W_T - sigma0^2 T / 2)``,
    ``sigma0`` the initial spot volatility, serves as a control variate.
    """
    strikes = SPX_STRIKES if strikes is None else np.asarray(strikes, dtype=float)
    maturities = MATURITIES if maturities is None else np.asarray(maturities, dtype=float)
    c0 = bundle.column(0)
    s0 = float(bundle.s[0, c0])
    sig0 = float(np.sqrt(bundle.v[0, c0]))
    use_cv = control_variate and bundle.w is not None
    vols = np.full((len(strikes), len(maturities)), np.nan)
    ci = np.full_like(vols, np.nan)
    ok = np.zeros_like(vols, dtype=bool)
    for j, T in enumerate(maturities):
        col = bundle.column(step_index(bundle.times, T))
        sT = bundle.s[:, col] / s0
        proxy = np.exp(sig0 * bundle.w[:, col] - 0.5 * sig0**2 * T) if use_cv else None
        vols[:, j], ci[:, j], ok[:, j] = smile_from_terminal(
            sT, 1.0, strikes, T, antithetic, proxy=proxy, proxy_vol=sig0
        )
    return IVSurface("SPX", strikes, maturities, vols, ci_half=ci, mask=ok,
                     meta={"paths": bundle.paths, "absorbed_fraction": bundle.absorbed_fraction,
                           "control_variate": bool(use_cv)})


def price_spx_surface(
    params: ModelParams, kernel: KernelApprox, z0, cfg: SimConfig, grid=None, control_variate=True
) -> IVSurface:
    """Monte Carlo SPX implied-volatility surface (``S_0 = 1``).

    Calls are priced as ``E[(S_T - e^k)+]`` through the out-of-the-money leg
    and parity ``E[S_T] = 1``; ``ci_half`` maps the 95% price interval through vega.
    Grid points whose price has no implied volatility are masked.
    """
    strikes, maturities = grid if grid is not None else (SPX_STRIKES, MATURITIES)
    _check_grid(cfg, maturities)
    times = surface_times(cfg, maturities)
    rec = [0] + [step_index(times, T) for T in maturities]
    bundle = simulate(params, kernel, z0, 1.0, cfg, times=times, record=rec)
    return spx_surface_from_bundle(bundle, strikes, maturities, cfg.antithetic, control_variate)


# -------------------------------------------------------------------------- VIX


class VixMomentMap:
    """``VIX_t^2`` as an exact quadratic form in the factor state.

    The factor drift is linear and the squared diffusion ``eta^2 V`` is
    quadratic in the state, so first and second conditional moments
    ``m = E[Z]``, ``P = E[Z Z^T]`` solve the closed linear system::

        m' = A m,                       A = -diag(gamma) - lambda 1 c^T
        P' = A P + P A^T + eta^2 E[V] 1 1^T
        E[V] = a (c^T P c - 2 b c^T m + b^2) + c

    Appending ``I' = E[V]`` and exponentiating over the window gives
    ``int_0^Delta E[V_s] ds = r^T (z, vec(z z^T), 1)``, so the moment equations
    are solved once per parameter set. The variance cap is ignored here.
    """

    def __init__(self, params: ModelParams, kernel: KernelApprox, delta: float = VIX_WINDOW):
        if not delta > 0:
            raise DomainError("delta must be positive")
        self.params, self.kernel, self.delta = params, kernel, delta
        n = kernel.n
        c, a, b = kernel.c, params.a, params.b
        A = -np.diag(kernel.gamma) - params.lam * np.outer(np.ones(n), c)
        I = np.eye(n)
        dim = n + n * n + 2
        B = np.zeros((dim, dim))
        ev = np.zeros(dim - 1)
        ev[:n] = -2.0 * a * b * c
        ev[n : n + n * n] = a * np.outer(c, c).ravel()
        ev[-1] = a * b * b + params.c
        B[:n, :n] = A
        B[n : n + n * n, n : n + n * n] = np.kron(A, I) + np.kron(I, A)
        B[n : n + n * n, : dim - 1] += params.eta**2 * ev[None, :]
        B[-1, : dim - 1] = ev
        row = expm(B * delta)[-1, :-1]
        if not np.all(np.isfinite(row)):
            raise NumericalError("moment system exponential is not finite")
        self._lin = row[:n]
        Q = row[n : n + n * n].reshape(n, n)
        self._quad = 0.5 * (Q + Q.T)
        self._const = row[-1]

    def integrated_variance(self, z) -> np.ndarray:
        """``int_0^Delta E[V_{t+s} | Z_t = z] ds`` for states ``z`` of shape ``(..., n)``."""
        z = np.asarray(z, dtype=float)
        return np.einsum("...i,ij,...j->...", z, self._quad, z) + z @ self._lin + self._const

    def vix_squared(self, z) -> np.ndarray:
        out = 1e4 / self.delta * self.integrated_variance(z)
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite VIX")
        return out

    def vix(self, z) -> np.ndarray:
        return np.sqrt(self.vix_squared(z))


def vix_squared_from_state(params: ModelParams, kernel: KernelApprox, state, delta30: float = VIX_WINDOW) -> float:
    """``(100^2 / Delta) int_0^Delta E[V_{t+s} | X_t] ds`` for one state."""
    z = state.z if isinstance(state, FactorState) else np.asarray(state, dtype=float)
    if z.shape != (kernel.n,):
        raise DomainError("state does not match kernel")
    return float(VixMomentMap(params, kernel, delta30).vix_squared(z))


def vix_squared_nested_mc(
    params: ModelParams,
    kernel: KernelApprox,
    z,
    *,
    delta30: float = VIX_WINDOW,
    paths: int = 4000,
    steps: int = 2000,
    seed: int = 0,
    estimator: str = "integrated",
):
    """Nested Monte Carlo VIX^2 from one state; returns ``(estimate, 95% half-width)``.

    Inner paths start at ``z`` and run the simulation scheme over the window.
    ``estimator="logret"`` averages ``-2 log(S_Delta / S_0)`` with the zero-mean
    control variate ``2 sum sqrt(V_k) dW_k``; ``"integrated"`` averages the
    Riemann sum of ``V``. Test oracle only; far slower than ``VixMomentMap``.
    """
    z = np.asarray(z, dtype=float)
    dt = delta30 / steps
    c, g = kernel.c, kernel.gamma
    zz = np.tile(z, (paths, 1))
    acc = np.zeros(paths)
    rng = np.random.Generator(np.random.Philox(key=seed))
    for _ in range(steps):
        zagg = zz @ c
        v = params.a * phi(zagg - params.b, params.cap) + params.c
        dw = rng.standard_normal(paths) * math.sqrt(dt)
        x = np.sqrt(v) * dw
        if estimator == "logret":
            acc += -2.0 * np.log1p(x) + 2.0 * x
        elif estimator == "integrated":
            acc += v * dt
        else:
            raise ValueError(f"unknown estimator {estimator!r}")
        zz = (zz - params.lam * dt * zagg[:, None] + params.eta * x[:, None]) / (1.0 + g * dt)
    vals = 1e4 / delta30 * acc
    return float(vals.mean()), float(Z95 * vals.std(ddof=1) / math.sqrt(paths))


def vix_surface_from_bundle(
    bundle: PathBundle, vmap: VixMomentMap, strikes=None, maturities=None, antithetic=False
) -> IVSurface:
    strikes = VIX_STRIKES if strikes is None else np.asarray(strikes, dtype=float)
    maturities = MATURITIES if maturities is None else np.asarray(maturities, dtype=float)
    vols = np.full((len(strikes), len(maturities)), np.nan)
    ci = np.full_like(vols, np.nan)
    ok = np.zeros_like(vols, dtype=bool)
    futures = []
    for j, T in enumerate(maturities):
        _, zT = bundle.at_time(T)
        vix = vmap.vix(zT)
        F = float(vix.mean())
        futures.append(F)
        vols[:, j], ci[:, j], ok[:, j] = smile_from_terminal(vix, F, strikes, T, antithetic)
    return IVSurface("VIX", strikes, maturities, vols, ci_half=ci, mask=ok,
                     meta={"futures": futures, "moneyness": "log(K/F), F = mean VIX_T",
                           "delta_days": vmap.delta * 365.0, "paths": bundle.paths})


def price_vix_surface(params: ModelParams, kernel: KernelApprox, z0, cfg: SimConfig, grid=None,
                      delta30: float = VIX_WINDOW) -> IVSurface:
    """Monte Carlo VIX implied-volatility surface.

    Outer paths are simulated to each maturity; ``VIX_T`` per path comes from
    ``VixMomentMap``; strikes are ``F e^k`` with ``F`` the sample VIX future.
    """
    strikes, maturities = grid if grid is not None else (VIX_STRIKES, MATURITIES)
    _check_grid(cfg, maturities)
    times = surface_times(cfg, maturities)
    rec = [0] + [step_index(times, T) for T in maturities]
    bundle = simulate(params, kernel, z0, 1.0, cfg, times=times, record=rec)
    return vix_surface_from_bundle(bundle, VixMomentMap(params, kernel, delta30), strikes, maturities, cfg.antithetic)


def price_surfaces(params: ModelParams, kernel: KernelApprox, z0, cfg: SimConfig,
                   delta30: float = VIX_WINDOW) -> tuple[IVSurface, IVSurface]:
    """SPX and VIX surfaces on the default grids from one shared set of paths."""
    _check_grid(cfg, MATURITIES)
    times = surface_times(cfg, MATURITIES)
    rec = [0] + [step_index(times, T) for T in MATURITIES]
    bundle = simulate(params, kernel, z0, 1.0, cfg, times=times, record=rec)
    spx = spx_surface_from_bundle(bundle, antithetic=cfg.antithetic)
    vix = vix_surface_from_bundle(bundle, VixMomentMap(params, kernel, delta30), antithetic=cfg.antithetic)
    return spx, vix


__all__ = [
    "IVSurface", "VixMomentMap", "bs_price", "bs_delta_vega", "implied_vol", "price_spx_surface",
    "price_vix_surface", "price_surfaces", "vix_squared_from_state", "vix_squared_nested_mc",
    "SPX_STRIKES", "VIX_STRIKES", "MATURITIES",
]
