"""Calibration of (omega, z0) to implied-volatility surfaces through trained networks.

Two directions:

* prices-to-model: one forward pass of a network mapping both surfaces to the
  normalized parameters;
* model-to-prices: minimize ``sum_i w_i (sigma_NN,i(theta) - sigma_i)^2`` over
  the parameter box with L-BFGS-B, the gradient coming from the surface
  networks' input gradients.

Optimization runs in the normalized coordinates ``u in [-1, 1]^15``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .dataset import (
    N_FACTORS, N_IVS, N_SPX, OMEGA_HI, OMEGA_LO, Z0_HI, Z0_LO, Corpus, NormalizationStats, arrays,
    fit_normalization,
)
from .errors import DomainError, GridError
from .model import PARAM_NAMES
from .nn import Mlp, TrainConfig, train

THETA_NAMES = tuple(PARAM_NAMES) + tuple(f"z0_{i}" for i in range(1, N_FACTORS + 1))
SPX_SLICE = slice(0, N_SPX)
VIX_SLICE = slice(N_SPX, N_IVS)
BOUND_TOL = 1e-8


@dataclass
class CalibrationResult:
    omega_hat: np.ndarray
    z0_hat: np.ndarray
    objective: float
    rmse_spx: float
    rmse_vix: float
    iterations: int
    converged: bool
    method: str
    active_bounds: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    rmse_total: float = float("nan")

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.omega_hat, self.z0_hat])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "omega": dict(zip(PARAM_NAMES, (float(v) for v in self.omega_hat))),
            "z0": [float(v) for v in self.z0_hat],
            "objective": float(self.objective),
            "rmse_spx": float(self.rmse_spx),
            "rmse_vix": float(self.rmse_vix),
            "rmse_total": float(self.rmse_total),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "active_bounds": list(self.active_bounds),
            "trace": [float(v) for v in self.trace],
            "restarts": self.restarts,
        }


class Surrogate:
    """The two model-to-prices networks plus the normalization they were trained with."""

    def __init__(self, net_spx: Mlp, net_vix: Mlp, stats: NormalizationStats):
        if net_spx.dims[0] != 15 or net_vix.dims[0] != 15:
            raise DomainError("surface networks must take 15 inputs")
        if net_spx.dims[-1] != N_SPX or net_vix.dims[-1] != N_IVS - N_SPX:
            raise DomainError("surface networks must output 60 vols each")
        self.net_spx, self.net_vix, self.stats = net_spx, net_vix, stats

    def surfaces_u(self, u) -> np.ndarray:
        """All 120 vols at normalized parameters ``u`` (shape ``(..., 15)``)."""
        s = self.stats.denormalize_ivs(self.net_spx(u), SPX_SLICE)
        v = self.stats.denormalize_ivs(self.net_vix(u), VIX_SLICE)
        return np.concatenate([s, v], axis=-1)

    def surfaces(self, theta) -> np.ndarray:
        return self.surfaces_u(self.stats.normalize_params(theta))

    def vjp_u(self, u, cot) -> np.ndarray:
        """``cot^T d vols / du`` for one ``u`` and a 120-vector ``cot``."""
        cot = np.asarray(cot, dtype=float)
        g = self.net_spx.input_gradient(u, cot[SPX_SLICE] * self.stats.ivs_std[SPX_SLICE])
        g = g + self.net_vix.input_gradient(u, cot[VIX_SLICE] * self.stats.ivs_std[VIX_SLICE])
        return g

    def surfaces_and_pullback(self, u):
        """Vols at one ``u`` and a function mapping a 120-cotangent to its ``u``-gradient."""
        os_, cs = self.net_spx.forward(np.atleast_2d(u), cache=True)
        ov, cv = self.net_vix.forward(np.atleast_2d(u), cache=True)
        vols = np.concatenate([self.stats.denormalize_ivs(os_[0], SPX_SLICE),
                               self.stats.denormalize_ivs(ov[0], VIX_SLICE)])

        def pullback(cot):
            cot = np.asarray(cot, dtype=float)
            _, gs = self.net_spx.backward(cs, cot[SPX_SLICE] * self.stats.ivs_std[SPX_SLICE])
            _, gv = self.net_vix.backward(cv, cot[VIX_SLICE] * self.stats.ivs_std[VIX_SLICE])
            return gs[0] + gv[0]

        return vols, pullback

    def jacobian_u(self, u) -> np.ndarray:
        """``d vols / du``, shape ``(120, 15)``."""
        js = self.net_spx.jacobian(u) * self.stats.ivs_std[SPX_SLICE, None]
        jv = self.net_vix.jacobian(u) * self.stats.ivs_std[VIX_SLICE, None]
        return np.concatenate([js, jv], axis=0)

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        self.net_spx.save(os.path.join(directory, "mtp-spx"))
        self.net_vix.save(os.path.join(directory, "mtp-vix"))
        with open(os.path.join(directory, "stats.json"), "w") as fh:
            json.dump(self.stats.to_dict(), fh)

    @classmethod
    def load(cls, directory) -> "Surrogate":
        with open(os.path.join(directory, "stats.json")) as fh:
            stats = NormalizationStats.from_dict(json.load(fh))
        return cls(Mlp.load(os.path.join(directory, "mtp-spx")), Mlp.load(os.path.join(directory, "mtp-vix")), stats)


def _targets(ivs_spx, ivs_vix):
    t = np.concatenate([np.asarray(ivs_spx, dtype=float).ravel(), np.asarray(ivs_vix, dtype=float).ravel()])
    if t.size != N_IVS:
        raise GridError(f"expected 60 + 60 vols on the canonical grids, got {t.size}")
    return t


def rmse(resid, valid) -> float:
    r = resid[valid]
    return float(np.sqrt(np.mean(r * r))) if r.size else float("nan")


def _active(u) -> list[str]:
    return [f"{THETA_NAMES[i]}:{'lower' if u[i] < 0 else 'upper'}"
            for i in np.flatnonzero(np.abs(u) >= 1.0 - BOUND_TOL)]


def mtp_objective(surrogate: Surrogate, target, weights=None):
    """``(f, grad)`` callables of the weighted squared mismatch in normalized coordinates.

    Masked (NaN) target entries carry zero weight.
    """
    target = np.asarray(target, dtype=float)
    valid = np.isfinite(target)
    w = np.ones(N_IVS) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), (N_IVS,)).copy()
    w = np.where(valid, w, 0.0)
    t = np.where(valid, target, 0.0)

    def f_and_g(u):
        vols, pullback = surrogate.surfaces_and_pullback(u)
        r = vols - t
        wr = w * r
        return float(np.dot(wr, r)), pullback(2.0 * wr)

    return f_and_g


def calibrate_mtp(
    surrogate: Surrogate,
    ivs_spx,
    ivs_vix,
    weights=None,
    x_init=None,
    *,
    restarts: int = 8,
    screen: int = 64,
    screen_iter: int = 60,
    seed: int = 0,
    maxiter: int = 3000,
    gtol: float = 1e-10,
    ftol: float = 1e-15,
    f_target: float = 1e-14,
) -> CalibrationResult:
    """Model-to-prices calibration with multi-start L-BFGS-B.

    Candidate starts are ``x_init`` (raw parameters; default the box centres) and
    ``screen`` scrambled Sobol points of the normalized box. Each candidate gets
    ``screen_iter`` L-BFGS-B iterations; the ``restarts`` best then run to
    convergence, in order of their screened objective. Once one reaches
    ``f_target`` the rest are skipped, since the objective is non-negative.
    The lowest objective wins, ties going to the earlier start.

    ``ftol`` follows scipy's convention, relative to ``max(|f|, 1)``, so it acts
    as an absolute tolerance when the objective is small.
    """
    target = _targets(ivs_spx, ivs_vix)
    fg = mtp_objective(surrogate, target, weights)
    bounds = [(-1.0, 1.0)] * 15
    cands = [np.zeros(15) if x_init is None else np.clip(surrogate.stats.normalize_params(x_init), -1, 1)]
    if restarts > 1 and screen > 0:
        m = int(np.ceil(np.log2(max(screen, restarts))))
        cands += list(2.0 * qmc.Sobol(15, scramble=True, seed=seed).random_base2(m)[:screen] - 1.0)

    def run(u0, iters, trace=None):
        cb = None if trace is None else (lambda uk: trace.append(fg(uk)[0]))
        return minimize(fg, u0, jac=True, method="L-BFGS-B", bounds=bounds, callback=cb,
                        options={"maxiter": iters, "gtol": gtol, "ftol": ftol, "maxcor": 20})

    if len(cands) > restarts:
        pre = [run(u0, screen_iter) for u0 in cands]
        order = np.argsort([r.fun for r in pre], kind="stable")[:restarts]
        starts = [(int(k), pre[k].x) for k in order]
    else:
        starts = list(enumerate(cands))

    best, summary = None, []
    for k, u0 in starts:
        trace = [fg(u0)[0]]
        res = run(u0, maxiter, trace)
        summary.append({"start": k, "objective": float(res.fun), "iterations": int(res.nit),
                        "converged": bool(res.success), "message": str(res.message)})
        if best is None or res.fun < best[0].fun:
            best = (res, trace)
        if best[0].fun <= f_target:
            break
    res, trace = best
    u = np.clip(res.x, -1.0, 1.0)
    theta = surrogate.stats.denormalize_params(u)
    resid = surrogate.surfaces_u(u) - target
    valid = np.isfinite(target)
    return CalibrationResult(
        omega_hat=theta[:5], z0_hat=theta[5:], objective=float(res.fun),
        rmse_spx=rmse(resid[SPX_SLICE], valid[SPX_SLICE]), rmse_vix=rmse(resid[VIX_SLICE], valid[VIX_SLICE]),
        iterations=int(res.nit), converged=bool(res.success), method="MtP",
        active_bounds=_active(u), trace=trace, restarts=summary, rmse_total=rmse(resid, valid),
    )


def ptm_inputs(stats: NormalizationStats, ivs) -> np.ndarray:
    """Z-scored surfaces for the prices-to-model network; masked points enter at the mean (0)."""
    ivs = np.asarray(ivs, dtype=float)
    z = stats.normalize_ivs(ivs)
    return np.where(np.isfinite(z), z, 0.0)


def calibrate_ptm(net_ptm: Mlp, stats: NormalizationStats, ivs_spx, ivs_vix,
                  surrogate: Surrogate | None = None) -> CalibrationResult:
    """Prices-to-model calibration: one forward pass, denormalized and clipped to the boxes.

    With a ``surrogate`` the reconstruction RMSE of the estimate is reported too.
    """
    if net_ptm.dims[0] != N_IVS or net_ptm.dims[-1] != 15:
        raise DomainError("prices-to-model network must map 120 vols to 15 parameters")
    target = _targets(ivs_spx, ivs_vix)
    u = np.clip(net_ptm(ptm_inputs(stats, target)), -1.0, 1.0)
    theta = stats.denormalize_params(u)
    r_spx = r_vix = r_all = float("nan")
    obj = float("nan")
    if surrogate is not None:
        resid = surrogate.surfaces_u(u) - target
        valid = np.isfinite(target)
        r_spx, r_vix = rmse(resid[SPX_SLICE], valid[SPX_SLICE]), rmse(resid[VIX_SLICE], valid[VIX_SLICE])
        r_all = rmse(resid, valid)
        obj = float(np.sum(resid[valid] ** 2))
    return CalibrationResult(theta[:5], theta[5:], obj, r_spx, r_vix, 0, True, "PtM", _active(u), rmse_total=r_all)


def evaluate_nae(theta_true, theta_hat, lo=None, hi=None) -> np.ndarray:
    """``|theta_hat - theta| / (hi - lo)`` per coordinate (boxes default to the sampling boxes)."""
    lo = np.concatenate([OMEGA_LO, np.full(N_FACTORS, Z0_LO)]) if lo is None else np.asarray(lo, dtype=float)
    hi = np.concatenate([OMEGA_HI, np.full(N_FACTORS, Z0_HI)]) if hi is None else np.asarray(hi, dtype=float)
    return np.abs(np.asarray(theta_hat, dtype=float) - np.asarray(theta_true, dtype=float)) / (hi - lo)


def _split_arrays(corpus: Corpus, stats: NormalizationStats, name: str):
    theta, ivs, mask, _ = arrays(corpus.split(name))
    return stats.normalize_params(theta), np.nan_to_num(stats.normalize_ivs(ivs)), mask


def noise_weights(stats: NormalizationStats, mask, ci, ref: float | None = None, clip=(0.1, 10.0)):
    """Per-point loss weights ``(ref / ci)^2`` in normalized units, clipped to ``clip``.

    ``ref`` defaults to the median normalized half-width; returns ``(weights, ref)``.
    Masked points and points without a finite half-width get weight 0.
    """
    cin = np.asarray(ci, dtype=float) / stats.ivs_std
    ok = np.asarray(mask, dtype=bool) & np.isfinite(cin) & (cin > 0)
    if ref is None:
        ref = float(np.median(cin[ok]))
    w = np.where(ok, np.clip((ref / np.where(ok, cin, 1.0)) ** 2, *clip), 0.0)
    return w, ref


def fit_surrogate(corpus: Corpus, cfg: TrainConfig | None = None, seed: int = 0, weighting: str = "uniform"):
    """Train both model-to-prices networks on a corpus; returns ``(surrogate, histories)``.

    ``weighting="inverse-noise"`` weights each grid point by its inverse Monte Carlo
    variance (``noise_weights``), the efficient least-squares fit for labels whose
    noise differs by orders of magnitude across the grid.
    """
    if weighting not in ("uniform", "inverse-noise"):
        raise ValueError(f"unknown weighting {weighting!r}")
    cfg = cfg or TrainConfig(seed=seed)
    stats = fit_normalization(corpus.split("train"))
    u, y, m = _split_arrays(corpus, stats, "train")
    uv, yv, mv = _split_arrays(corpus, stats, "validation")
    if weighting == "inverse-noise":
        m, ref = noise_weights(stats, m, arrays(corpus.split("train"))[3])
        mv, _ = noise_weights(stats, mv, arrays(corpus.split("validation"))[3], ref)
    nets, hist = {}, {}
    for arch, sl, off in (("mtp-spx", SPX_SLICE, 1), ("mtp-vix", VIX_SLICE, 2)):
        net = Mlp.for_arch(arch, seed=seed + off, meta={"norm_hash": stats.digest(), "weighting": weighting})
        hist[arch] = train(net, u, y[:, sl], m[:, sl], uv, yv[:, sl], mv[:, sl], cfg)
        net.meta["train"] = hist[arch].to_dict()
        nets[arch] = net
    return Surrogate(nets["mtp-spx"], nets["mtp-vix"], stats), hist


def fit_ptm(corpus: Corpus, cfg: TrainConfig | None = None, seed: int = 0):
    """Train the prices-to-model network; returns ``(net, stats, history)``."""
    cfg = cfg or TrainConfig(seed=seed)
    stats = fit_normalization(corpus.split("train"))
    u, y, m = _split_arrays(corpus, stats, "train")
    uv, yv, mv = _split_arrays(corpus, stats, "validation")
    net = Mlp.for_arch("ptm", seed=seed + 3, meta={"norm_hash": stats.digest()})
    hist = train(net, np.where(m, y, 0.0), u, None, np.where(mv, yv, 0.0), uv, None, cfg)
    net.meta["train"] = hist.to_dict()
    return net, stats, hist
