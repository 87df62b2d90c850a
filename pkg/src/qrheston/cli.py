"""Command-line entry point: ``qrh <command> [options]``.

Every command accepts ``--config FILE`` (INI sections matching ``RunConfig``)
and ``--seed``; explicit flags override the file. Artifacts embed a provenance
record (config hash, seed, package version). Failures print a JSON error record
on stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import glob
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .errors import GridError

# ------------------------------------------------------------------ config


@dataclass
class KernelSection:
    alpha: float = 0.51
    n: int = 10
    x_n: str = "auto"
    horizon: float = 0.1


@dataclass
class SimSection:
    dt: float = 0.0012
    paths: int = 50_000
    seed: int = 0
    antithetic: bool = False


@dataclass
class DatasetSection:
    count: int = 2_500
    splits: str = "2000,300,200"
    paths: int = 10_000
    workers: int = 1


@dataclass
class TrainSection:
    preset: str = "standard"
    weighting: str = "uniform"
    epochs: int = 150
    patience: int = 5
    batch: int = 128
    lr0: float = 0.001
    lr_halving_every: int = 10
    dml_epochs: int = 20
    dml_lr_halving_every: int = 5
    dml_samples: int = 50_000
    dml_weight: float = 1.0


@dataclass
class CalibSection:
    restarts: int = 8
    maxiter: int = 500
    weights: str = ""


@dataclass
class HedgeSection:
    strike: float = 98.0
    maturity: float = 0.08
    s0: float = 100.0
    rebalance_dt: float = 0.0012
    paths: int = 5_000
    mc_paths: int = 50_000


@dataclass
class RunConfig:
    kernel: KernelSection = field(default_factory=KernelSection)
    sim: SimSection = field(default_factory=SimSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    calib: CalibSection = field(default_factory=CalibSection)
    hedge: HedgeSection = field(default_factory=HedgeSection)
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class ConfigError(ValueError):
    pass


def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    return typ(value)


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for name in parser.sections():
        section = getattr(cfg, name, None)
        if section is None or not hasattr(section, "__dataclass_fields__"):
            raise ConfigError(f"unknown config section [{name}]")
        types = {f.name: type(getattr(section, f.name)) for f in fields(section)}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                setattr(section, key, _coerce(raw, types[key]))
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}.{key}: {raw!r}") from exc
    return cfg


def _override(cfg: RunConfig, args, mapping):
    for flag, (section, key) in mapping.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(getattr(cfg, section), key, val)


def provenance(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.sim.seed, "version": __version__, "config": cfg.to_dict(),
            **extra}


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)


def _require(path, what="file"):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ------------------------------------------------------------------ helpers


def _kernel(cfg: RunConfig):
    from .kernel import build_kernel, fit_kernel

    k = cfg.kernel
    if k.x_n == "auto":
        return fit_kernel(k.alpha, k.n, k.horizon)
    return build_kernel(k.alpha, k.n, float(k.x_n), horizon=k.horizon)


def _params(path):
    from .model import load_params

    params, z0 = load_params(_require(path, "parameter file"))
    return params, z0


# ------------------------------------------------------------------ commands


def cmd_kernel_fit(args, cfg):
    from .kernel import grid_l2_error, l2_error

    k = _kernel(cfg)
    out = k.to_dict() | {
        "grid_l2_error": grid_l2_error(k, cfg.kernel.horizon),
        "l2_error": l2_error(k, cfg.kernel.horizon),
        "provenance": provenance(cfg),
    }
    _write_json(args.out, out)


def cmd_simulate(args, cfg):
    from .simulation import SimConfig, simulate, write_paths, write_paths_csv

    params, z0 = _params(args.params)
    k = _kernel(cfg)
    z0 = np.zeros(k.n) if z0 is None else z0
    sc = SimConfig.from_dt(args.horizon, cfg.sim.dt, cfg.sim.paths, cfg.sim.seed, cfg.sim.antithetic)
    b = simulate(params, k, z0, args.s0, sc)
    os.makedirs(args.out, exist_ok=True)
    write_paths(os.path.join(args.out, "paths.bin"), b)
    if args.csv:
        write_paths_csv(os.path.join(args.out, "paths.csv"), b)
    _write_json(os.path.join(args.out, "run.json"), {
        "steps": sc.steps, "dt": sc.dt, "paths": sc.paths, "absorbed_fraction": b.absorbed_fraction,
        "params": params.to_dict(z0), "provenance": provenance(cfg)})


def cmd_price(args, cfg):
    from .model import ModelParams
    from .pricing import MATURITIES, price_spx_surface, price_surfaces, price_vix_surface
    from .simulation import SimConfig

    k = _kernel(cfg)
    if args.flat_check:
        sigma = args.sigma
        params, z0 = ModelParams(0.0, 1.0, 0.0, 0.0, sigma * sigma), np.zeros(k.n)
    else:
        if args.params is None:
            raise ValueError("--params is required unless --flat-check is given")
        params, z0 = _params(args.params)
        z0 = np.zeros(k.n) if z0 is None else z0
    sc = SimConfig.from_dt(float(MATURITIES[-1]), cfg.sim.dt, cfg.sim.paths, cfg.sim.seed, cfg.sim.antithetic)
    if args.asset == "both":
        surfaces = price_surfaces(params, k, z0, sc)
    elif args.asset == "spx":
        surfaces = (price_spx_surface(params, k, z0, sc),)
    else:
        surfaces = (price_vix_surface(params, k, z0, sc),)
    os.makedirs(args.out, exist_ok=True)
    report = {"params": params.to_dict(z0), "provenance": provenance(cfg), "surfaces": []}
    for s in surfaces:
        tag = s.asset_class.lower()
        s.to_csv(os.path.join(args.out, f"{tag}.csv"))
        s.meta["provenance"] = provenance(cfg)
        s.save_json(os.path.join(args.out, f"{tag}.json"))
        entry = {"asset_class": s.asset_class, "masked": int((~s.mask).sum())}
        if args.flat_check and s.asset_class == "SPX":
            err = np.abs(s.vols - args.sigma)
            tol = np.fmax(s.ci_half, 0.002)
            ok = s.mask & (err <= tol)
            entry |= {"sigma": args.sigma, "max_abs_error": float(np.nanmax(err)),
                      "points_within_tolerance": int(ok.sum()), "points": int(s.m), "flat": bool(ok.all())}
        report["surfaces"].append(entry)
    _write_json(os.path.join(args.out, "report.json"), report)
    if args.flat_check:
        _write_json("-", report["surfaces"])


def cmd_gen_dataset(args, cfg):
    from .dataset import export_csv, generate_corpus
    from .simulation import SimConfig
    from .pricing import MATURITIES

    k = _kernel(cfg)
    sc = SimConfig.from_dt(float(MATURITIES[-1]), cfg.sim.dt, cfg.dataset.paths, 0, cfg.sim.antithetic)
    splits = None
    count = args.count
    if count is None:
        splits = tuple(int(x) for x in cfg.dataset.splits.split(","))
        if len(splits) != 3:
            raise ValueError("splits must list train,validation,test sizes")

    def progress(i, n):
        if args.progress and (i % 50 == 0 or i == n):
            print(f"{i}/{n}", file=sys.stderr, flush=True)

    path = generate_corpus(count, sc, args.out, kernel=k, master_seed=cfg.sim.seed, splits=splits,
                           workers=min(cfg.dataset.workers, cfg.threads) if cfg.threads > 0 else cfg.dataset.workers,
                           progress=progress)
    if args.csv:
        export_csv(path, os.path.join(args.out, "corpus.csv"))
    _write_json(os.path.join(args.out, "provenance.json"), provenance(cfg))


def _train_cfg(cfg: RunConfig, dml=False):
    """``preset = desk`` replaces the schedule fields by ``TrainConfig.desk``."""
    from .nn import TrainConfig

    t = cfg.train
    if dml:
        return TrainConfig.dml(epochs=t.dml_epochs, lr_halving_every=t.dml_lr_halving_every, batch=t.batch,
                               lr0=t.lr0, seed=cfg.sim.seed, dml_weight=t.dml_weight)
    if t.preset == "desk":
        return TrainConfig.desk(seed=cfg.sim.seed)
    if t.preset != "standard":
        raise ValueError(f"unknown training preset {t.preset!r}")
    return TrainConfig(epochs=t.epochs, patience=t.patience, batch=t.batch, lr0=t.lr0,
                       lr_halving_every=t.lr_halving_every, seed=cfg.sim.seed)


def cmd_train(args, cfg):
    from .calibration import fit_ptm, fit_surrogate
    from .dataset import load_corpus

    os.makedirs(args.out, exist_ok=True)
    prov = provenance(cfg)
    if args.arch == "dml":
        from .hedging import fit_dml

        params, z0 = _params(args.params)
        k = _kernel(cfg)
        z0 = np.zeros(k.n) if z0 is None else z0
        model, hist = fit_dml(params, k, cfg.hedge.strike, z0, cfg.hedge.s0, n_samples=cfg.train.dml_samples,
                              dt=cfg.sim.dt, seed=cfg.sim.seed, cfg=_train_cfg(cfg, dml=True))
        model.net.meta["provenance"] = prov
        model.save(os.path.join(args.out, "dml"))
        _write_json(os.path.join(args.out, "dml-history.json"), hist.to_dict())
        return
    corpus = load_corpus(_require(args.corpus, "corpus"))
    if args.arch == "ptm":
        net, stats, hist = fit_ptm(corpus, _train_cfg(cfg), seed=cfg.sim.seed)
        net.meta["provenance"] = prov
        net.save(os.path.join(args.out, "ptm"))
        with open(os.path.join(args.out, "stats.json"), "w") as fh:
            json.dump(stats.to_dict(), fh)
        _write_json(os.path.join(args.out, "ptm-history.json"), hist.to_dict())
        return
    sur, hist = fit_surrogate(corpus, _train_cfg(cfg), seed=cfg.sim.seed, weighting=cfg.train.weighting)
    sur.net_spx.meta["provenance"] = prov
    sur.net_vix.meta["provenance"] = prov
    sur.save(args.out)
    _write_json(os.path.join(args.out, "mtp-history.json"), {a: h.to_dict() for a, h in hist.items()})


def _load_surface(path, asset):
    from .pricing import IVSurface, default_strikes, MATURITIES

    s = IVSurface.from_csv(_require(path, f"{asset} surface"))
    if not (np.allclose(s.strikes_logm, default_strikes(asset)) and np.allclose(s.maturities, MATURITIES)):
        raise GridError(f"{path}: surface is not on the canonical {asset.upper()} grid")
    return np.where(s.mask, s.vols, np.nan).ravel()


def _weights(cfg):
    w = cfg.calib.weights.strip()
    if not w:
        return None
    vals = np.array([float(x) for x in w.split(",")])
    return vals if vals.size == 120 else np.repeat(vals, 60) if vals.size == 2 else None


def cmd_calibrate(args, cfg):
    from .calibration import Surrogate, calibrate_mtp, calibrate_ptm
    from .dataset import NormalizationStats
    from .nn import Mlp

    nets = _require(args.nets, "network directory")
    sur = Surrogate.load(nets) if os.path.exists(os.path.join(nets, "mtp-spx.json")) else None

    def run(spx, vix):
        if args.method == "mtp":
            if sur is None:
                raise FileNotFoundError(f"no model-to-prices networks in {nets}")
            return calibrate_mtp(sur, spx, vix, _weights(cfg), restarts=cfg.calib.restarts, seed=cfg.sim.seed,
                                 maxiter=cfg.calib.maxiter)
        with open(_require(os.path.join(nets, "stats.json"))) as fh:
            stats = NormalizationStats.from_dict(json.load(fh))
        return calibrate_ptm(Mlp.load(_require(os.path.join(nets, "ptm.json"))), stats, spx, vix, sur)

    if args.batch:
        files = sorted(glob.glob(os.path.join(_require(args.batch, "batch directory"), "*_spx.csv")))
        if not files:
            raise FileNotFoundError(f"no *_spx.csv surfaces in {args.batch}")
        rows = []
        for f in files:
            tag = os.path.basename(f)[: -len("_spx.csv")]
            res = run(_load_surface(f, "spx"), _load_surface(f[: -len("_spx.csv")] + "_vix.csv", "vix"))
            rows.append([tag, repr(res.rmse_spx), repr(res.rmse_vix), repr(res.objective), int(res.converged)])
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "rmse.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "rmse_spx", "rmse_vix", "objective", "converged"])
            w.writerows(rows)
        _write_json(os.path.join(args.out, "provenance.json"), provenance(cfg))
        return
    if args.spx is None or args.vix is None:
        raise ValueError("--spx and --vix are required (or --batch)")
    res = run(_load_surface(args.spx, "spx"), _load_surface(args.vix, "vix"))
    _write_json(args.out, res.to_dict() | {"provenance": provenance(cfg)})


def _daily_calibrations(directory, dates, surrogate, cfg):
    """MtP calibration of ``<date>_spx.csv`` / ``<date>_vix.csv`` for every date of the series."""
    from .calibration import calibrate_mtp
    from .model import ModelParams

    out = []
    for d in dates:
        base = os.path.join(_require(directory, "surface directory"), str(d))
        res = calibrate_mtp(surrogate, _load_surface(base + "_spx.csv", "spx"), _load_surface(base + "_vix.csv", "vix"),
                            _weights(cfg), restarts=cfg.calib.restarts, seed=cfg.sim.seed, maxiter=cfg.calib.maxiter)
        out.append((ModelParams.from_omega(res.omega_hat), res.z0_hat))
    return out


def cmd_hedge(args, cfg):
    from .calibration import Surrogate
    from .hedging import (DmlHedger, DmlModel, MtpHedger, bs_fixed_from_price, read_market_series,
                          run_hedge_market, run_hedge_synthetic)
    from .simulation import SimConfig, simulate

    params, z0 = _params(args.params)
    k = _kernel(cfg)
    z0 = np.zeros(k.n) if z0 is None else z0
    h = cfg.hedge
    market = args.mode == "market"
    if market:
        dates, spot, price = read_market_series(_require(args.series, "market series"))
    if args.method == "mtp":
        hg = MtpHedger(Surrogate.load(_require(args.nets, "network directory")), params)
    elif args.method == "dml":
        hg = DmlHedger(DmlModel.load(_require(args.dml, "DML network")), params, clamp=True)
    elif market:
        hg = bs_fixed_from_price(spot[0], h.strike, h.maturity, price[0])
    else:
        # fixed volatility implied by the model price at inception
        sc = SimConfig.from_dt(h.maturity, cfg.sim.dt, h.mc_paths, cfg.sim.seed)
        b = simulate(params, k, z0, h.s0, sc, record=[0, sc.steps])
        hg = bs_fixed_from_price(h.s0, h.strike, h.maturity, float(np.maximum(b.s[:, -1] - h.strike, 0).mean()))

    os.makedirs(args.out, exist_ok=True)
    if market:
        daily = None
        if args.recalibrate_daily:
            if args.method != "mtp":
                raise ValueError("--recalibrate-daily needs --method mtp")
            daily = _daily_calibrations(args.recalibrate_daily, dates, hg.sur, cfg)
        run = run_hedge_market(spot, price, params, k, z0, h.strike, h.maturity, hg, method=args.method,
                               daily=daily)
        run.meta["dates"] = [str(d) for d in dates]
    else:
        run = run_hedge_synthetic(params, k, z0, h.s0, h.strike, h.maturity, h.rebalance_dt, h.paths, hg,
                                  method=args.method, sim_dt=cfg.sim.dt, mc_paths=h.mc_paths, seed=cfg.sim.seed)
    run.write_csv(os.path.join(args.out, "pnl.csv"), per_path=args.per_path)
    _write_json(os.path.join(args.out, "summary.json"), run.summary() | {"provenance": provenance(cfg)})


def cmd_report(args, cfg):
    from .report import heatmap_rows, pnl_histogram_rows, smile_rows, write_rows

    os.makedirs(args.out, exist_ok=True)
    if args.kind == "smile":
        header, rows = smile_rows(_require(args.input, "surface"), args.quotes)
    elif args.kind == "heatmap":
        header, rows = heatmap_rows(_require(args.input, "surface"), _require(args.reference, "reference surface"))
    elif args.kind == "pnl":
        header, rows = pnl_histogram_rows(_require(args.input, "pnl file"), args.bins)
    else:
        raise ValueError(f"unknown report kind {args.kind!r}")
    write_rows(os.path.join(args.out, f"{args.kind}.csv"), header, rows)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrh", description="Lifted quadratic rough Heston toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="INI config file; flags override it")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--dt", type=float, help="simulation step (default 0.0012)")
    common.add_argument("--threads", type=int, help="worker cap (default 1)")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    k = sub.add_parser("kernel-fit", parents=[common], formatter_class=fmt, help="optimal kernel mesh and weights")
    k.add_argument("--alpha", type=float, default=None, help="roughness alpha (default 0.51)")
    k.add_argument("--n", type=int, default=None, help="number of factors (default 10)")
    k.add_argument("--horizon", type=float, default=None, help="L2 horizon T (default 0.1)")
    k.add_argument("--x-n", dest="x_n", default=None, help="fixed mesh ratio instead of 'auto'")
    k.add_argument("--out", default="-", help="output JSON ('-' for stdout)")

    s = sub.add_parser("simulate", parents=[common], formatter_class=fmt, help="simulate paths")
    s.add_argument("--params", required=True, help="parameter JSON (lambda, eta, a, b, c, z0)")
    s.add_argument("--paths", type=int, default=None, help="number of paths (default 50000)")
    s.add_argument("--horizon", type=float, default=0.1)
    s.add_argument("--s0", type=float, default=1.0)
    s.add_argument("--csv", action="store_true", help="also write paths.csv")
    s.add_argument("--out", required=True, help="output directory")

    pr = sub.add_parser("price", parents=[common], formatter_class=fmt, help="Monte Carlo implied-vol surfaces")
    pr.add_argument("--params", default=None, help="parameter JSON")
    pr.add_argument("--asset", choices=["spx", "vix", "both"], default="both")
    pr.add_argument("--paths", type=int, default=None, help="number of paths (default 50000)")
    pr.add_argument("--flat-check", action="store_true", help="price the constant-volatility model (a=0, lambda=0)")
    pr.add_argument("--sigma", type=float, default=0.2, help="volatility for --flat-check")
    pr.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-dataset", parents=[common], formatter_class=fmt, help="generate a training corpus")
    g.add_argument("--count", type=int, default=None, help="total samples split 15:2:1 (default: use --splits)")
    g.add_argument("--splits", default=None, help="train,validation,test sizes (default 2000,300,200)")
    g.add_argument("--paths", type=int, default=None, help="paths per sample (default 10000)")
    g.add_argument("--workers", type=int, default=None, help="worker processes (default 1)")
    g.add_argument("--csv", action="store_true", help="also export corpus.csv")
    g.add_argument("--progress", action="store_true", help="progress on stderr")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a network")
    t.add_argument("--arch", choices=["mtp", "ptm", "dml"], required=True)
    t.add_argument("--corpus", default=None, help="corpus directory (mtp, ptm)")
    t.add_argument("--params", default=None, help="parameter JSON (dml)")
    t.add_argument("--epochs", type=int, default=None, help="max epochs (default 150; dml 20)")
    t.add_argument("--preset", choices=["standard", "desk"], default=None,
                   help="schedule: standard (default) or desk (small corpora)")
    t.add_argument("--weighting", choices=["uniform", "inverse-noise"], default=None,
                   help="MtP loss weights per grid point (default uniform)")
    t.add_argument("--strike", type=float, default=None, help="dml strike (default 98)")
    t.add_argument("--s0", type=float, default=None, help="dml reference spot (default 100)")
    t.add_argument("--samples", type=int, default=None, help="dml single-path samples (default 50000)")
    t.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("calibrate", parents=[common], formatter_class=fmt, help="calibrate to surfaces")
    c.add_argument("--method", choices=["mtp", "ptm"], default="mtp")
    c.add_argument("--spx", default=None, help="SPX surface CSV")
    c.add_argument("--vix", default=None, help="VIX surface CSV")
    c.add_argument("--batch", default=None, help="directory of <date>_spx.csv / <date>_vix.csv pairs")
    c.add_argument("--nets", required=True, help="network directory")
    c.add_argument("--restarts", type=int, default=None, help="multi-start count (default 8)")
    c.add_argument("--out", required=True, help="result JSON (directory in batch mode)")

    h = sub.add_parser("hedge", parents=[common], formatter_class=fmt, help="hedging P&L")
    h.add_argument("--mode", choices=["synthetic", "market"], default="synthetic")
    h.add_argument("--method", choices=["mtp", "dml", "bs"], default="mtp")
    h.add_argument("--params", required=True, help="parameter JSON")
    h.add_argument("--nets", default=None, help="MtP network directory")
    h.add_argument("--dml", default=None, help="DML network manifest")
    h.add_argument("--series", default=None, help="market CSV: date, spot, option_price")
    h.add_argument("--strike", type=float, default=None, help="strike (default 98)")
    h.add_argument("--maturity", type=float, default=None, help="maturity in years (default 0.08)")
    h.add_argument("--s0", type=float, default=None, help="initial spot (default 100)")
    h.add_argument("--rebalance-dt", dest="rebalance_dt", type=float, default=None, help="default 0.0012")
    h.add_argument("--paths", type=int, default=None, help="hedged paths (default 5000)")
    h.add_argument("--recalibrate-daily", dest="recalibrate_daily", default=None,
                   help="market mode: directory of <date>_spx.csv / <date>_vix.csv; recalibrate each day")
    h.add_argument("--per-path", action="store_true", help="write every path to pnl.csv")
    h.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("report", parents=[common], formatter_class=fmt, help="plot-ready tables")
    r.add_argument("--kind", choices=["smile", "heatmap", "pnl"], required=True)
    r.add_argument("--input", required=True, help="surface JSON (smile, heatmap) or pnl summary dir/CSV")
    r.add_argument("--reference", default=None, help="reference surface JSON (heatmap)")
    r.add_argument("--quotes", default=None, help="optional CSV of bid/ask vols (smile)")
    r.add_argument("--bins", type=int, default=50)
    r.add_argument("--out", required=True, help="output directory")
    return p


COMMANDS = {
    "kernel-fit": cmd_kernel_fit,
    "simulate": cmd_simulate,
    "price": cmd_price,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "hedge": cmd_hedge,
    "report": cmd_report,
}

FLAG_MAP = {
    "seed": ("sim", "seed"),
    "dt": ("sim", "dt"),
    "paths": ("sim", "paths"),
    "alpha": ("kernel", "alpha"),
    "n": ("kernel", "n"),
    "epochs": ("train", "epochs"),
    "restarts": ("calib", "restarts"),
    "strike": ("hedge", "strike"),
    "maturity": ("hedge", "maturity"),
    "s0": ("hedge", "s0"),
    "rebalance_dt": ("hedge", "rebalance_dt"),
    "samples": ("train", "dml_samples"),
    "preset": ("train", "preset"),
    "weighting": ("train", "weighting"),
    "workers": ("dataset", "workers"),
}


def resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    mapping = dict(FLAG_MAP)
    if args.command == "gen-dataset":
        mapping["paths"] = ("dataset", "paths")
        if getattr(args, "splits", None) is not None:
            cfg.dataset.splits = args.splits
    if args.command == "hedge":
        mapping["paths"] = ("hedge", "paths")
    if args.command == "train" and args.arch == "dml" and getattr(args, "epochs", None) is not None:
        mapping["epochs"] = ("train", "dml_epochs")
    if args.command == "kernel-fit":
        mapping["horizon"] = ("kernel", "horizon")
        if getattr(args, "x_n", None) is not None:
            cfg.kernel.x_n = str(args.x_n)
    _override(cfg, args, mapping)
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # every failure becomes one machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(record) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
