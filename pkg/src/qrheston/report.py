"""Plot-ready tables: smiles, error heatmaps and P&L histograms."""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import GridError
from .pricing import IVSurface


def load_surface(path) -> IVSurface:
    """Surface from its JSON or CSV form."""
    if str(path).endswith(".json"):
        with open(path) as fh:
            return IVSurface.from_json(json.load(fh))
    return IVSurface.from_csv(path)


def _quotes(path):
    """``{(logm, maturity): (bid, ask)}`` from a CSV with columns logm, maturity, bid, ask."""
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out[(round(float(r["logm"]), 10), round(float(r["maturity"]), 10))] = (float(r["bid"]), float(r["ask"]))
    return out


def smile_rows(surface_path, quotes_path=None):
    """One row per grid point: model vol, CI half-width and optional bid/ask."""
    s = load_surface(surface_path)
    q = _quotes(quotes_path) if quotes_path else {}
    header = ["asset_class", "maturity", "logm", "vol", "ci_half", "bid", "ask"]
    rows = []
    for j, t in enumerate(s.maturities):
        for i, k in enumerate(s.strikes_logm):
            bid, ask = q.get((round(float(k), 10), round(float(t), 10)), (np.nan, np.nan))
            ci = s.ci_half[i, j] if s.ci_half is not None else np.nan
            v = s.vols[i, j] if s.mask[i, j] else np.nan
            rows.append([s.asset_class, float(t), float(k), float(v), float(ci), bid, ask])
    return header, rows


def heatmap_rows(surface_path, reference_path):
    """Absolute vol error per grid point against a reference surface."""
    s, ref = load_surface(surface_path), load_surface(reference_path)
    if s.vols.shape != ref.vols.shape or not np.allclose(s.strikes_logm, ref.strikes_logm) \
            or not np.allclose(s.maturities, ref.maturities):
        raise GridError("surfaces are on different grids")
    err = np.abs(s.vols - ref.vols)
    header = ["asset_class", "logm", "maturity", "abs_error", "rel_error"]
    rows = [[s.asset_class, float(k), float(t), float(err[i, j]), float(err[i, j] / ref.vols[i, j])]
            for i, k in enumerate(s.strikes_logm) for j, t in enumerate(s.maturities)]
    return header, rows


def pnl_histogram_rows(path, bins: int = 50):
    """Histogram of terminal ``J / P0`` from a per-path ``pnl.csv`` (its directory must hold summary.json)."""
    if os.path.isdir(path):
        path = os.path.join(path, "pnl.csv")
    with open(os.path.join(os.path.dirname(path) or ".", "summary.json")) as fh:
        p0 = float(json.load(fh)["p0"])
    last = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if "path" not in (reader.fieldnames or []):
            raise ValueError("histogram needs a per-path pnl.csv (hedge --per-path)")
        for r in reader:
            last[int(r["path"])] = float(r["J"])
    x = np.array([last[p] for p in sorted(last)]) / p0
    counts, edges = np.histogram(x, bins=bins)
    header = ["bin_lo", "bin_hi", "count", "density"]
    dens = counts / max(1, counts.sum()) / np.diff(edges)
    rows = [[float(edges[i]), float(edges[i + 1]), int(counts[i]), float(dens[i])] for i in range(bins)]
    return header, rows


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
