"""Synthetic corpora of (omega, z0, SPX surface, VIX surface) samples.

Corpus file layout (little-endian)::

    line 1        JSON header terminated by b"\\n" (metadata, record layout)
    records       fixed-width, RECORD_SIZE bytes each, ordered by sample index

Record fields, in order: ``index`` u8, ``seed`` u8, ``split`` u1, ``attempt`` u1,
``omega`` 5 f8, ``z0`` 10 f8, ``ivs_spx`` 60 f8, ``ivs_vix`` 60 f8,
``ci_spx`` 60 f8, ``ci_vix`` 60 f8, ``mask`` 120 bits packed into 15 bytes.
Surfaces are flattened strike-major; masked entries are stored as NaN.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError
from .kernel import KernelApprox
from .model import ModelParams
from .pricing import MATURITIES, SPX_STRIKES, VIX_STRIKES, price_surfaces
from .simulation import SimConfig

OMEGA_LO = np.array([0.5, 1.0, 0.1, 0.01, 0.0001])
OMEGA_HI = np.array([2.5, 1.5, 0.6, 0.5, 0.03])
Z0_LO, Z0_HI = -0.5, 0.5
N_FACTORS = 10
N_SPX = len(SPX_STRIKES) * len(MATURITIES)
N_VIX = len(VIX_STRIKES) * len(MATURITIES)
N_IVS = N_SPX + N_VIX
MIN_VALID = 0.9
PAPER_SPLITS = (150_000, 20_000, 10_000)
DESK_SPLITS = (2_000, 300, 200)
SPLIT_NAMES = ("train", "validation", "test")
CORPUS_FILE = "corpus.qrc"

RECORD_DTYPE = np.dtype(
    [
        ("index", "<u8"),
        ("seed", "<u8"),
        ("split", "u1"),
        ("attempt", "u1"),
        ("omega", "<f8", (5,)),
        ("z0", "<f8", (N_FACTORS,)),
        ("ivs_spx", "<f8", (N_SPX,)),
        ("ivs_vix", "<f8", (N_VIX,)),
        ("ci_spx", "<f8", (N_SPX,)),
        ("ci_vix", "<f8", (N_VIX,)),
        ("mask", "u1", ((N_IVS + 7) // 8,)),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize


@dataclass
class SampleRecord:
    omega: np.ndarray
    z0: np.ndarray
    ivs_spx: np.ndarray
    ivs_vix: np.ndarray
    seed: int
    mask: np.ndarray
    ci_spx: np.ndarray = field(default=None, repr=False)
    ci_vix: np.ndarray = field(default=None, repr=False)
    index: int = 0
    split: int = 0
    attempt: int = 0

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.z0 = np.asarray(self.z0, dtype=float)
        self.ivs_spx = np.asarray(self.ivs_spx, dtype=float)
        self.ivs_vix = np.asarray(self.ivs_vix, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ci_spx is None:
            self.ci_spx = np.full(N_SPX, np.nan)
        if self.ci_vix is None:
            self.ci_vix = np.full(N_VIX, np.nan)
        shapes = [(self.omega, 5), (self.z0, N_FACTORS), (self.ivs_spx, N_SPX), (self.ivs_vix, N_VIX),
                  (self.mask, N_IVS)]
        if any(a.shape != (k,) for a, k in shapes):
            raise DomainError("record vectors must have lengths 5/10/60/60 and a 120-entry mask")

    @property
    def ivs(self) -> np.ndarray:
        return np.concatenate([self.ivs_spx, self.ivs_vix])

    @property
    def ci(self) -> np.ndarray:
        return np.concatenate([self.ci_spx, self.ci_vix])

    @property
    def valid_fraction(self) -> float:
        return float(self.mask.mean())

    def to_row(self) -> np.void:
        row = np.zeros((), dtype=RECORD_DTYPE)
        row["index"], row["seed"], row["split"], row["attempt"] = self.index, self.seed, self.split, self.attempt
        row["omega"], row["z0"] = self.omega, self.z0
        row["ivs_spx"] = np.where(self.mask[:N_SPX], self.ivs_spx, np.nan)
        row["ivs_vix"] = np.where(self.mask[N_SPX:], self.ivs_vix, np.nan)
        row["ci_spx"], row["ci_vix"] = self.ci_spx, self.ci_vix
        row["mask"] = np.packbits(self.mask)
        return row

    @classmethod
    def from_row(cls, row) -> "SampleRecord":
        mask = np.unpackbits(row["mask"])[:N_IVS].astype(bool)
        return cls(
            omega=row["omega"].copy(), z0=row["z0"].copy(), ivs_spx=row["ivs_spx"].copy(),
            ivs_vix=row["ivs_vix"].copy(), seed=int(row["seed"]), mask=mask, ci_spx=row["ci_spx"].copy(),
            ci_vix=row["ci_vix"].copy(), index=int(row["index"]), split=int(row["split"]),
            attempt=int(row["attempt"]),
        )


def sample_parameters(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent uniform draws of ``omega`` over its box and ``z0`` over ``[-0.5, 0.5]^10``."""
    omega = rng.uniform(OMEGA_LO, OMEGA_HI)
    z0 = rng.uniform(Z0_LO, Z0_HI, N_FACTORS)
    return omega, z0


def sample_seed(master_seed: int, index: int, attempt: int = 0) -> int:
    """64-bit seed of sample ``index`` (and resampling ``attempt``) under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), int(attempt)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split_counts(count: int, ratios=(15, 2, 1)) -> tuple[int, int, int]:
    """Split ``count`` in the given ratios by largest remainder."""
    if count < 1:
        raise DomainError("count must be >= 1")
    r = np.asarray(ratios, dtype=float)
    raw = count * r / r.sum()
    out = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - out), kind="stable")[: count - out.sum()]:
        out[j] += 1
    return tuple(int(x) for x in out)


def make_sample(seed: int, cfg: SimConfig, kernel: KernelApprox, omega=None, z0=None) -> SampleRecord:
    """Price both surfaces for one sample; parameters not given are drawn from ``seed``."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    d_omega, d_z0 = sample_parameters(rng)
    omega = d_omega if omega is None else np.asarray(omega, dtype=float)
    z0 = d_z0 if z0 is None else np.asarray(z0, dtype=float)
    params = ModelParams.from_omega(omega, alpha=kernel.alpha)
    sim_seed = int(rng.integers(0, 2**63))
    run = SimConfig(cfg.horizon, cfg.steps, cfg.paths, sim_seed, cfg.antithetic)
    try:
        spx, vix = price_surfaces(params, kernel, z0, run)
    except NumericalError:
        nan = np.full(N_SPX, np.nan)
        return SampleRecord(omega, z0, nan, nan.copy(), seed, np.zeros(N_IVS, dtype=bool))
    ci = np.concatenate([spx.ci_half.ravel(), vix.ci_half.ravel()])
    # points without a measurable error carry no simulation information
    mask = np.concatenate([spx.mask.ravel(), vix.mask.ravel()]) & np.isfinite(ci)
    return SampleRecord(omega, z0, spx.flat(), vix.flat(), seed, mask,
                        ci_spx=spx.ci_half.ravel(), ci_vix=vix.ci_half.ravel())


def _build(args):
    index, split, master_seed, cfg, kernel, max_attempts = args
    for attempt in range(max_attempts):
        seed = sample_seed(master_seed, index, attempt)
        rec = make_sample(seed, cfg, kernel)
        if rec.valid_fraction >= MIN_VALID:
            rec.index, rec.split, rec.attempt = index, split, attempt
            return rec
    raise NumericalError(f"sample {index}: no draw with >= {MIN_VALID:.0%} valid points in {max_attempts} attempts")


def corpus_header(splits, cfg: SimConfig, kernel: KernelApprox, master_seed: int, **extra) -> dict:
    return {
        "format": "qrheston-corpus",
        "version": 1,
        "record_size": RECORD_SIZE,
        "record_fields": [[n, str(RECORD_DTYPE[n].base), list(RECORD_DTYPE[n].shape)] for n in RECORD_DTYPE.names],
        "splits": dict(zip(SPLIT_NAMES, (int(s) for s in splits))),
        "paper_splits": dict(zip(SPLIT_NAMES, PAPER_SPLITS)),
        "master_seed": int(master_seed),
        "sim": {"horizon": cfg.horizon, "steps": cfg.steps, "dt_max": cfg.dt, "paths": cfg.paths,
                "antithetic": cfg.antithetic, "scheme": "explicit-implicit Euler"},
        "kernel": kernel.to_dict(),
        "omega_box": [OMEGA_LO.tolist(), OMEGA_HI.tolist()],
        "z0_box": [Z0_LO, Z0_HI],
        "grid": {"spx_strikes": SPX_STRIKES.tolist(), "vix_strikes": VIX_STRIKES.tolist(),
                 "maturities": MATURITIES.tolist(), "order": "strike-major"},
        "vix_moneyness": "log(K/F), F = mean VIX_T",
        "min_valid_fraction": MIN_VALID,
        **extra,
    }


def generate_corpus(
    count: int | None,
    cfg: SimConfig,
    out,
    *,
    kernel: KernelApprox,
    master_seed: int = 0,
    splits=None,
    ratios=(15, 2, 1),
    workers: int = 1,
    max_attempts: int = 50,
    progress=None,
) -> str:
    """Generate a corpus into directory ``out``; returns the corpus file path.

    Either ``count`` (split by ``ratios``) or explicit ``splits`` = (train,
    validation, test) sizes. Samples ``0..train-1`` form the train split and so
    on; each is fully determined by ``(master_seed, index)``.
    """
    splits = split_counts(count, ratios) if splits is None else tuple(int(s) for s in splits)
    total = sum(splits)
    if total < 1:
        raise DomainError("corpus must contain at least one sample")
    labels = np.repeat(np.arange(3), splits)
    jobs = [(i, int(labels[i]), master_seed, cfg, kernel, max_attempts) for i in range(total)]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, CORPUS_FILE)
    header = corpus_header(splits, cfg, kernel, master_seed)
    tmp = path + ".part"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(workers) as pool:
                results = pool.map(_build, jobs, chunksize=4)
                for rec in results:
                    fh.write(rec.to_row().tobytes())
                    if progress:
                        progress(rec.index + 1, total)
        else:
            for job in jobs:
                rec = _build(job)
                fh.write(rec.to_row().tobytes())
                if progress:
                    progress(rec.index + 1, total)
    os.replace(tmp, path)
    return path


@dataclass
class Corpus:
    header: dict
    records: np.ndarray

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> np.ndarray:
        return self.records[self.records["split"] == SPLIT_NAMES.index(name)]

    def samples(self, name: str | None = None) -> list[SampleRecord]:
        rows = self.records if name is None else self.split(name)
        return [SampleRecord.from_row(r) for r in rows]


def _corpus_path(path) -> str:
    return os.path.join(path, CORPUS_FILE) if os.path.isdir(path) else str(path)


def load_corpus(path) -> Corpus:
    with open(_corpus_path(path), "rb") as fh:
        header = json.loads(fh.readline())
        body = fh.read()
    if header.get("record_size") != RECORD_SIZE or len(body) % RECORD_SIZE:
        raise DomainError("corpus record layout does not match this version")
    return Corpus(header, np.frombuffer(body, dtype=RECORD_DTYPE))


def export_csv(path, out_csv) -> None:
    """One row per sample: index, split, seed, omega, z0, 120 vols (empty if masked)."""
    corpus = load_corpus(path)
    names = (["index", "split", "seed"] + [f"omega_{k}" for k in ("lambda", "eta", "a", "b", "c")]
             + [f"z0_{i}" for i in range(N_FACTORS)]
             + [f"spx_{i}" for i in range(N_SPX)] + [f"vix_{i}" for i in range(N_VIX)])
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for rec in corpus.samples():
            vals = [repr(float(v)) if ok else "" for v, ok in zip(rec.ivs, rec.mask)]
            w.writerow([rec.index, SPLIT_NAMES[rec.split], rec.seed]
                       + [repr(float(v)) for v in np.concatenate([rec.omega, rec.z0])] + vals)


def arrays(rows) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(theta, ivs, mask, ci)`` with ``theta = (omega, z0)``, stacked over records."""
    theta = np.concatenate([rows["omega"], rows["z0"]], axis=1)
    ivs = np.concatenate([rows["ivs_spx"], rows["ivs_vix"]], axis=1)
    ci = np.concatenate([rows["ci_spx"], rows["ci_vix"]], axis=1)
    mask = np.unpackbits(rows["mask"], axis=1)[:, :N_IVS].astype(bool)
    return theta, ivs, mask, ci


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormalizationStats:
    """Box affine map of ``(omega, z0)`` onto ``[-1, 1]`` and per-point IVS z-scores."""

    param_lo: np.ndarray
    param_hi: np.ndarray
    ivs_mean: np.ndarray
    ivs_std: np.ndarray
    source_hash: str = ""

    def __post_init__(self):
        for name in ("param_lo", "param_hi", "ivs_mean", "ivs_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not np.all(self.param_hi > self.param_lo):
            raise DomainError("param_hi must exceed param_lo")
        if not np.all(self.ivs_std > 0):
            raise DomainError("degenerate surface standard deviation")

    def normalize_params(self, theta):
        return 2.0 * (np.asarray(theta) - self.param_lo) / (self.param_hi - self.param_lo) - 1.0

    def denormalize_params(self, u):
        return self.param_lo + 0.5 * (np.asarray(u) + 1.0) * (self.param_hi - self.param_lo)

    def param_scale(self) -> np.ndarray:
        """``d theta / d u``."""
        return 0.5 * (self.param_hi - self.param_lo)

    def normalize_ivs(self, ivs, sl=slice(None)):
        return (np.asarray(ivs) - self.ivs_mean[sl]) / self.ivs_std[sl]

    def denormalize_ivs(self, y, sl=slice(None)):
        return np.asarray(y) * self.ivs_std[sl] + self.ivs_mean[sl]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("param_lo", "param_hi", "ivs_mean", "ivs_std")} | {
            "source_hash": self.source_hash, "hash": self.digest()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(d["param_lo"], d["param_hi"], d["ivs_mean"], d["ivs_std"], d.get("source_hash", ""))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.param_lo, self.param_hi, self.ivs_mean, self.ivs_std):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def fit_normalization(train_rows) -> NormalizationStats:
    """Statistics from the train split only; masked points are left out of the moments."""
    if len(train_rows) == 0:
        raise DomainError("empty train split")
    _, ivs, mask, _ = arrays(train_rows)
    cnt = mask.sum(axis=0)
    if np.any(cnt < 2):
        raise DomainError("a grid point has fewer than two valid training values")
    x = np.where(mask, ivs, 0.0)
    mean = x.sum(axis=0) / cnt
    var = (np.where(mask, ivs - mean, 0.0) ** 2).sum(axis=0) / cnt
    lo = np.concatenate([OMEGA_LO, np.full(N_FACTORS, Z0_LO)])
    hi = np.concatenate([OMEGA_HI, np.full(N_FACTORS, Z0_HI)])
    src = hashlib.sha256(np.ascontiguousarray(train_rows).tobytes()).hexdigest()
    return NormalizationStats(lo, hi, mean, np.sqrt(var), source_hash=src)
