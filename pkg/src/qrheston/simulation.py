"""Monte Carlo engine for the lifted model and pathwise derivatives of call payoffs."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .kernel import KernelApprox
from .model import ModelParams, dphi_half, phi

S_FLOOR = 1e-12
KINK_REL = 1e-9


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    steps: int
    paths: int
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if not self.horizon > 0 or self.steps < 1 or self.paths < 1:
            raise DomainError("need horizon > 0, steps >= 1, paths >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    @classmethod
    def from_dt(cls, horizon: float, dt: float, paths: int, seed: int = 0, antithetic: bool = False):
        """Uniform grid with the smallest step count whose step does not exceed ``dt``."""
        steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
        return cls(horizon, steps, paths, seed, antithetic)


def time_grid(maturities, dt_max: float) -> np.ndarray:
    """Piecewise-uniform grid from 0 through every maturity, steps no longer than ``dt_max``.

    Each gap between consecutive maturities is cut into equal steps, so every
    maturity falls exactly on a grid node.
    """
    knots = np.unique(np.concatenate([[0.0], np.asarray(maturities, dtype=float)]))
    pieces = [np.zeros(1)]
    for t0, t1 in zip(knots[:-1], knots[1:]):
        m = max(1, int(math.ceil((t1 - t0) / dt_max - 1e-9)))
        pieces.append(np.linspace(t0, t1, m + 1)[1:])
    return np.concatenate(pieces)


def step_index(times: np.ndarray, t: float) -> int:
    j = int(np.argmin(np.abs(times - t)))
    if abs(times[j] - t) > 1e-9 * max(1.0, abs(t)):
        raise DomainError(f"time {t} is not on the simulation grid")
    return j


def path_normals(seed: int, paths: int, steps: int, antithetic: bool = False, start: int = 0) -> np.ndarray:
    """Standard normals, one Philox stream per path keyed on ``(seed, path index)``.

    Path ``p`` draws the same numbers however the paths are batched. With
    ``antithetic`` path ``2j+1`` is the negation of path ``2j``.
    """
    out = np.empty((paths, steps))
    base = (int(seed) & 0xFFFFFFFFFFFFFFFF) << 64
    for r in range(paths):
        p = start + r
        if antithetic and p % 2 == 1:
            src = p - 1
            if r > 0:
                out[r] = -out[r - 1]
                continue
            sign = -1.0
        else:
            src, sign = p, 1.0
        gen = np.random.Generator(np.random.Philox(key=base | src))
        out[r] = sign * gen.standard_normal(steps)
    return out


@dataclass
class PathBundle:
    """Simulated states on the recorded grid columns.

    ``s``, ``v``, ``w`` (the Brownian motion itself) have shape
    ``(paths, len(record))``; ``z`` has shape ``(paths, len(record), n)``.
    ``dW`` (if kept) covers every step.
    """

    times: np.ndarray
    record: np.ndarray
    s: np.ndarray
    z: np.ndarray
    v: np.ndarray
    absorbed: np.ndarray
    w: np.ndarray | None = field(default=None, repr=False)
    dW: np.ndarray | None = field(default=None, repr=False)

    @property
    def absorbed_fraction(self) -> float:
        return float(np.mean(self.absorbed))

    @property
    def paths(self) -> int:
        return self.s.shape[0]

    def column(self, step: int) -> int:
        j = np.flatnonzero(self.record == step)
        if j.size == 0:
            raise DomainError(f"step {step} was not recorded")
        return int(j[0])

    def at_time(self, t: float):
        """``(s, z)`` arrays at grid time ``t``."""
        col = self.column(step_index(self.times, t))
        return self.s[:, col], self.z[:, col]


def simulate(
    params: ModelParams,
    kernel: KernelApprox,
    z0,
    s0: float,
    cfg: SimConfig,
    *,
    times=None,
    dW=None,
    record=None,
    keep_brownian: bool = False,
    scheme: str = "implicit",
    z_start=None,
    s_start=None,
) -> PathBundle:
    """Simulate ``cfg.paths`` paths of ``(S, Z^1..Z^n)``.

    Per step, with one shared increment ``dW`` for the asset and every factor::

        V_k     = a phi(Z_k - b) + c,      Z_k = sum_i c_i Z^i_k
        S_{k+1} = S_k (1 + sqrt(V_k) dW)
        Z^i_{k+1} = (Z^i_k - lambda Z_k dt + eta sqrt(V_k) dW) / (1 + gamma_i dt)

    ``scheme="explicit"`` replaces the last line by the forward Euler update
    and exists to exhibit its instability at large ``gamma_i dt``.
    ``times`` overrides the uniform grid of ``cfg``; ``dW`` supplies the
    Brownian increments directly; ``record`` lists the grid columns to store.
    ``z_start``/``s_start`` give per-path initial states (shape ``(paths, n)``
    and ``(paths,)``) instead of the common ``z0``/``s0``.
    """
    if not s0 > 0:
        raise DomainError("s0 must be positive")
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (kernel.n,):
        raise DomainError(f"z0 must have {kernel.n} entries")
    times = cfg.times() if times is None else np.asarray(times, dtype=float)
    nsteps = len(times) - 1
    dts = np.diff(times)
    P = cfg.paths
    if dW is None:
        dW = path_normals(cfg.seed, P, nsteps, cfg.antithetic) * np.sqrt(dts)
    else:
        dW = np.asarray(dW, dtype=float)
        if dW.shape != (P, nsteps):
            raise DomainError(f"dW must have shape {(P, nsteps)}")
    record = np.arange(nsteps + 1) if record is None else np.unique(np.asarray(record, dtype=int))
    slot = np.full(nsteps + 1, -1)
    slot[record] = np.arange(len(record))

    c, g = kernel.c, kernel.gamma
    lam, eta, a, b, cc, cap = params.lam, params.eta, params.a, params.b, params.c, params.cap
    s = np.full(P, float(s0)) if s_start is None else np.array(s_start, dtype=float)
    z = np.tile(z0, (P, 1)) if z_start is None else np.array(z_start, dtype=float)
    absorbed = np.zeros(P, dtype=bool)

    S = np.empty((P, len(record)))
    Zr = np.empty((P, len(record), kernel.n))
    Vr = np.empty((P, len(record)))
    Wr = np.empty((P, len(record)))
    wcum = np.zeros(P)

    for k in range(nsteps + 1):
        zagg = z @ c
        v = a * phi(zagg - b, cap) + cc
        if slot[k] >= 0:
            j = slot[k]
            S[:, j] = s
            Zr[:, j] = z
            Vr[:, j] = v
            Wr[:, j] = wcum
        if k == nsteps:
            break
        dt = dts[k]
        wcum = wcum + dW[:, k]
        vol_dw = np.sqrt(v) * dW[:, k]
        s_new = s * (1.0 + vol_dw)
        hit = (s_new <= 0.0) & ~absorbed
        if hit.any():
            absorbed |= hit
        s = np.where(absorbed, S_FLOOR, s_new)
        drift = (-lam * dt) * zagg[:, None] + (eta * vol_dw)[:, None]
        if scheme == "implicit":
            z = (z + drift) / (1.0 + g * dt)
        elif scheme == "explicit":
            with np.errstate(over="ignore", invalid="ignore"):
                z = (1.0 - g * dt) * z + drift
        else:
            raise ValueError(f"unknown scheme {scheme!r}")

    return PathBundle(
        times=times,
        record=record,
        s=S,
        z=Zr,
        v=Vr,
        absorbed=absorbed,
        w=Wr,
        dW=dW if keep_brownian else None,
    )


@dataclass
class PathwiseSensitivity:
    """Per-path gradients of ``(S_T - K)+`` with respect to ``X_0 = (S_0, Z_0^1..Z_0^n)``."""

    step: int
    dpayoff_dx0: np.ndarray
    payoff: np.ndarray
    excluded: np.ndarray

    @property
    def excluded_count(self) -> int:
        return int(self.excluded.sum())


def step_jacobian(params: ModelParams, kernel: KernelApprox, s: float, z, dw: float, dt: float) -> np.ndarray:
    """Dense one-step Jacobian ``D(k) = d X_{k+1} / d X_k`` for a single path."""
    z = np.asarray(z, dtype=float)
    c, g = kernel.c, kernel.gamma
    zagg = float(z @ c)
    v = params.a * float(phi(zagg - params.b, params.cap)) + params.c
    sv = math.sqrt(v)
    m1 = params.a * dw * float(dphi_half(zagg - params.b, params.cap)) / sv
    m2 = params.eta * m1 - params.lam * dt
    n = kernel.n
    D = np.zeros((n + 1, n + 1))
    D[0, 0] = 1.0 + sv * dw
    D[0, 1:] = s * m1 * c
    D[1:, 1:] = (np.eye(n) + m2 * np.outer(np.ones(n), c)) / (1.0 + g * dt)[:, None]
    return D


def pathwise_derivatives(
    bundle: PathBundle,
    params: ModelParams,
    kernel: KernelApprox,
    strike: float,
    maturities,
) -> list[PathwiseSensitivity]:
    """Adjoint recursion ``V(k) = D(k)^T V(k+1)`` run backward from each maturity step.

    ``D(k)`` is never formed: its transpose acts on ``(v_0, w)`` as::

        v_0 <- (1 + sqrt(V_k) dW) v_0
        w   <- S_k M1 c v_0 + w~ + M2 c sum(w~),   w~ = w / (1 + gamma dt)

    with ``M1 = a dW phi'(Z_k - b) / (2 sqrt(V_k))`` and ``M2 = eta M1 - lambda dt``,
    so each step costs O(n) per path.
    """
    if bundle.dW is None:
        raise DomainError("bundle must keep its Brownian increments")
    if not strike > 0:
        raise DomainError("strike must be positive")
    nsteps = len(bundle.times) - 1
    if len(bundle.record) != nsteps + 1:
        raise DomainError("bundle must record every grid column")
    steps = [int(m) for m in maturities]
    if any(m < 1 or m > nsteps for m in steps):
        raise DomainError("maturity step out of range")
    P, n = bundle.paths, kernel.n
    M = len(steps)
    c, g = kernel.c, kernel.gamma
    dts = np.diff(bundle.times)

    v0 = np.zeros((P, M))
    w = np.zeros((P, M, n))
    kmax = max(steps)
    excluded = np.zeros((P, M), dtype=bool)
    payoff = np.zeros((P, M))
    for m, km in enumerate(steps):
        sT = bundle.s[:, km]
        payoff[:, m] = np.maximum(sT - strike, 0.0)
        excluded[:, m] = (np.abs(sT - strike) < KINK_REL * strike) | bundle.absorbed

    for k in range(kmax, -1, -1):
        for m, km in enumerate(steps):
            if km == k:
                v0[:, m] = (bundle.s[:, k] > strike).astype(float)
        if k == 0:
            break
        j = k - 1
        dt = dts[j]
        dw = bundle.dW[:, j]
        zagg = bundle.z[:, j] @ c
        sv = np.sqrt(bundle.v[:, j])
        m1 = params.a * dw * dphi_half(zagg - params.b, params.cap) / sv
        m2 = params.eta * m1 - params.lam * dt
        wt = w / (1.0 + g * dt)
        w = (bundle.s[:, j] * m1)[:, None, None] * v0[:, :, None] * c + wt + m2[:, None, None] * c * wt.sum(
            axis=2, keepdims=True
        )
        v0 = (1.0 + sv * dw)[:, None] * v0

    grads = np.concatenate([v0[:, :, None], w], axis=2)
    grads[excluded] = 0.0
    return [
        PathwiseSensitivity(step=km, dpayoff_dx0=grads[:, m], payoff=payoff[:, m], excluded=excluded[:, m])
        for m, km in enumerate(steps)
    ]


# Flat little-endian path file: header, time grid, then s, v, z row-major.
_MAGIC = b"QRHP"
_HEADER = struct.Struct("<4sIIIQ")


def write_paths(path, bundle: PathBundle) -> None:
    """Layout: ``magic 'QRHP' | u32 version=1 | u32 n | u32 columns | u64 paths``,
    then ``columns`` float64 times, ``s`` (paths x columns), ``v`` (paths x columns),
    ``z`` (paths x columns x n), all float64 little-endian in C order."""
    P, C, n = bundle.z.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, n, C, P))
        fh.write(np.ascontiguousarray(bundle.times[bundle.record], dtype="<f8").tobytes())
        for arr in (bundle.s, bundle.v, bundle.z):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_paths(path) -> dict:
    with open(path, "rb") as fh:
        magic, version, n, C, P = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or version != 1:
            raise ValueError("not a path file")
        body = np.frombuffer(fh.read(), dtype="<f8")
    t = body[:C]
    off = C
    s = body[off : off + P * C].reshape(P, C)
    off += P * C
    v = body[off : off + P * C].reshape(P, C)
    off += P * C
    z = body[off : off + P * C * n].reshape(P, C, n)
    return {"times": t, "s": s, "v": v, "z": z}


def write_paths_csv(path, bundle: PathBundle) -> None:
    n = bundle.z.shape[2]
    cols = ["path", "t", "s", "v"] + [f"z{i + 1}" for i in range(n)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        tt = bundle.times[bundle.record]
        for p in range(bundle.paths):
            for j, t in enumerate(tt):
                row = [str(p), repr(float(t)), repr(float(bundle.s[p, j])), repr(float(bundle.v[p, j]))]
                row += [repr(float(x)) for x in bundle.z[p, j]]
                fh.write(",".join(row) + "\n")
