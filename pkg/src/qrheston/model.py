"""Parameters, Markov state and variance map of the lifted quadratic rough Heston model."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import DomainError
from .kernel import DEFAULT_ALPHA, KernelApprox

DEFAULT_CAP = 10.0

PARAM_NAMES = ("lambda", "eta", "a", "b", "c")


@dataclass(frozen=True)
class ModelParams:
    lam: float
    eta: float
    a: float
    b: float
    c: float
    alpha: float = DEFAULT_ALPHA
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        if self.lam < 0 or self.a < 0 or self.b < 0:
            raise DomainError("lambda, a and b must be non-negative")
        if not self.eta >= 0:
            raise DomainError("eta must be non-negative")
        if not self.c > 0:
            raise DomainError("c must be positive")

    @property
    def omega(self) -> np.ndarray:
        return np.array([self.lam, self.eta, self.a, self.b, self.c])

    @classmethod
    def from_omega(cls, omega, alpha: float = DEFAULT_ALPHA, cap: float = DEFAULT_CAP) -> "ModelParams":
        lam, eta, a, b, c = (float(v) for v in omega)
        return cls(lam, eta, a, b, c, alpha=alpha, cap=cap)

    def to_dict(self, z0=None) -> dict:
        d = {"lambda": self.lam, "eta": self.eta, "a": self.a, "b": self.b, "c": self.c, "alpha": self.alpha}
        if z0 is not None:
            d["z0"] = [float(v) for v in z0]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> tuple["ModelParams", np.ndarray | None]:
        p = cls(
            float(d["lambda"]), float(d["eta"]), float(d["a"]), float(d["b"]), float(d["c"]),
            alpha=float(d.get("alpha", DEFAULT_ALPHA)), cap=float(d.get("cap", DEFAULT_CAP)),
        )
        z0 = np.asarray(d["z0"], dtype=float) if "z0" in d else None
        return p, z0


def save_params(path, params: ModelParams, z0=None) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(z0), fh, indent=2)


def load_params(path) -> tuple[ModelParams, np.ndarray | None]:
    with open(path) as fh:
        return ModelParams.from_dict(json.load(fh))


@dataclass(frozen=True)
class FactorState:
    """Markov state ``(S, Z^1, ..., Z^n)``."""

    z: np.ndarray = field(repr=False)
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        if not self.s > 0:
            raise DomainError("asset level must be positive")

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([[self.s], self.z])


def aggregate_z(kernel: KernelApprox, z) -> np.ndarray | float:
    """``Z = sum_i c_i z_i`` along the last axis of ``z``."""
    z = z.z if isinstance(z, FactorState) else np.asarray(z, dtype=float)
    if z.shape[-1] != kernel.n:
        raise DomainError(f"state has {z.shape[-1]} factors, kernel has {kernel.n}")
    out = z @ kernel.c
    return out if np.ndim(out) else float(out)


def phi(x, cap: float = DEFAULT_CAP):
    """``x**2`` below ``cap`` and ``cap**2`` from ``cap`` upwards."""
    x = np.asarray(x, dtype=float)
    return np.where(x < cap, x * x, cap * cap)


def dphi_half(x, cap: float = DEFAULT_CAP):
    """``phi'(x) / 2``: ``x`` below the cap, 0 where it binds."""
    x = np.asarray(x, dtype=float)
    return np.where(x < cap, x, 0.0)


def variance_from_aggregate(params: ModelParams, zagg):
    out = params.a * phi(np.asarray(zagg) - params.b, params.cap) + params.c
    return out if np.ndim(out) else float(out)


def variance(params: ModelParams, kernel: KernelApprox, state) -> float:
    """Spot variance ``a phi(Z - b) + c``."""
    return variance_from_aggregate(params, aggregate_z(kernel, state))


def mean_drift_matrix(params: ModelParams, kernel: KernelApprox) -> np.ndarray:
    """``A`` with ``dm/dt = A m`` for the factor means: ``-diag(gamma) - lambda 1 c^T``."""
    n = kernel.n
    return -np.diag(kernel.gamma) - params.lam * np.outer(np.ones(n), kernel.c)


class MeanCurve:
    """Initial curve ``g^n(t)`` and the deterministic factor-mean flow started at ``z0``."""

    def __init__(self, params: ModelParams, kernel: KernelApprox, z0):
        self.params = params
        self.kernel = kernel
        self.z0 = np.asarray(z0, dtype=float)
        if self.z0.shape != (kernel.n,):
            raise DomainError("z0 length must equal kernel.n")
        self._A = mean_drift_matrix(params, kernel)

    def g(self, t):
        t = np.asarray(t, dtype=float)
        out = np.exp(-np.multiply.outer(t, self.kernel.gamma)) @ (self.z0 * self.kernel.c)
        return out if out.ndim else float(out)

    __call__ = g

    def factor_means(self, t) -> np.ndarray:
        """``E[Z^i_t]`` for each ``t``; shape ``t.shape + (n,)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.params.lam == 0.0:
            return self.z0 * np.exp(-np.multiply.outer(t, self.kernel.gamma))
        out = np.stack([expm(self._A * ti) @ self.z0 for ti in t.ravel()])
        return out.reshape(t.shape + (self.kernel.n,))

    def mean_z(self, t):
        """``E[Z_t]``, solving the linear Volterra identity through the factor ODEs."""
        out = self.factor_means(t) @ self.kernel.c
        return out if np.ndim(t) else float(out[0])


def initial_mean_curve(params: ModelParams, kernel: KernelApprox, z0) -> MeanCurve:
    return MeanCurve(params, kernel, z0)
