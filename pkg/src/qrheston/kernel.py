"""Multi-factor exponential approximation of the fractional kernel.

The fractional kernel ``K(t) = t**(alpha - 1) / Gamma(alpha)`` is the Laplace
transform of ``mu(dx) = x**(-alpha) / (Gamma(alpha) Gamma(1 - alpha)) dx``.
Splitting ``mu`` on the geometric partition ``eta_i = x_n**(i - n/2)`` and
collapsing every piece to a Dirac mass at its barycentre gives

    K^n(t) = sum_i c_i exp(-gamma_i t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConvergenceError, DomainError

DEFAULT_ALPHA = 0.51
GRID_POINTS = 40


@dataclass(frozen=True)
class KernelApprox:
    """Weights ``c`` and mean reversions ``gamma`` of the n-factor kernel."""

    alpha: float
    n: int
    x_n: float
    c: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    horizon: float = 0.1

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        g = np.asarray(self.gamma, dtype=float)
        if c.shape != (self.n,) or g.shape != (self.n,):
            raise DomainError(f"expected {self.n} weights and mean reversions")
        c.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "gamma", g)

    def __call__(self, t):
        return kernel_value(self, t)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "n": self.n,
            "x_n": self.x_n,
            "horizon": self.horizon,
            "c": self.c.tolist(),
            "gamma": self.gamma.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelApprox":
        """Rebuild from a dict; weights are always recomputed from the closed forms."""
        return build_kernel(d["alpha"], int(d["n"]), d["x_n"], horizon=d.get("horizon", 0.1))


def _check_alpha(alpha: float) -> None:
    if not 0.5 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0.5, 1), got {alpha}")


def mu_density(x, alpha: float):
    """Density of the measure whose Laplace transform is the fractional kernel."""
    return np.asarray(x, dtype=float) ** (-alpha) / (math.gamma(alpha) * math.gamma(1.0 - alpha))


def partition(alpha: float, n: int, x_n: float) -> np.ndarray:
    """Geometric partition points ``eta_0 < ... < eta_n``."""
    return x_n ** (np.arange(n + 1) - n / 2.0)


def build_kernel(alpha: float, n: int, x_n: float, horizon: float = 0.1) -> KernelApprox:
    """Closed-form weights and mean reversions for the geometric partition."""
    _check_alpha(alpha)
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not x_n > 1.0:
        raise DomainError(f"x_n must be > 1, got {x_n}")
    i = np.arange(1, n + 1)
    norm = math.gamma(alpha) * math.gamma(1.0 - alpha)
    c = x_n ** ((1.0 - alpha) * (i - n / 2.0)) * (1.0 - x_n ** (alpha - 1.0)) / ((1.0 - alpha) * norm)
    gamma = (
        (1.0 - alpha)
        * x_n ** (i - 1.0 - n / 2.0)
        * (x_n ** (2.0 - alpha) - 1.0)
        / ((2.0 - alpha) * (x_n ** (1.0 - alpha) - 1.0))
    )
    return KernelApprox(alpha=alpha, n=n, x_n=float(x_n), c=c, gamma=gamma, horizon=horizon)


def fractional_kernel(t, alpha: float):
    t = np.asarray(t, dtype=float)
    return t ** (alpha - 1.0) / math.gamma(alpha)


def kernel_value(k: KernelApprox, t):
    """``sum_i c_i exp(-gamma_i t)``; vectorised over ``t``."""
    t = np.asarray(t, dtype=float)
    out = np.exp(-np.multiply.outer(t, k.gamma)) @ k.c
    return out if out.ndim else float(out)


def _gauss_panels(points: int, order: int = 20):
    panels = max(1, int(math.ceil(points / order)))
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def l2_error(k: KernelApprox, T: float, quad_points: int = 4000) -> float:
    """Continuous ``||K^n - K||_{L^2(0, T)}``.

    ``int K^2`` is elementary. The cross term and ``int (K^n)^2`` are integrated
    after the substitution ``t = T u**p`` with ``p = 1/(2 alpha - 1)``, which
    turns the ``t**(alpha-1)`` singularity into a polynomial factor; composite
    Gauss-Legendre with ``quad_points`` nodes is then applied on ``u in [0, 1]``.
    """
    if not T > 0:
        raise DomainError(f"T must be > 0, got {T}")
    a = k.alpha
    p = 1.0 / (2.0 * a - 1.0)
    g_a = math.gamma(a)
    kk = T ** (2.0 * a - 1.0) / ((2.0 * a - 1.0) * g_a**2)

    u, w = _gauss_panels(quad_points)
    with np.errstate(under="ignore"):
        t = T * u**p
        kn = kernel_value(k, t)
        # K(t) dt = T**a p u**(p a - 1) / Gamma(a) du
        cross = np.sum(w * kn * T**a * p * u ** (p * a - 1.0)) / g_a
        sq = np.sum(w * kn**2 * T * p * u ** (p - 1.0))
    val = kk - 2.0 * cross + sq
    return float(math.sqrt(max(val, 0.0)))


def grid_l2_error(k: KernelApprox, T: float, points: int = GRID_POINTS) -> float:
    """Discrete L2 error on the right-endpoint grid ``t_j = j T / points``.

    This is the mesh-selection objective: it measures the fit at the time
    resolution where the kernel is actually used, and stays finite in ``x_n``
    where the continuous norm is dominated by the singularity at 0.
    """
    if not T > 0:
        raise DomainError(f"T must be > 0, got {T}")
    h = T / points
    t = h * np.arange(1, points + 1)
    diff = kernel_value(k, t) - fractional_kernel(t, k.alpha)
    return float(math.sqrt(h * np.sum(diff**2)))


def optimal_mesh(
    alpha: float,
    n: int,
    T: float,
    *,
    lower: float = 1.05,
    upper: float = 500.0,
    tol: float = 1e-3,
    objective: str = "grid",
    points: int | None = None,
) -> float:
    """Mesh ratio ``x_n`` minimising the kernel L2 error on ``(0, T)``.

    A log-spaced scan locates the basin, then a bounded Brent search refines it
    to absolute tolerance ``tol``. Raises ``ConvergenceError`` if the best scan
    point sits on the search boundary.
    """
    _check_alpha(alpha)
    if n < 1 or not T > 0:
        raise DomainError("need n >= 1 and T > 0")
    if objective == "grid":
        pts = GRID_POINTS if points is None else points

        def f(x):
            return grid_l2_error(build_kernel(alpha, n, x), T, pts)
    elif objective == "continuous":
        pts = 4000 if points is None else points

        def f(x):
            return l2_error(build_kernel(alpha, n, x), T, pts)
    else:
        raise ValueError(f"unknown objective {objective!r}")

    xs = np.exp(np.linspace(math.log(lower), math.log(upper), 96))
    vals = np.array([f(x) for x in xs])
    j = int(np.argmin(vals))
    if j == 0 or j == len(xs) - 1:
        raise ConvergenceError(
            f"no interior minimum of the kernel error on [{lower}, {upper}] (n={n}, alpha={alpha})"
        )
    res = minimize_scalar(f, bounds=(xs[j - 1], xs[j + 1]), method="bounded", options={"xatol": tol})
    if not res.success:
        raise ConvergenceError(res.message)
    return float(res.x)


def fit_kernel(alpha: float = DEFAULT_ALPHA, n: int = 10, T: float = 0.1, **kw) -> KernelApprox:
    """``build_kernel`` at the optimal mesh."""
    return build_kernel(alpha, n, optimal_mesh(alpha, n, T, **kw), horizon=T)


def error_table(alpha: float, n: int, T: float, xs) -> list[tuple[float, float, float]]:
    """Rows ``(x_n, grid error, continuous error)`` for plotting the error curve."""
    rows = []
    for x in xs:
        k = build_kernel(alpha, n, x, horizon=T)
        rows.append((float(x), grid_l2_error(k, T), l2_error(k, T)))
    return rows
