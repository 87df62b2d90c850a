"""Multilayer perceptrons with SiLU hidden layers, trained by Adam, in plain numpy.

Besides parameter gradients the networks expose input gradients (used for
calibration and hedge ratios) and a differential-regression loss whose
parameter gradient is obtained by differentiating through the backward pass.

Network file layout: ``<name>.json`` manifest and ``<name>.bin`` holding every
weight matrix then bias vector, layer by layer, as little-endian float64.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, NumericalError

ARCHITECTURES = {
    "ptm": (120, (25,) * 7, 15),
    "mtp-spx": (15, (25,) * 7, 60),
    "mtp-vix": (15, (25,) * 7, 60),
    "dml": (11, (20,) * 4, 5),
}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_prime(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def silu_second(x):
    s = sigmoid(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


class Mlp:
    """Affine layers with SiLU between them and an identity output layer.

    ``weights[l]`` has shape ``(fan_in, fan_out)``; inputs are row vectors, so a
    batch ``x`` of shape ``(B, in)`` maps to ``(B, out)``.
    """

    def __init__(self, dims, weights=None, biases=None, *, seed: int = 0, arch: str = "custom", meta=None):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2:
            raise DomainError("need at least input and output dimensions")
        self.arch = arch
        self.meta = dict(meta or {})
        if weights is None:
            rng = np.random.Generator(np.random.PCG64(seed))
            weights, biases = [], []
            for l, (i, o) in enumerate(zip(self.dims[:-1], self.dims[1:])):
                last = l == len(self.dims) - 2
                lim = math.sqrt((3.0 if last else 6.0) / i)
                weights.append(rng.uniform(-lim, lim, size=(i, o)))
                biases.append(np.zeros(o))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for l, (i, o) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            if self.weights[l].shape != (i, o) or self.biases[l].shape != (o,):
                raise DomainError(f"layer {l} parameters do not match dims {self.dims}")

    @classmethod
    def for_arch(cls, arch: str, seed: int = 0, **kw) -> "Mlp":
        if arch not in ARCHITECTURES:
            raise DomainError(f"unknown architecture {arch!r}")
        i, hidden, o = ARCHITECTURES[arch]
        return cls((i, *hidden, o), seed=seed, arch=arch, **kw)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.shape[-1] != self.dims[0]:
            raise DomainError(f"input has {x2.shape[-1]} features, network expects {self.dims[0]}")
        return x2, single

    # ------------------------------------------------------------ evaluation

    def forward(self, x, cache: bool = False):
        x, single = self._check(x)
        hs, acts = [], [x]
        a = x
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ W + b
            if l < self.n_layers - 1:
                hs.append(h)
                a = silu(h)
                acts.append(a)
            else:
                a = h
        out = a[0] if single else a
        return (out, (hs, acts)) if cache else out

    __call__ = forward

    def backward(self, cache, upstream):
        """Reverse pass: ``(param grads, input grad)`` for ``sum(upstream * output)``.

        Parameter gradients are returned as ``weights + biases`` in the order of
        ``params()``.
        """
        hs, acts = cache
        g = np.asarray(upstream, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            gw[l] = acts[l].T @ g
            gb[l] = g.sum(axis=0)
            g = g @ self.weights[l].T
            if l > 0:
                g = g * silu_prime(hs[l - 1])
        return gw + gb, g

    def input_gradient(self, x, upstream=None):
        """Gradient of ``sum(upstream * output)`` with respect to the input."""
        x2, single = self._check(x)
        out, cache = self.forward(x2, cache=True)
        up = np.ones_like(out) if upstream is None else np.broadcast_to(upstream, out.shape)
        _, gx = self.backward(cache, up)
        return gx[0] if single else gx

    def jacobian(self, x):
        """``d output / d input``, shape ``(B, out, in)`` (or ``(out, in)`` for one input)."""
        x2, single = self._check(x)
        B = x2.shape[0]
        J = np.broadcast_to(np.eye(self.dims[0]), (B, self.dims[0], self.dims[0]))
        a = x2
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ W + b
            J = np.einsum("io,bin->bon", W, J)
            if l < self.n_layers - 1:
                J = J * silu_prime(h)[:, :, None]
                a = silu(h)
        return J[0] if single else J

    # ------------------------------------------------------------ persistence

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        """Write ``path`` (manifest, ``.json`` appended if missing) and the sibling ``.bin`` blob."""
        base = str(path)[:-5] if str(path).endswith(".json") else str(path)
        blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params())
        manifest = {
            "format": "qrheston-mlp",
            "version": 1,
            "arch": self.arch,
            "dims": list(self.dims),
            "activation": "silu",
            "blob": os.path.basename(base) + ".bin",
            "sha256": hashlib.sha256(blob).hexdigest(),
            "meta": self.meta,
        }
        with open(base + ".bin", "wb") as fh:
            fh.write(blob)
        with open(base + ".json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Mlp":
        base = str(path)[:-5] if str(path).endswith(".json") else str(path)
        with open(base + ".json") as fh:
            manifest = json.load(fh)
        with open(os.path.join(os.path.dirname(base + ".json"), manifest["blob"]), "rb") as fh:
            blob = fh.read()
        if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
            raise DomainError("weight blob does not match its manifest")
        dims = manifest["dims"]
        flat = np.frombuffer(blob, dtype="<f8")
        weights, biases, pos = [], [], 0
        for i, o in zip(dims[:-1], dims[1:]):
            weights.append(flat[pos : pos + i * o].reshape(i, o).copy())
            pos += i * o
        for o in dims[1:]:
            biases.append(flat[pos : pos + o].copy())
            pos += o
        if pos != flat.size:
            raise DomainError("weight blob has the wrong length")
        return cls(dims, weights, biases, arch=manifest["arch"], meta=manifest.get("meta", {}))


def warm_start(net: Mlp, donor: Mlp) -> Mlp:
    """Copy ``donor``'s weights into ``net`` (architectures must match)."""
    if net.dims != donor.dims:
        raise DomainError(f"architecture mismatch: {net.dims} vs {donor.dims}")
    net.weights = [w.copy() for w in donor.weights]
    net.biases = [b.copy() for b in donor.biases]
    return net


# ------------------------------------------------------------------ losses


def masked_mse(pred, target, mask=None):
    """Mean squared error over unmasked entries, and its gradient in ``pred``.

    A float ``mask`` acts as per-entry weights: ``sum(w d^2) / sum(w)``.
    """
    diff = pred - np.nan_to_num(target)
    if mask is None:
        count = float(diff.size)
    else:
        w = np.asarray(mask, dtype=float)
        diff = np.where(w != 0, diff, 0.0)
        count = float(w.sum())
        if count > 0:
            return float(np.sum(w * diff * diff) / count), 2.0 * w * diff / count
    if count == 0:
        return 0.0, np.zeros_like(diff)
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def dml_loss_and_grad(net: Mlp, x, y, dydx, weight: float = 1.0):
    """Value MSE plus ``weight`` times the MSE between the input gradient of
    the mean output and ``dydx`` (the averaged derivative targets).

    Returns ``(loss, value loss, derivative loss, param grads)``.
    """
    out, cache = net.forward(x, cache=True)
    hs, acts = cache
    L = net.n_layers
    lv, gout = masked_mse(out, y)
    grads, _ = net.backward(cache, gout)
    if weight == 0.0:
        return lv, lv, 0.0, grads

    # input gradient of mean(output): reverse pass with upstream 1/m, keeping intermediates
    m = out.shape[1]
    u = np.full_like(out, 1.0 / m)
    deltas = [None] * L
    gs = [None] * L
    d = u
    for l in range(L - 1, -1, -1):
        deltas[l] = d
        g = d @ net.weights[l].T
        gs[l] = g
        if l > 0:
            d = g * silu_prime(hs[l - 1])
    gx = gs[0]
    ld, r = masked_mse(gx, dydx)
    ld *= weight
    r = weight * r

    # differentiate through that reverse pass
    gw = [np.zeros_like(w) for w in net.weights]
    q = [None] * L
    for l in range(L):
        gw[l] += r.T @ deltas[l]
        if l == L - 1:
            break
        rho = r @ net.weights[l]
        r = rho * silu_prime(hs[l])
        q[l] = rho * gs[l + 1] * silu_second(hs[l])
    # extra adjoints q[l] on the pre-activations, pushed back through the forward graph
    gb = [np.zeros_like(b) for b in net.biases]
    adj = None
    for l in range(L - 2, -1, -1):
        a_h = q[l] if adj is None else adj + q[l]
        gw[l] += acts[l].T @ a_h
        gb[l] += a_h.sum(axis=0)
        if l > 0:
            adj = (a_h @ net.weights[l].T) * silu_prime(hs[l - 1])
    n = L
    total = [grads[i] + gw[i] for i in range(n)] + [grads[n + i] + gb[i] for i in range(n)]
    return lv + ld, lv, ld, total


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 150
    patience: int | None = 5
    min_delta: float = 1e-6
    batch: int = 128
    lr0: float = 1e-3
    lr_halving_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "masked-mse"
    dml_weight: float = 1.0

    @classmethod
    def dml(cls, **kw) -> "TrainConfig":
        base = {"epochs": 20, "lr_halving_every": 5, "loss": "dml", "patience": None}
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Schedule for desk-scale corpora (a few thousand samples), where an epoch is only
        a few dozen steps and the per-epoch halving would stop learning after ~1,000 steps."""
        base = {"epochs": 600, "patience": 40, "batch": 32, "lr0": 3e-3, "lr_halving_every": 40}
        base.update(kw)
        return cls(**base)

    def lr(self, epoch: int) -> float:
        return self.lr0 * 0.5 ** (epoch // self.lr_halving_every)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _evaluate(net, X, Y, M, loss_fn, batch=4096):
    total, count = 0.0, 0
    for s in range(0, len(X), batch):
        sl = slice(s, s + batch)
        l, n = loss_fn(net, X[sl], Y[sl], None if M is None else M[sl])
        total += l * n
        count += n
    return total / max(count, 1)


def _surface_loss(net, x, y, m):
    out = net.forward(x)
    l, _ = masked_mse(out, y, m)
    n = out.size if m is None else float(np.sum(m))
    return l, n


def _fit(net, n_train, batch_grad, eval_train, eval_val, cfg: TrainConfig, callback=None) -> History:
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = Adam(net.params(), cfg.beta1, cfg.beta2, cfg.eps)
    hist = History(config=asdict(cfg))
    best, best_params, wait = math.inf, None, 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        order = rng.permutation(n_train)
        for s in range(0, n_train, cfg.batch):
            idx = np.sort(order[s : s + cfg.batch])
            loss, grads = batch_grad(idx)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {s}, lr {lr}")
            opt.step(net.params(), grads, lr)
        tr = eval_train()
        hist.train_loss.append(tr)
        hist.lr.append(lr)
        if eval_val is not None:
            va = eval_val()
            hist.val_loss.append(va)
            if not math.isfinite(va):
                raise NumericalError(f"non-finite validation loss at epoch {epoch}")
            if va < best - cfg.min_delta:
                best, wait, hist.best_epoch = va, 0, epoch
                best_params = [p.copy() for p in net.params()]
            else:
                wait += 1
            if cfg.patience is not None and wait >= cfg.patience:
                hist.stopped_early = True
                break
        if callback:
            callback(epoch, hist)
    if best_params is not None:
        for p, b in zip(net.params(), best_params):
            p[...] = b
    return hist


def train(net: Mlp, X, Y, M=None, X_val=None, Y_val=None, M_val=None, cfg: TrainConfig | None = None,
          callback=None) -> History:
    """Mini-batch Adam on the masked MSE with a step learning-rate schedule.

    With a validation set, training stops after ``cfg.patience`` epochs without a
    decrease of at least ``cfg.min_delta`` and the best-validation weights are
    restored. Inputs and targets must already be normalized.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)

    def batch_grad(idx):
        out, cache = net.forward(X[idx], cache=True)
        loss, g = masked_mse(out, Y[idx], None if M is None else M[idx])
        grads, _ = net.backward(cache, g)
        return loss, grads

    ev_tr = lambda: _evaluate(net, X, Y, M, _surface_loss)  # noqa: E731
    ev_va = None
    if X_val is not None:
        ev_va = lambda: _evaluate(net, X_val, Y_val, M_val, _surface_loss)  # noqa: E731
    return _fit(net, len(X), batch_grad, ev_tr, ev_va, cfg, callback)


def train_dml(net: Mlp, X, Y, dYdX, X_val=None, Y_val=None, dYdX_val=None, cfg: TrainConfig | None = None,
              callback=None) -> History:
    """Differential regression: value MSE plus ``cfg.dml_weight`` times derivative MSE.

    ``Y`` has one column per output; ``dYdX`` holds the derivative targets of the
    mean output (shape ``(N, in)``). History losses are value MSE only.
    """
    cfg = cfg or TrainConfig.dml()
    X, Y, D = (np.asarray(a, dtype=float) for a in (X, Y, dYdX))

    def batch_grad(idx):
        loss, _, _, grads = dml_loss_and_grad(net, X[idx], Y[idx], D[idx], cfg.dml_weight)
        return loss, grads

    ev_tr = lambda: _evaluate(net, X, Y, None, _surface_loss)  # noqa: E731
    ev_va = None
    if X_val is not None:
        ev_va = lambda: _evaluate(net, X_val, Y_val, None, _surface_loss)  # noqa: E731
    return _fit(net, len(X), batch_grad, ev_tr, ev_va, cfg, callback)
