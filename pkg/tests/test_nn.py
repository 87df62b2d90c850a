import numpy as np
import pytest

from qrheston.errors import DomainError
from qrheston.nn import (
    ARCHITECTURES,
    Mlp,
    TrainConfig,
    dml_loss_and_grad,
    masked_mse,
    silu,
    silu_prime,
    silu_second,
    train,
    train_dml,
    warm_start,
)


def _flat_fd(net, f, h=1e-6):
    """Central differences of scalar ``f(net)`` over every parameter."""
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = f(net)
            p[idx] = old - h
            dn = f(net)
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


def test_silu_derivatives():
    x = np.linspace(-6, 6, 41)
    h = 1e-5
    assert np.allclose(silu_prime(x), (silu(x + h) - silu(x - h)) / (2 * h), atol=1e-9)
    assert np.allclose(silu_second(x), (silu_prime(x + h) - silu_prime(x - h)) / (2 * h), atol=1e-8)


def test_architectures():
    assert Mlp.for_arch("ptm").dims == (120,) + (25,) * 7 + (15,)
    assert Mlp.for_arch("dml").n_layers == 5
    assert set(ARCHITECTURES) == {"ptm", "mtp-spx", "mtp-vix", "dml"}
    with pytest.raises(DomainError):
        Mlp.for_arch("cnn")


def test_parameter_gradient_matches_finite_differences(rng):
    net = Mlp((3, 4, 4, 2), seed=1)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    mask = rng.random((5, 2)) > 0.3

    def loss(n):
        return masked_mse(n.forward(x), y, mask)[0]

    out, cache = net.forward(x, cache=True)
    grads, _ = net.backward(cache, masked_mse(out, y, mask)[1])
    for g, fd in zip(grads, _flat_fd(net, loss)):
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_input_gradient_and_jacobian(rng):
    net = Mlp((4, 6, 3), seed=2)
    x = rng.normal(size=4)
    J = net.jacobian(x)
    h = 1e-6
    fd = np.stack([(net(x + h * e) - net(x - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    assert np.allclose(J, fd, atol=1e-8)
    w = rng.normal(size=3)
    assert np.allclose(net.input_gradient(x, w), w @ J)


def test_weighted_mse():
    p, t = np.array([[1.0, 2.0, 3.0]]), np.array([[0.0, 0.0, np.nan]])
    l, g = masked_mse(p, t, np.array([[1.0, 3.0, 0.0]]))
    assert l == pytest.approx((1 + 3 * 4) / 4) and np.allclose(g, [[0.5, 3.0, 0.0]])
    l, g = masked_mse(p, t, np.array([[True, False, False]]))
    assert l == 1.0 and np.allclose(g, [[2.0, 0.0, 0.0]])
    assert masked_mse(p, t, np.zeros((1, 3)))[0] == 0.0


def test_dml_gradient_matches_finite_differences(rng):
    net = Mlp((3, 5, 5, 2), seed=4)
    x, y, d = rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    _, _, _, grads = dml_loss_and_grad(net, x, y, d, weight=0.7)
    fds = _flat_fd(net, lambda n: dml_loss_and_grad(n, x, y, d, weight=0.7)[0])
    for g, fd in zip(grads, fds):
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_dml_with_zero_weight_is_plain_regression(rng):
    x, y = rng.normal(size=(64, 3)), rng.normal(size=(64, 2))
    a, b = Mlp((3, 8, 2), seed=0), Mlp((3, 8, 2), seed=0)
    cfg = TrainConfig(epochs=3, patience=None, batch=16, dml_weight=0.0)
    train(a, x, y, cfg=cfg)
    train_dml(b, x, y, np.zeros((64, 3)), cfg=cfg)
    assert a.digest() == b.digest()


def test_learning_rate_schedule():
    cfg = TrainConfig(lr0=1e-3, lr_halving_every=10)
    assert cfg.lr(0) == cfg.lr(9) == 1e-3 and cfg.lr(10) == 5e-4 and cfg.lr(25) == 2.5e-4
    assert TrainConfig.dml().epochs == 20 and TrainConfig.dml().lr(5) == 5e-4
    assert TrainConfig.desk(epochs=5).epochs == 5


def test_overfits_a_small_set(rng):
    x = rng.uniform(-1, 1, size=(32, 2))
    y = np.stack([np.sin(2 * x[:, 0]) * x[:, 1], x[:, 0] ** 2], axis=1)
    net = Mlp((2, 32, 32, 2), seed=3)
    hist = train(net, x, y, cfg=TrainConfig(epochs=800, batch=32, lr0=1e-2, lr_halving_every=200, patience=None))
    assert hist.train_loss[-1] < 1e-3 * hist.train_loss[0]


def test_early_stopping_restores_best(rng):
    x, y = rng.normal(size=(64, 2)), rng.normal(size=(64, 1))
    xv, yv = rng.normal(size=(32, 2)), rng.normal(size=(32, 1))
    net = Mlp((2, 16, 1), seed=5)
    hist = train(net, x, y, X_val=xv, Y_val=yv, cfg=TrainConfig(epochs=200, patience=3, lr0=1e-2, batch=8))
    assert hist.stopped_early
    assert len(hist.val_loss) == hist.best_epoch + 4
    assert masked_mse(net(xv), yv)[0] == pytest.approx(min(hist.val_loss))


def test_training_is_deterministic(rng):
    x, y = rng.normal(size=(40, 3)), rng.normal(size=(40, 2))
    nets = [Mlp((3, 6, 2), seed=9) for _ in range(2)]
    for n in nets:
        train(n, x, y, cfg=TrainConfig(epochs=4, batch=8, seed=2))
    assert nets[0].digest() == nets[1].digest()


def test_save_load_and_warm_start(tmp_path):
    net = Mlp.for_arch("dml", seed=3, meta={"note": "x"})
    net.save(tmp_path / "d")
    back = Mlp.load(tmp_path / "d.json")
    assert back.digest() == net.digest() and back.meta == {"note": "x"} and back.arch == "dml"
    other = warm_start(Mlp.for_arch("dml", seed=4), net)
    assert other.digest() == net.digest()
    with pytest.raises(DomainError):
        warm_start(Mlp.for_arch("ptm"), net)
    (tmp_path / "d.bin").write_bytes(b"\0" * 16)
    with pytest.raises(DomainError):
        Mlp.load(tmp_path / "d")


def test_input_width_checked():
    with pytest.raises(DomainError):
        Mlp((3, 2))(np.zeros(4))
