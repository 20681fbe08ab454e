import numpy as np
import pytest

from promptdoor.numerics import (
    Adam, NonFiniteGradient, SgdConfig, ShapeError, Tensor, _conv_py, backward, clamp, conv2d, cross_entropy,
    finite_difference_grad, matmul, mean, no_grad, precision, relative_error, relu, sgd_step, softmax, sum_,
)
from promptdoor.numerics import _conv
from promptdoor.numerics import tensor as T


# --- tensor ops ------------------------------------------------------------------------

def test_softmax_closed_form(oracles):
    np.testing.assert_allclose(softmax(Tensor([1.0, 0.0], dtype=np.float64)).data, oracles["softmax_1_0"], atol=1e-12)
    np.testing.assert_allclose(np.round(softmax(Tensor([1.0, 0.0])).data, 4), [0.7311, 0.2689])


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax(Tensor([2.5, 2.5, 2.5], dtype=np.float64)).data, [1 / 3] * 3)


def test_softmax_large_logits_stay_finite():
    p = softmax(Tensor([1000.0, 0.0], dtype=np.float64)).data
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)


def test_clamp_to_budget():
    eps = 4 / 255
    out = clamp(Tensor([0.05], dtype=np.float64), -eps, eps)
    assert out.data[0] == pytest.approx(eps)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_precision_context_switches_default_dtype():
    with precision(64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision(16)


# --- backward --------------------------------------------------------------------------

def test_linear_gradient_is_input():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.zeros(3), requires_grad=True)
    (g,) = backward(sum_(w * x), [w])
    np.testing.assert_array_equal(g, x)


def test_cross_entropy_gradient(oracles):
    z = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
    (g,) = backward(cross_entropy(z, [0]), [z])
    np.testing.assert_allclose(g[0], oracles["ce_grad_logits_1_2_3_target_0"], atol=1e-12)


def test_detached_leaf_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    ga, gb = backward(sum_(a * 2.0), [a, b])
    np.testing.assert_array_equal(gb, np.zeros(2))
    np.testing.assert_array_equal(ga, 2 * np.ones(3))


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(2), requires_grad=True) * 1.0)


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        out = w * 3.0
    assert not out.requires_grad


# --- finite differences ------------------------------------------------------------------

def test_fd_square():
    g = finite_difference_grad(lambda x: float(x[0] ** 2), [3.0], h=1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_fd_constant():
    np.testing.assert_array_equal(finite_difference_grad(lambda x: 5.0, np.ones((2, 2))), np.zeros((2, 2)))


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        finite_difference_grad(lambda x: 0.0, [1.0], h=0)


def test_fd_reports_nonfinite():
    with pytest.raises(FloatingPointError):
        finite_difference_grad(lambda x: float("nan") if x[0] < 0 else 1.0, [0.0])


def test_fd_matches_backward_on_two_layer_net():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, 5)
    w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))

    def loss(a, b):
        return cross_entropy(matmul(relu(matmul(Tensor(x), a)), b), y)

    t1 = Tensor(w1, requires_grad=True)
    t2 = Tensor(w2, requires_grad=True)
    g1, g2 = backward(loss(t1, t2), [t1, t2])
    n1 = finite_difference_grad(lambda w: loss(Tensor(w), Tensor(w2)).item(), w1)
    n2 = finite_difference_grad(lambda w: loss(Tensor(w1), Tensor(w)).item(), w2)
    assert relative_error(g1, n1) < 1e-4
    assert relative_error(g2, n2) < 1e-4


def test_conv_gradient_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)

    def f(xx, ww, bb):
        out = conv2d(xx, ww, bb, stride=2, padding=1)
        return mean(out * out)

    tx, tw, tb = (Tensor(v, requires_grad=True) for v in (x, w, b))
    gx, gw, gb = backward(f(tx, tw, tb), [tx, tw, tb])
    assert relative_error(gx, finite_difference_grad(lambda v: f(Tensor(v), Tensor(w), Tensor(b)).item(), x)) < 1e-4
    assert relative_error(gw, finite_difference_grad(lambda v: f(Tensor(x), Tensor(v), Tensor(b)).item(), w)) < 1e-4
    assert relative_error(gb, finite_difference_grad(lambda v: f(Tensor(x), Tensor(w), Tensor(v)).item(), b)) < 1e-4


# --- kernels ----------------------------------------------------------------------------

@pytest.mark.skipif(_conv.BACKEND != "cython", reason="compiled kernels not built")
def test_compiled_kernels_match_numpy():
    from promptdoor.numerics import _kernels

    rng = np.random.default_rng(2)
    for dtype in (np.float32, np.float64):
        x = rng.normal(size=(3, 4, 9, 9)).astype(dtype)
        for stride, pad in ((1, 1), (2, 1), (2, 0)):
            cols = _conv_py.im2col(x, 3, stride, pad)
            np.testing.assert_array_equal(_kernels.im2col(x, 3, stride, pad), cols)
            np.testing.assert_array_equal(_kernels.col2im(cols, x.shape, 3, stride, pad), _conv_py.col2im(cols, x.shape, 3, stride, pad))


def test_backend_is_reported():
    assert _conv.BACKEND in ("cython", "python")


# --- SGD ------------------------------------------------------------------------------------

def test_single_fixed_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    lr = sgd_step([p], [np.array([0.5])], SgdConfig(0.1), 0)
    assert lr == 0.1 and p.data[0] == pytest.approx(0.95)


def test_cosine_reaches_zero_at_horizon():
    cfg = SgdConfig(1.0, "warmup_cosine", warmup_epochs=1, total_epochs=10, iters_per_epoch=10)
    assert cfg.lr(cfg.total_iters - 1) <= 1e-3


def test_linear_warmup_to_peak():
    cfg = SgdConfig(0.002, "warmup_cosine", warmup_epochs=1, total_epochs=10, iters_per_epoch=8)
    rates = [cfg.lr(i) for i in range(8)]
    assert rates[0] == 0.0
    np.testing.assert_allclose(np.diff(rates), 0.002 / 8)
    assert cfg.lr(8) == pytest.approx(0.002, rel=0.01)
    assert max(cfg.lr(i) for i in range(cfg.total_iters)) <= 0.002


def test_schedule_matches_oracle(oracles):
    cfg = SgdConfig(1.0, "warmup_cosine", warmup_epochs=1, total_epochs=10, iters_per_epoch=10)
    assert cfg.lr(99) == pytest.approx(oracles["cosine_lr_end_ratio"], abs=1e-12)


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(learning_rate=0.1, schedule="step"),
                                dict(learning_rate=0.1, schedule="warmup_cosine", warmup_epochs=2, total_epochs=2)])
def test_sgd_config_validation(kw):
    with pytest.raises(ValueError):
        SgdConfig(**kw)


def test_nan_gradient_aborts_without_update():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([2.0]), requires_grad=True)
    with pytest.raises(NonFiniteGradient):
        sgd_step([a, b], [np.array([1.0]), np.array([np.nan])], SgdConfig(0.1), 0)
    assert a.data[0] == 1.0 and b.data[0] == 2.0


def test_adam_descends_quadratic():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(300):
        backward(sum_(w * w))
        opt.step()
    assert np.abs(w.data).max() < 1e-2
