import numpy as np
import pytest

from qmimic import numcore as nc
from helpers import check_grads, numeric_grad

SEEDS = range(5)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0), (1, 1)][seed]
    arrays = {
        "x": rng.standard_normal((2, 2, 5, 5)),
        "w": rng.standard_normal((3, 2, 3, 3)),
        "b": rng.standard_normal(3),
    }
    err = check_grads(lambda x, w, b: nc.sum_squares(nc.conv2d(x, w, b, stride, pad)), arrays)
    assert err <= 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = nc.conv2d(nc.constant(x), nc.constant(w), nc.constant(b), stride=2, pad=1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 2))
    for o in range(3):
        for i in range(3):
            for j in range(2):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv2d_channel_mismatch_is_descriptive():
    x = nc.constant(np.zeros((1, 2, 4, 4)))
    w = nc.constant(np.zeros((3, 5, 3, 3)))
    with pytest.raises(nc.ShapeError, match="channel"):
        nc.conv2d(x, w, nc.constant(np.zeros(3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_and_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the ReLU kink
    arrays = {"x": x, "w": rng.standard_normal((5, 6)), "b": rng.standard_normal(5)}
    err = check_grads(lambda x, w, b: nc.sum_squares(nc.linear(nc.relu(x), w, b)), arrays)
    assert err <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=6)
    err = check_grads(lambda z: nc.softmax_cross_entropy(z, labels), {"z": rng.standard_normal((6, 4)) * 3})
    assert err <= 1e-4


def test_softmax_cross_entropy_value():
    z = np.log(np.array([[0.5, 0.25, 0.25]]))
    ce = nc.softmax_cross_entropy(nc.constant(z), np.array([1])).value
    assert ce == pytest.approx(np.log(4))


def test_softmax_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="label"):
        nc.softmax_cross_entropy(nc.constant(np.zeros((2, 3))), np.array([0, 3]))


@pytest.mark.parametrize("seed", SEEDS)
def test_smooth_l1_gradient(seed):
    rng = np.random.default_rng(seed)
    pred = rng.standard_normal((5, 4)) * 2
    target = rng.standard_normal((5, 4))
    d = pred - target
    pred[np.abs(np.abs(d) - 1) < 1e-3] += 0.01  # stay off the quadratic/linear seam
    err = check_grads(lambda p: nc.smooth_l1(p, target), {"p": pred})
    assert err <= 1e-4


def test_smooth_l1_piecewise_value():
    pred = nc.constant(np.array([[0.5, 3.0]]))
    # 0.5 * 0.25 and 3 - 0.5, averaged over elements
    assert nc.smooth_l1(pred, np.zeros((1, 2))).value == pytest.approx((0.125 + 2.5) / 2)


def test_leaf_gradients_accumulate_across_backward_calls():
    p = nc.parameter(np.array([1.0, 2.0]))
    nc.backward(nc.sum_squares(p))
    once = p.grad.copy()
    nc.backward(nc.sum_squares(p))
    np.testing.assert_array_equal(p.grad, 2 * once)


def test_backward_requires_scalar():
    with pytest.raises(nc.ShapeError):
        nc.backward(nc.parameter(np.ones(3)))


def test_reused_node_gradient_sums_paths():
    p = nc.parameter(np.array(3.0))
    nc.backward(nc.add(nc.scale(p, 2.0), nc.sum_squares(p)))
    assert p.grad == pytest.approx(2 + 6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    p = nc.parameter(np.array([1e200]))
    with pytest.raises(nc.NonFiniteError):
        nc.sum_squares(nc.scale(p, 1e200))


def test_sgd_single_step():
    p = nc.parameter(np.array([0.0]))
    p.grad[...] = 1.0
    nc.sgd_step([p], lr=1.0, momentum=0.0, weight_decay=0.0)
    assert p.value[0] == -1.0
    assert p.grad[0] == 0.0


def test_sgd_momentum_two_steps():
    p = nc.parameter(np.array([0.0]))
    for _ in range(2):
        p.grad[...] = 1.0
        nc.sgd_step([p], lr=1.0, momentum=0.9, weight_decay=0.0)
    assert p.value[0] == pytest.approx(-2.9)


def test_sgd_converges_on_quadratic():
    p = nc.parameter(np.array([1.0]))
    for _ in range(100):
        nc.backward(nc.sum_squares(p))
        nc.sgd_step([p], lr=0.1, momentum=0.0)
    assert abs(p.value[0]) < 1e-4
    assert abs(p.value[0]) == pytest.approx(0.8**100, rel=1e-6)


def test_sgd_weight_decay_term():
    p = nc.parameter(np.array([2.0]))
    nc.sgd_step([p], lr=0.5, momentum=0.0, weight_decay=0.1)
    assert p.value[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_names_parameter_with_nan_gradient():
    p = nc.parameter(np.array([1.0]), "conv0.weight")
    p.grad[...] = np.nan
    with pytest.raises(nc.NonFiniteError, match="conv0.weight"):
        nc.sgd_step([p], lr=0.1)


def test_clip_grad_norm_caps_each_tensor_separately():
    a = nc.parameter(np.zeros(2))
    b = nc.parameter(np.zeros(2))
    a.grad[...] = [3.0, 4.0]
    b.grad[...] = [0.3, 0.4]
    largest = nc.clip_grad_norm([a, b], 1.0)
    assert largest == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])
    np.testing.assert_allclose(b.grad, [0.3, 0.4])


def test_numeric_grad_helper_on_known_function():
    x = np.array([1.0, -2.0])
    g = numeric_grad(lambda: float(np.sum(x**3)), x)
    np.testing.assert_allclose(g, 3 * np.array([1.0, 4.0]), rtol=1e-6)
