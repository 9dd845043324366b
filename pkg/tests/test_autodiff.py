"""Tensor engine: forward oracles, gradient checks, and engine invariants."""

import numpy as np
import pytest

from poseadapt.autodiff import (
    ContractError,
    ShapeError,
    Tensor,
    conv2d,
    dense,
    depthwise_conv2d,
    finite_diff_check,
    global_avg_pool,
    h_sigmoid,
    h_swish,
    no_grad,
    relu6,
    softmax,
    spatial_channel_avg_pool,
    spatial_channel_max_pool,
)

from oracles import (
    conv2d_loops,
    dense_loops,
    depthwise_loops,
    gap_loops,
    sap_loops,
    smp_loops,
)


# -- conv2d -----------------------------------------------------------------


def test_conv2d_1x1_all_ones_is_channel_sum():
    x = Tensor(np.array([[[1.0]], [[2.0]]]))
    w = Tensor(np.ones((1, 2, 1, 1)))
    b = Tensor(np.array([0.25]))
    out = conv2d(x, w, b, stride=1, padding=0)
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(3.25)


def test_conv2d_shape_arithmetic():
    x = Tensor(np.zeros((3, 8, 8)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    b = Tensor(np.zeros(4))
    assert conv2d(x, w, b, stride=2, padding=1).shape == (4, 4, 4)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    expected = conv2d_loops(x, w, b, stride=1, padding=0)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=0)
    np.testing.assert_allclose(got.data, expected, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_strides_and_padding_vs_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    expected = conv2d_loops(x, w, b, stride, padding)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(got.data, expected, atol=1e-12)


def test_conv2d_batched_matches_per_sample():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    batched = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    for i in range(3):
        single = conv2d(Tensor(x[i]), Tensor(w), Tensor(b), stride=2, padding=1)
        np.testing.assert_array_equal(batched.data[i], single.data)


def test_conv2d_channel_mismatch_names_both_shapes():
    x = Tensor(np.zeros((2, 4, 4)))
    w = Tensor(np.zeros((3, 5, 3, 3)))
    with pytest.raises(ShapeError) as err:
        conv2d(x, w, Tensor(np.zeros(3)), stride=1, padding=1)
    message = str(err.value)
    assert "(2, 4, 4)" in message and "(3, 5, 3, 3)" in message


# -- depthwise --------------------------------------------------------------


def test_depthwise_single_channel_equals_conv2d():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 5, 5))
    w = rng.normal(size=(1, 3, 3))
    b = rng.normal(size=1)
    dw = depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
    cv = conv2d(Tensor(x), Tensor(w[None]), Tensor(b), stride=1, padding=1)
    np.testing.assert_allclose(dw.data, cv.data, atol=1e-14)


def test_depthwise_shape_preserved():
    out = depthwise_conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 3, 3))),
                           Tensor(np.zeros(3)), stride=1, padding=1)
    assert out.shape == (3, 4, 4)


def test_depthwise_matches_loop_oracle():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(4, 6, 6))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    for stride, padding in [(1, 1), (2, 0), (2, 1)]:
        expected = depthwise_loops(x, w, b, stride, padding)
        got = depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b),
                               stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, expected, atol=1e-12)


# -- dense --------------------------------------------------------------------


def test_dense_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_hand_arithmetic():
    x = Tensor(np.array([[1.0, 2.0]]))
    w = Tensor(np.array([[3.0], [-1.0]]))
    b = Tensor(np.array([0.5]))
    assert dense(x, w, b).data[0, 0] == pytest.approx(1.5)


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 7))
    w = rng.normal(size=(7, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(dense(Tensor(x), Tensor(w), Tensor(b)).data,
                               dense_loops(x, w, b), atol=1e-12)


def test_dense_extent_mismatch():
    with pytest.raises(ShapeError):
        dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


# -- activations ----------------------------------------------------------------


@pytest.mark.parametrize("x,expected", [(-1.0, 0.0), (3.0, 3.0), (9.0, 6.0)])
def test_relu6_points(x, expected):
    assert relu6(Tensor(x)).item() == expected


@pytest.mark.parametrize("x,expected", [(0.0, 0.5), (-3.0, 0.0), (3.0, 1.0)])
def test_h_sigmoid_points(x, expected):
    assert h_sigmoid(Tensor(x)).item() == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x,expected", [(3.0, 3.0), (-3.0, 0.0), (-1.0, -1.0 / 3.0)])
def test_h_swish_points(x, expected):
    assert h_swish(Tensor(x)).item() == pytest.approx(expected, abs=1e-15)


def test_h_swish_equals_x_times_h_sigmoid_exactly():
    x = np.concatenate([np.linspace(-8, 8, 4001), [-3.0, 0.0, 3.0]])
    lhs = h_swish(Tensor(x)).data
    rhs = x * h_sigmoid(Tensor(x)).data
    np.testing.assert_array_equal(lhs, rhs)


# -- pooling ----------------------------------------------------------------------


def test_gap_constant_map():
    out = global_avg_pool(Tensor(np.full((3, 4, 4), 2.5)))
    np.testing.assert_array_equal(out.data, [2.5, 2.5, 2.5])


def test_gap_hand_case():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert global_avg_pool(Tensor(x)).data[0] == pytest.approx(2.5)


def test_gap_matches_loop_oracle():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(5, 3, 3))
    np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, gap_loops(x),
                               atol=1e-12)


def test_smp_single_channel_flattens():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 3, 4))
    np.testing.assert_array_equal(spatial_channel_max_pool(Tensor(x)).data,
                                  x[0].reshape(-1))


def test_smp_two_constant_channels():
    x = np.stack([np.ones((3, 3)), 2 * np.ones((3, 3))])
    np.testing.assert_array_equal(spatial_channel_max_pool(Tensor(x)).data,
                                  np.full(9, 2.0))


def test_sap_two_constant_channels():
    x = np.stack([np.ones((3, 3)), 2 * np.ones((3, 3))])
    np.testing.assert_array_equal(spatial_channel_avg_pool(Tensor(x)).data,
                                  np.full(9, 1.5))


def test_smp_sap_oracle_and_length_49():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(8, 7, 7))
    smp = spatial_channel_max_pool(Tensor(x)).data
    sap = spatial_channel_avg_pool(Tensor(x)).data
    assert smp.shape == (49,) and sap.shape == (49,)
    np.testing.assert_allclose(smp, smp_loops(x), atol=1e-12)
    np.testing.assert_allclose(sap, sap_loops(x), atol=1e-12)
    assert (smp >= sap).all()


# -- backward -----------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.array([1.0, 2.0, 3.0]), True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_square_hand_derivative():
    x = Tensor(np.array([1.0, -2.0]), True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(12)
    params = {
        "w1": Tensor(rng.normal(size=(4, 8)), True),
        "b1": Tensor(rng.normal(size=8), True),
        "w2": Tensor(rng.normal(size=(8, 5)), True),
        "b2": Tensor(rng.normal(size=5), True),
        "w3": Tensor(rng.normal(size=(5, 2)), True),
        "b3": Tensor(rng.normal(size=2), True),
    }
    x = rng.normal(size=(3, 4))

    def loss():
        h1 = h_swish(dense(Tensor(x), params["w1"], params["b1"]))
        h2 = dense(h1, params["w2"], params["b2"]).relu()
        out = dense(h2, params["w3"], params["b3"])
        return (out * out).mean()

    assert finite_diff_check(loss, params, step=1e-5) < 1e-4


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), True)
    y = x * 3.0 + x * x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(3.0 + 4.0)


# -- per-op finite-difference sweep ----------------------------------------------


def _fd_case(op_name, seed):
    rng = np.random.default_rng(seed)
    if op_name == "conv2d":
        c_in, c_out = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 3]))
        h = int(rng.integers(k, k + 5))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.choice([0, 1]))
        params = {
            "x": Tensor(rng.normal(size=(c_in, h, h)), True),
            "w": Tensor(rng.normal(size=(c_out, c_in, k, k)), True),
            "b": Tensor(rng.normal(size=c_out), True),
        }
        fn = lambda: (conv2d(params["x"], params["w"], params["b"],
                             stride=stride, padding=padding) ** 2).sum()
    elif op_name == "depthwise":
        c = int(rng.integers(1, 5))
        h = int(rng.integers(3, 8))
        stride = int(rng.choice([1, 2]))
        params = {
            "x": Tensor(rng.normal(size=(c, h, h)), True),
            "w": Tensor(rng.normal(size=(c, 3, 3)), True),
            "b": Tensor(rng.normal(size=c), True),
        }
        fn = lambda: (depthwise_conv2d(params["x"], params["w"], params["b"],
                                       stride=stride, padding=1) ** 2).sum()
    elif op_name == "dense":
        n, d_in, d_out = (int(v) for v in rng.integers(1, 6, size=3))
        params = {
            "x": Tensor(rng.normal(size=(n, d_in)), True),
            "w": Tensor(rng.normal(size=(d_in, d_out)), True),
            "b": Tensor(rng.normal(size=d_out), True),
        }
        fn = lambda: (dense(params["x"], params["w"], params["b"]) ** 2).sum()
    elif op_name in ("relu6", "h_sigmoid", "h_swish"):
        # keep samples off the kinks: |x - kink| > 10 * fd step
        x = rng.normal(scale=2.0, size=12)
        for kink in (-3.0, 0.0, 3.0, 6.0):
            x = np.where(np.abs(x - kink) < 1e-3, x + 0.01, x)
        params = {"x": Tensor(x, True)}
        op = {"relu6": relu6, "h_sigmoid": h_sigmoid, "h_swish": h_swish}[op_name]
        weights = rng.normal(size=12)
        fn = lambda: (op(params["x"]) * weights).sum()
    elif op_name == "pools":
        c = int(rng.integers(2, 6))
        x = rng.normal(size=(c, 3, 3))
        params = {"x": Tensor(x, True)}
        weights = rng.normal(size=9)
        fn = lambda: ((spatial_channel_max_pool(params["x"]) * weights).sum()
                      + (spatial_channel_avg_pool(params["x"]) * weights).sum()
                      + (global_avg_pool(params["x"]) ** 2).sum())
    elif op_name == "elementwise":
        n = int(rng.integers(2, 7))
        params = {
            "a": Tensor(rng.normal(size=n) + 3.0, True),
            "b": Tensor(rng.normal(size=n) + 3.0, True),
        }
        fn = lambda: ((params["a"] * params["b"] + params["a"] / params["b"]
                       - params["b"]).exp().sum()
                      + (params["a"] ** 2).sqrt().sum())
    elif op_name == "matmul_softmax":
        n, d = (int(v) for v in rng.integers(2, 5, size=2))
        params = {
            "a": Tensor(rng.normal(size=(n, d)), True),
            "b": Tensor(rng.normal(size=(d, n)), True),
        }
        weights = rng.normal(size=(n, n))
        fn = lambda: (softmax(params["a"] @ params["b"], axis=-1) * weights).sum()
    else:
        raise AssertionError(op_name)
    return fn, params


@pytest.mark.parametrize("op_name", ["conv2d", "depthwise", "dense", "relu6",
                                     "h_sigmoid", "h_swish", "pools",
                                     "elementwise", "matmul_softmax"])
def test_finite_difference_sweep(op_name):
    """Analytic gradients match central differences over >= 20 random cases."""
    worst = 0.0
    for seed in range(20):
        fn, params = _fd_case(op_name, 1000 + seed)
        worst = max(worst, finite_diff_check(fn, params, step=1e-5))
    assert worst < 1e-4, f"{op_name}: worst relative error {worst:.3e}"


# -- finite_diff_check itself --------------------------------------------------------


def test_finite_diff_check_linear_is_tiny():
    p = {"x": Tensor(np.array([1.0, 2.0, 3.0]), True)}
    err = finite_diff_check(lambda: (p["x"] * np.array([2.0, -1.0, 0.5])).sum(), p)
    assert err < 1e-10


def test_finite_diff_check_quadratic():
    p = {"x": Tensor(np.array([1.5, -0.5]), True)}
    err = finite_diff_check(lambda: (p["x"] * p["x"]).sum(), p)
    assert err < 1e-7


# -- engine invariants ---------------------------------------------------------------


def test_replay_determinism_bitwise():
    def run():
        rng = np.random.default_rng(77)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), True)
        b = Tensor(rng.normal(size=4), True)
        out = h_swish(conv2d(x, w, b, stride=2, padding=1))
        loss = (out * out).sum()
        loss.backward()
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert y._backward is None


def test_stack_and_concat_gradients():
    a = Tensor(np.array([1.0, 2.0]), True)
    b = Tensor(np.array([3.0, 4.0]), True)
    s = Tensor.stack([a, b], axis=0)
    c = Tensor.concat([a, b], axis=0)
    ((s * s).sum() + c.sum()).backward()
    np.testing.assert_array_equal(a.grad, [2 * 1 + 1, 2 * 2 + 1])
    np.testing.assert_array_equal(b.grad, [2 * 3 + 1, 2 * 4 + 1])
