import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostream.functional import (
    ShapeError,
    activation,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    sigmoid,
    softmax_channels,
    transposed_conv2d,
)
from twostream.gradcheck import grad_check
from twostream.tensor import Graph, Tensor, backward, no_grad


def naive_conv(x, w, b, stride, padding):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[n, c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


def naive_maxpool(x):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // 2, W // 2))
    for n in range(B):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    out[n, c, i, j] = max(
                        x[n, c, 2 * i, 2 * j], x[n, c, 2 * i, 2 * j + 1],
                        x[n, c, 2 * i + 1, 2 * j], x[n, c, 2 * i + 1, 2 * j + 1],
                    )
    return out


# -- conv2d ---------------------------------------------------------------

def test_conv2d_box_sum():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1)
    assert out.data[0, 0, 1, 1] == 9
    assert out.data[0, 0, 0, 0] == 4 and out.data[0, 0, 2, 2] == 4
    assert out.data[0, 0, 0, 1] == 6


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), None, 1, 0)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError, match="channels"):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="larger than padded"):
        conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))


def test_conv2d_grad_check():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    err = grad_check(lambda a, k, c: conv2d(a, k, c, 1, 1), [x, w, b], eps=1e-5)
    assert err <= 1e-4
    err = grad_check(lambda a, k, c: conv2d(a, k, c, 2, 1), [x, w, b], eps=1e-5)
    assert err <= 1e-4


@pytest.mark.parametrize("stride,padding,size", [(1, 1, 6), (2, 1, 7), (2, 0, 8)])
def test_conv2d_adjoint(stride, padding, size):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, size, size))
    w = rng.standard_normal((4, 3, 3, 3))
    xt = Tensor(x, requires_grad=True)
    y = conv2d(xt, Tensor(w), None, stride, padding)
    probe = rng.standard_normal(y.shape)
    backward((y * probe).sum())
    assert abs(np.sum(y.data * probe) - np.sum(x * xt.grad)) < 1e-12 * max(1.0, abs(np.sum(y.data * probe)))


# -- transposed conv --------------------------------------------------------

def test_transposed_conv_single_pixel():
    out = transposed_conv2d(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))


def test_transposed_conv_tiling():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 1.0
    out = transposed_conv2d(Tensor(x), Tensor(w)).data[0, 0]
    expected = np.array([
        [1, 0, 2, 0],
        [0, 0, 0, 0],
        [3, 0, 4, 0],
        [0, 0, 0, 0],
    ], dtype=float)
    np.testing.assert_array_equal(out, expected)


def test_transposed_conv_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((5, 3, 2, 2))  # conv: 3 -> 5; transposed: 5 -> 3
    x = rng.standard_normal((2, 3, 6, 8))
    y = rng.standard_normal((2, 5, 3, 4))
    lhs = np.sum(conv2d(Tensor(x), Tensor(w), None, stride=2).data * y)
    rhs = np.sum(x * transposed_conv2d(Tensor(y), Tensor(w)).data)
    assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_transposed_conv_grad_check():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 3, 2))
    w = rng.standard_normal((3, 2, 2, 2))
    b = rng.standard_normal(2)
    assert grad_check(lambda a, k, c: transposed_conv2d(a, k, c), [x, w, b]) <= 1e-4


def test_transposed_conv_rejects_non_4d():
    with pytest.raises(ShapeError):
        transposed_conv2d(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 1, 2, 2))))


# -- maxpool ----------------------------------------------------------------

def test_maxpool_window():
    assert maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4


def test_maxpool_constant_tie_break():
    x = Tensor(np.full((1, 2, 4, 4), 7.0), requires_grad=True)
    y = maxpool2d(x)
    np.testing.assert_array_equal(y.data, 7.0)
    backward(y.sum())
    g = x.grad
    # exactly one element per window, the top-left one
    assert g.sum() == 8
    np.testing.assert_array_equal(g[:, :, ::2, ::2], 1.0)


def test_maxpool_matches_window_scan():
    x = np.random.default_rng(6).standard_normal((1, 1, 8, 8))
    np.testing.assert_array_equal(maxpool2d(Tensor(x)).data, naive_maxpool(x))


def test_maxpool_grad_check_away_from_ties():
    x = np.random.default_rng(7).permutation(64).reshape(1, 1, 8, 8) * 0.1
    assert grad_check(maxpool2d, [x]) <= 1e-4


def test_maxpool_odd_size_errors():
    with pytest.raises(ShapeError, match="pad"):
        maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))


# -- activations ------------------------------------------------------------

def test_sigmoid_zero():
    assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5


def test_sigmoid_extreme_is_finite():
    out = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_softmax_uniform():
    out = softmax_channels(Tensor(np.zeros((1, 5, 2, 2)))).data
    np.testing.assert_allclose(out, 0.2, rtol=0, atol=1e-15)


def test_relu_finite_difference_probe():
    for x0, expected in [(-1.0, 0.0), (1.0, 1.0)]:
        eps = 1e-5
        num = (relu(Tensor([x0 + eps])).data[0] - relu(Tensor([x0 - eps])).data[0]) / (2 * eps)
        t = Tensor([x0], requires_grad=True)
        backward(relu(t).sum())
        assert t.grad[0] == expected
        assert abs(num - expected) < 1e-9


@pytest.mark.parametrize("kind", ["sigmoid", "softmax_channels"])
def test_activation_grad_check(kind):
    x = np.random.default_rng(8).standard_normal((2, 3, 2, 2))
    assert grad_check(lambda a: activation(a, kind), [x]) <= 1e-4


def test_relu_grad_check_away_from_kink():
    x = np.random.default_rng(9).standard_normal((2, 3, 4))
    x[np.abs(x) < 1e-3] = 0.5
    assert grad_check(relu, [x]) <= 1e-4


def test_activation_unknown_kind():
    with pytest.raises(ValueError):
        activation(Tensor(np.zeros(2)), "tanh")


# -- concat -----------------------------------------------------------------

def test_concat_64_plus_64():
    rng = np.random.default_rng(10)
    a, b = rng.standard_normal((1, 64, 4, 4)), rng.standard_normal((1, 64, 4, 4))
    out = concat_channels(Tensor(a), Tensor(b)).data
    assert out.shape == (1, 128, 4, 4)
    np.testing.assert_array_equal(out[:, :64], a)
    np.testing.assert_array_equal(out[:, 64:], b)


def test_concat_empty_is_identity():
    a = np.random.default_rng(11).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(concat_channels(Tensor(a), Tensor(np.zeros((2, 0, 4, 4)))).data, a)


def test_concat_adjoint_and_mismatch():
    rng = np.random.default_rng(12)
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    y = concat_channels(a, b)
    probe = rng.standard_normal(y.shape)
    backward((y * probe).sum())
    np.testing.assert_array_equal(a.grad, probe[:, :2])
    np.testing.assert_array_equal(b.grad, probe[:, 2:])
    lhs = np.sum(y.data * probe)
    rhs = np.sum(a.data * a.grad) + np.sum(b.data * b.grad)
    assert abs(lhs - rhs) < 1e-12
    with pytest.raises(ShapeError):
        concat_channels(a, Tensor(np.zeros((1, 1, 4, 3))))


# -- backward / graph ---------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    v = np.random.default_rng(13).standard_normal(5)
    x = Tensor(v, requires_grad=True)
    backward((x * x).sum() / 2)
    np.testing.assert_allclose(x.grad, v, rtol=0, atol=1e-15)


def test_backward_accumulates_and_fans_out():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * 3.0 + x  # fan-out at x
    backward(y.sum())
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    backward((x * 3.0 + x).sum())
    np.testing.assert_array_equal(x.grad, [8.0, 8.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_graph_topological_order():
    x = Tensor(np.ones(3), requires_grad=True)
    a = x * 2.0
    b = a + x
    loss = (a * b).sum()
    g = Graph.from_output(loss)
    pos = {id(t): i for i, t in enumerate(g.nodes)}
    for t in g.nodes:
        if t.node is not None:
            for p in t.node.parents:
                assert pos[id(p)] < pos[id(t)]
    assert len(g.nodes) == len({id(t) for t in g.nodes})
    assert g.leaves() == [x]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_grad_check_linear_is_exact():
    x = np.random.default_rng(14).standard_normal(7)
    assert grad_check(lambda a: a * 3.0, [x]) < 1e-10


def test_elementwise_ops_grad_check():
    rng = np.random.default_rng(15)
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (1, 4))

    def f(p, q):
        return ((p * q + p / q - (1.0 - q)) .log() + (p - q).exp() * 0.5).mean(axis=0)

    assert grad_check(f, [a, b]) <= 1e-4


def test_clip_and_getitem_grad():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    backward(x.clip(0.0, 1.0).sum() + x[1:].sum())
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 1.0])


def test_float32_backward_keeps_dtype():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32), requires_grad=True)
    y = conv2d(x, w, None, 1, 1).astype(np.float64)
    backward(y.sum())
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
    st.integers(3, 7), st.integers(1, 2), st.integers(0, 2), st.integers(0, 10_000),
)
def test_conv2d_adjoint_property(B, C, Co, size, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, size, size))
    w = rng.standard_normal((Co, C, 3, 3))
    xt = Tensor(x, requires_grad=True)
    y = conv2d(xt, Tensor(w), None, stride, padding)
    probe = rng.standard_normal(y.shape)
    backward((y * probe).sum())
    lhs = np.sum(y.data * probe)
    assert abs(lhs - np.sum(x * xt.grad)) <= 1e-12 * max(1.0, np.abs(y.data * probe).sum())


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(16)
        x = Tensor(rng.standard_normal((2, 2, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        y = maxpool2d(relu(conv2d(x, w, None, 1, 1)))
        backward((y * y).sum())
        return y.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_grad_check_non_contiguous_input():
    x = np.random.default_rng(5).uniform(0.5, 1.5, (3, 4)).T
    assert grad_check(lambda a: (a * a).sum(), [x]) <= 1e-6


def test_check_parameters_kink_rule_keeps_real_errors():
    from twostream.gradcheck import check_parameters
    from twostream.functional import relu

    w = Tensor(np.array([1e-6, 0.5, -0.5]), requires_grad=True)
    skipped = []
    errs = check_parameters(lambda: relu(w).sum(), {"w": w}, eps=1e-5, kink_tol=1e-4, skipped=skipped)
    assert skipped == [("w", 0)] and errs["w"] < 1e-8
    assert check_parameters(lambda: relu(w).sum(), {"w": w}, eps=1e-5)["w"] > 0.1

    # a wrong backward is smooth, so it is never skipped
    def bad():
        return Tensor.from_op(np.sum(w.data ** 2), "bad", (w,), lambda g: (g * w.data,))

    skipped = []
    errs = check_parameters(bad, {"w": w}, eps=1e-5, kink_tol=1e-4, skipped=skipped)
    assert not skipped and errs["w"] > 0.1
