import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cats import autodiff as ad
from cats.autodiff import Tensor, grad_check


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- conv3d --------------------------------------------------------------------

def test_conv3d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    w = Tensor(np.ones((1, 1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    np.testing.assert_array_equal(ad.conv3d(x, w, b).data, x.data)


def test_conv3d_shape_same_padding(rng):
    x = Tensor(rng.standard_normal((2, 3, 8, 8, 8)).astype(np.float32))
    w = Tensor(rng.standard_normal((16, 3, 3, 3, 3)).astype(np.float32))
    out = ad.conv3d(x, w, Tensor(np.zeros(16, np.float32)), stride=1, padding=1)
    assert out.shape == (2, 16, 8, 8, 8)


def test_conv3d_sum_of_ones():
    out = ad.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == 27.0


@pytest.mark.parametrize("stride,padding,size", [(1, 0, 5), (2, 1, 6), (3, 1, 7)])
def test_conv3d_output_extent(rng, stride, padding, size):
    x = Tensor(rng.standard_normal((1, 2, size, size, size)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    out = ad.conv3d(x, w, stride=stride, padding=padding)
    expect = (size + 2 * padding - 3) // stride + 1
    assert out.shape == (1, 3, expect, expect, expect)


def test_conv3d_matches_direct_loop(rng):
    x = rng.standard_normal((1, 2, 5, 4, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    out = ad.conv3d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for a in range(out.shape[2]):
            for b in range(out.shape[3]):
                for c in range(out.shape[4]):
                    patch = xp[0, :, 2 * a:2 * a + 3, 2 * b:2 * b + 3, 2 * c:2 * c + 3]
                    ref[0, o, a, b, c] = (patch * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv3d_channel_mismatch_names_dimension(rng):
    with pytest.raises(ad.ShapeError, match="channel"):
        ad.conv3d(rand(rng, 1, 2, 4, 4, 4), rand(rng, 3, 5, 3, 3, 3))


def test_conv3d_kernel_larger_than_padded_extent(rng):
    with pytest.raises(ad.ShapeError, match="spatial dimension W"):
        ad.conv3d(rand(rng, 1, 1, 2, 4, 4), rand(rng, 1, 1, 3, 3, 3))


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv3d_gradients(rng, stride, padding):
    x, w, b = rand(rng, 2, 2, 5, 5, 5), rand(rng, 3, 2, 3, 3, 3), rand(rng, 3)
    r = rng.standard_normal(ad.conv3d(x, w, b, stride, padding).shape)
    err = grad_check(lambda: (ad.conv3d(x, w, b, stride, padding) * r).sum(), [x, w, b])
    assert err < 1e-6


# -- conv_transpose3d ----------------------------------------------------------

def test_conv_transpose3d_shape(rng):
    out = ad.conv_transpose3d(rand(rng, 1, 1, 2, 2, 2), rand(rng, 1, 1, 2, 2, 2), stride=2)
    assert out.shape == (1, 1, 4, 4, 4)


def test_conv_transpose3d_disjoint_ones():
    out = ad.conv_transpose3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 2, 2, 2))),
                              stride=2)
    assert out.shape == (1, 1, 6, 6, 6)
    np.testing.assert_array_equal(out.data, 1.0)


def _dense_conv_matrix(w, shape, stride, padding):
    """Explicit matrix of x -> conv3d(x) built column by column from unit impulses."""
    n = int(np.prod(shape))
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(ad.conv3d(Tensor(e.reshape(shape)), Tensor(w), stride=stride,
                              padding=padding).data.reshape(-1))
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("stride,k", [(2, 2), (1, 3), (2, 3)])
def test_conv_transpose_is_dense_adjoint(rng, stride, k):
    w = rng.standard_normal((2, 3, k, k, k))
    in_shape = (1, 3, 4, 4, 4) if (4 - k) % stride == 0 else (1, 3, 5, 5, 5)
    if (in_shape[2] - k) % stride:
        in_shape = (1, 3, k + 2 * stride, k + 2 * stride, k + 2 * stride)
    a = _dense_conv_matrix(w, in_shape, stride, 0)
    y = rng.standard_normal(a.shape[0])
    out_shape = ad.conv3d(Tensor(np.zeros(in_shape)), Tensor(w), stride=stride).shape
    t = ad.conv_transpose3d(Tensor(y.reshape(out_shape)), Tensor(w), stride=stride).data
    np.testing.assert_allclose(t.reshape(-1), a.T @ y, atol=1e-10)


def test_conv_transpose_inner_product_identity(rng):
    w = rng.standard_normal((4, 3, 2, 2, 2))
    x = rng.standard_normal((2, 3, 4, 4, 4))
    y = rng.standard_normal((2, 4, 2, 2, 2))
    lhs = (ad.conv3d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    rhs = (x * ad.conv_transpose3d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert abs(lhs - rhs) < 1e-8


@pytest.mark.parametrize("stride,k", [(2, 2), (1, 3)])
def test_conv_transpose3d_gradients(rng, stride, k):
    x, w, b = rand(rng, 2, 3, 3, 3, 3), rand(rng, 3, 2, k, k, k), rand(rng, 2)
    r = rng.standard_normal(ad.conv_transpose3d(x, w, b, stride).shape)
    err = grad_check(lambda: (ad.conv_transpose3d(x, w, b, stride) * r).sum(), [x, w, b])
    assert err < 1e-6


# -- maxpool -------------------------------------------------------------------

def test_maxpool_constant():
    out = ad.maxpool3d(Tensor(np.full((1, 2, 4, 6, 8), 3.0)))
    assert out.shape == (1, 2, 2, 3, 4)
    np.testing.assert_array_equal(out.data, 3.0)


def test_maxpool_single_window():
    out = ad.maxpool3d(Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2)))
    assert out.item() == 7.0


def test_maxpool_gradient_routes_to_argmax(rng):
    x = rand(rng, 1, 1, 4, 4, 4)
    ad.maxpool3d(x).sum().backward()
    expect = np.zeros(64)
    for cx in range(2):
        for cy in range(2):
            for cz in range(2):
                win = x.data[0, 0, 2 * cx:2 * cx + 2, 2 * cy:2 * cy + 2, 2 * cz:2 * cz + 2]
                i, j, k = np.unravel_index(win.argmax(), win.shape)
                expect[np.ravel_multi_index((2 * cx + i, 2 * cy + j, 2 * cz + k), (4, 4, 4))] = 1
    np.testing.assert_array_equal(x.grad.reshape(-1), expect)
    assert grad_check(lambda: ad.maxpool3d(x).sum(), [x]) < 1e-8


def test_maxpool_ties_prefer_lowest_index():
    x = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    ad.maxpool3d(x).sum().backward()
    assert x.grad.reshape(-1)[0] == 1 and x.grad.sum() == 1


def test_maxpool_indivisible():
    with pytest.raises(ad.ShapeError, match="divisible"):
        ad.maxpool3d(Tensor(np.zeros((1, 1, 3, 4, 4))))


# -- linear / softmax / norms --------------------------------------------------

def test_linear_identity_and_bias():
    x = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(ad.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)
    out = ad.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 3.0]))
    np.testing.assert_array_equal(out.data, [4.0, 5.0])


def test_linear_gradient(rng):
    x, w, b = rand(rng, 3, 4), rand(rng, 4, 2), rand(rng, 2)
    r = rng.standard_normal((3, 2))
    assert grad_check(lambda: (ad.linear(x, w, b) * r).sum(), [x, w, b]) < 1e-6


def test_linear_trailing_mismatch(rng):
    with pytest.raises(ad.ShapeError, match="trailing"):
        ad.linear(rand(rng, 3, 5), rand(rng, 4, 2))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(row, c):
    x = np.array(row)
    y = ad.softmax(Tensor(x)).data
    assert abs(y.sum() - 1.0) < 1e-6
    assert np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, y, atol=1e-9)


def test_softmax_large_logits_stable():
    y = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y)) and y[0] == pytest.approx(1.0)


def test_softmax_cross_entropy_gradcheck(rng):
    logits = rand(rng, 5, 4)
    onehot = np.eye(4)[rng.integers(4, size=5)]
    err = grad_check(lambda: -(ad.log(ad.softmax(logits, axis=-1)) * onehot).sum(), [logits])
    assert err < 1e-6


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(ad.layer_norm(Tensor([[5.0, 5.0]]), one, zero).data, 0.0)
    out = ad.layer_norm(Tensor([[1.0, 3.0]]), one, zero).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_statistics_and_gradient(rng):
    x, gain, shift = rand(rng, 6, 8), rand(rng, 8), rand(rng, 8)
    y = ad.layer_norm(x, gain, shift).data
    # after the affine map each feature column is gain * xhat + shift
    xhat = (y - shift.data) / gain.data
    np.testing.assert_allclose(xhat.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(xhat.var(axis=-1), 1.0, atol=1e-4)
    r = rng.standard_normal((6, 8))
    assert grad_check(lambda: (ad.layer_norm(x, gain, shift) * r).sum(), [x, gain, shift]) < 1e-6


def test_batch_norm_eval_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 2, 2, 2)))
    state = ad.BatchNormState.fresh(3, np.float64)
    out = ad.batch_norm3d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, training=False)
    np.testing.assert_allclose(out.data, x.data / np.sqrt(1 + 1e-5))


def test_batch_norm_training_stats(rng):
    x = Tensor(3.0 + 2.0 * rng.standard_normal((2, 3, 4, 4, 4)))
    state = ad.BatchNormState.fresh(3, np.float64)
    out = ad.batch_norm3d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3, 4)), 1.0, atol=1e-4)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3, 4)))


def test_batch_norm_gradient(rng):
    x, g, b = rand(rng, 2, 3, 2, 2, 2), rand(rng, 3), rand(rng, 3)
    state = ad.BatchNormState.fresh(3, np.float64)
    r = rng.standard_normal(x.shape)
    err = grad_check(lambda: (ad.batch_norm3d(x, g, b, state, True) * r).sum(), [x, g, b])
    assert err < 1e-6


def test_batch_norm_degenerate():
    state = ad.BatchNormState.fresh(1)
    with pytest.raises(ValueError, match="single value"):
        ad.batch_norm3d(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.ones(1)),
                        Tensor(np.zeros(1)), state, training=True)


# -- pointwise -----------------------------------------------------------------

def test_pointwise_examples():
    np.testing.assert_array_equal(ad.pointwise(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])
    assert ad.pointwise(Tensor([0.0]), "gelu").item() == 0.0
    x = Tensor([1.0, 2.0])
    np.testing.assert_array_equal(ad.pointwise(x, "add", Tensor([0.0, 0.0])).data, x.data)
    with pytest.raises(ad.ShapeError):
        ad.pointwise(x, "add", Tensor([0.0, 0.0, 0.0]))


def test_gelu_tanh_form(rng):
    x = rng.standard_normal(20)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(ad.gelu(Tensor(x)).data, ref)
    t = Tensor(x, requires_grad=True)
    assert grad_check(lambda: ad.gelu(t).sum(), [t]) < 1e-8


def test_no_implicit_broadcast(rng):
    with pytest.raises(ad.ShapeError):
        rand(rng, 2, 3) + rand(rng, 2, 1)


def test_elementwise_gradients(rng):
    a, b = rand(rng, 3, 4), Tensor(rng.uniform(1, 2, (3, 4)), requires_grad=True)
    bias = rand(rng, 4)
    err = grad_check(lambda: ((a * b - a / b + bias) * (a - 2.0)).sum(), [a, b, bias])
    assert err < 1e-7


def test_shape_ops_gradients(rng):
    a, b = rand(rng, 2, 3, 4), rand(rng, 2, 5, 4)
    r = rng.standard_normal((4, 8, 2))

    def f():
        c = ad.concat([a, b], axis=1)
        return (ad.permute(c, (2, 1, 0)) * r).sum() + ad.mean(ad.reshape(a, (6, 4)) * 3.0)

    assert grad_check(f, [a, b]) < 1e-8


def test_matmul_gradients(rng):
    a, b, w = rand(rng, 2, 3, 4), rand(rng, 2, 4, 5), rand(rng, 5, 2)
    assert grad_check(lambda: ad.matmul(ad.matmul(a, b), w).sum(), [a, b, w]) < 1e-7


# -- backward / grad_check -----------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_accumulates_and_is_linear(rng):
    x = rand(rng, 4)
    f1 = lambda: (x * x).sum()  # noqa: E731
    f2 = lambda: (ad.gelu(x) * 3.0).sum()  # noqa: E731
    f1().backward()
    f2().backward()
    accumulated = x.grad.copy()
    x.zero_grad()
    (f1() + f2()).backward()
    np.testing.assert_allclose(x.grad, accumulated, atol=1e-12)


def test_backward_shared_subexpression():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # 2x + 3x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6 + 27)


def test_deep_graph_no_recursion_limit():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_no_grad_blocks_graph():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_grad_check_exact_for_sum(rng):
    x = rand(rng, 3, 3)
    assert grad_check(lambda: x.sum(), [x]) < 1e-10


def test_grad_check_sum_of_squares(rng):
    x = rand(rng, 10)
    assert grad_check(lambda: (x * x).sum(), [x], h=1e-5) < 1e-8


def test_grad_check_detects_wrong_gradient(rng):
    x = rand(rng, 4)

    def bad():
        d = x.data
        return ad.Tensor._make(np.asarray((d ** 3).sum()), [x], lambda g: (g * d,))

    assert grad_check(bad, [x]) > 1e-2


def test_forward_deterministic(rng):
    x = Tensor(rng.standard_normal((2, 2, 4, 4, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    a = ad.conv3d(x, w, padding=1).data
    b = ad.conv3d(x, w, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_trailing_bias_broadcast_gradient(rng):
    x, pos = rand(rng, 2, 3, 4), rand(rng, 3, 4)
    r = rng.standard_normal((2, 3, 4))
    assert grad_check(lambda: ((x + pos) * r).sum(), [x, pos]) < 1e-8
    with pytest.raises(ad.ShapeError):
        x + rand(rng, 2, 3)
