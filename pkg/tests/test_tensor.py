import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtiseg import tensor as T
from fd import check_grads, rel_err

rng = np.random.default_rng(0)


def randf(*shape):
    return rng.standard_normal(shape).astype(np.float64)


def test_conv3d_identity_kernel():
    x = randf(1, 5, 5, 5)
    k = np.ones((1, 1, 1, 1, 1))
    out = T.conv3d(T.Tensor(x, dtype=np.float64), T.Tensor(k, dtype=np.float64))
    np.testing.assert_array_equal(out.data, x)


def test_conv3d_all_ones_sums_to_27():
    x = np.ones((1, 3, 3, 3))
    k = np.ones((1, 1, 3, 3, 3))
    out = T.conv3d(T.Tensor(x), T.Tensor(k))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 27.0


def test_conv3d_shape_arithmetic_padded():
    x = T.Tensor(np.zeros((6, 64, 64, 64), dtype=np.float32))
    k = T.Tensor(np.zeros((32, 6, 3, 3, 3), dtype=np.float32))
    out = T.conv3d(x, k, stride=1, padding=1)
    assert out.shape == (32, 64, 64, 64)


def test_conv3d_stride_output_formula():
    x = T.Tensor(np.zeros((2, 9, 9, 9)))
    k = T.Tensor(np.zeros((3, 2, 3, 3, 3)))
    out = T.conv3d(x, k, stride=2, padding=1)
    # floor((9 + 2 - 3)/2) + 1 = 5
    assert out.shape == (3, 5, 5, 5)


def test_conv3d_channel_mismatch_raises():
    x = T.Tensor(np.zeros((2, 4, 4, 4)))
    k = T.Tensor(np.zeros((3, 5, 3, 3, 3)))
    with pytest.raises(ValueError):
        T.conv3d(x, k)


def test_conv3d_too_small_input_raises():
    x = T.Tensor(np.zeros((1, 2, 2, 2)))
    k = T.Tensor(np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(ValueError):
        T.conv3d(x, k)


def test_softmax_uniform_logits():
    x = T.Tensor(np.zeros((5, 2, 2, 2)))
    s = T.softmax(x, axis=0)
    np.testing.assert_allclose(s.data, 0.2, atol=1e-7)


def test_softmax_closed_form():
    logits = np.log(np.array([1.0, 2.0, 7.0])).reshape(3, 1, 1, 1)
    s = T.softmax(T.Tensor(logits, dtype=np.float64), axis=0)
    np.testing.assert_allclose(s.data.ravel(), [0.1, 0.2, 0.7], atol=1e-12)


def test_softmax_large_logit_no_overflow():
    x = np.array([[1e4], [0.0], [-3.0]])
    s = T.softmax(T.Tensor(x, dtype=np.float64), axis=0)
    assert np.all(np.isfinite(s.data))
    assert s.data[0, 0] == pytest.approx(1.0)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        T.softmax(T.Tensor(np.array([np.nan, 1.0])), axis=0)


def test_softmax_rows_sum_to_one():
    x = T.Tensor(randf(7, 4, 4, 4) * 10)
    s = T.softmax(x, axis=0)
    np.testing.assert_allclose(s.data.sum(axis=0), 1.0, atol=1e-5)


def test_sigmoid_open_interval():
    y = T.sigmoid(T.Tensor(randf(100) * 5, dtype=np.float64))
    assert np.all(y.data > 0) and np.all(y.data < 1)


def test_backward_square():
    x = T.Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    loss = (x ** 2).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_rejects_nonscalar():
    x = T.Tensor(randf(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(ValueError):
        y.backward()
    T.TAPE.clear()


def test_backward_rejects_detached():
    x = T.Tensor(randf(1), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    with pytest.raises(ValueError):
        y.backward()


def _soft_dice(pred, target):
    inter = (pred * target).sum()
    return (2.0 * inter + 1e-5) / (pred.sum() + target.sum() + 1e-5)


def test_soft_dice_gradient_matches_finite_differences():
    pred = np.array([0.3, 0.8])
    target = np.array([0.0, 1.0])

    def build(p):
        return _soft_dice(p, T.Tensor(target, dtype=np.float64))

    errs = check_grads(build, [pred.astype(np.float64)], tol=1e-6)
    assert max(errs) < 1e-6


def test_conv_norm_relu_chain_gradcheck():
    x = randf(2, 4, 4, 4)
    k = randf(3, 2, 3, 3, 3) * 0.5
    g = np.abs(randf(3, 1, 1, 1)) + 0.5
    b = randf(3, 1, 1, 1) * 0.1

    def build(xt, kt, gt, bt):
        h = T.conv3d(xt, kt, stride=1, padding=1)
        h = T.instance_norm(h, gt, bt)
        h = T.leaky_relu(h, 0.01)
        return (h * h).sum()

    check_grads(build, [x, k, g, b], tol=1e-4)


# finite-difference agreement for every primitive on randomized small shapes
PRIMITIVES = [
    ("add", lambda a, b: (T.add(a, b) * 3.0).sum(), 2, (2, 3)),
    ("mul", lambda a, b: (T.mul(a, b) ** 2).sum(), 2, (2, 3)),
    ("div", lambda a, b: T.div(a, b + 5.0).sum(), 2, (2, 3)),
    ("power", lambda a: (T.power(a + 4.0, 3.0)).sum(), 1, (2, 3)),
    ("exp", lambda a: T.exp(a).sum(), 1, (2, 3)),
    ("log", lambda a: T.log(a + 4.0).sum(), 1, (2, 3)),
    ("matmul", lambda a, b: T.matmul(a, b).sum(), 2, (3, 3)),
    ("leaky_relu", lambda a: (T.leaky_relu(a, 0.01) * 2.0).sum(), 1, (2, 3)),
    ("sigmoid", lambda a: (T.sigmoid(a) ** 2).sum(), 1, (2, 3)),
    ("gelu", lambda a: T.gelu(a).sum(), 1, (2, 3)),
    ("softmax", lambda a: (T.softmax(a, axis=0) ** 2).sum(), 1, (3, 4)),
    ("reshape", lambda a: (T.reshape(a, (3, 2)) ** 2).sum(), 1, (2, 3)),
    ("transpose", lambda a: (T.transpose(a, (1, 0)) ** 3).sum(), 1, (2, 3)),
    ("getitem", lambda a: (a[1:, ::2] ** 2).sum(), 1, (3, 4)),
    ("sum_axis", lambda a: (T.tsum(a, axis=0) ** 2).sum(), 1, (3, 4)),
    ("mean", lambda a: (T.tmean(a, axis=1) ** 2).sum(), 1, (3, 4)),
    ("concat", lambda a, b: (T.concat([a, b], axis=1) ** 2).sum(), 2, (2, 3)),
]


@pytest.mark.parametrize("name,build,nargs,shape", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradcheck(name, build, nargs, shape):
    arrays = [randf(*shape) for _ in range(nargs)]
    check_grads(build, arrays, tol=1e-4)


def test_broadcast_add_gradcheck():
    def build(a, b):
        return (T.add(a, b) ** 2).sum()

    check_grads(build, [randf(3, 4), randf(4)], tol=1e-4)
    check_grads(build, [randf(3, 1), randf(3, 4)], tol=1e-4)


def test_batched_matmul_gradcheck():
    def build(a, b):
        return (T.matmul(a, b) ** 2).sum()

    check_grads(build, [randf(2, 3, 4), randf(2, 4, 3)], tol=1e-4)


def test_layer_norm_gradcheck():
    def build(x, g, b):
        return (T.layer_norm(x, g, b) ** 2).sum()

    check_grads(build, [randf(4, 5), np.abs(randf(5)) + 0.5, randf(5) * 0.1], tol=1e-4)


@settings(max_examples=10, deadline=None)
@given(
    cin=st.integers(1, 3), cout=st.integers(1, 3),
    n=st.integers(3, 6), stride=st.integers(1, 2), padding=st.integers(0, 1),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv3d_gradcheck_random_shapes(cin, cout, n, stride, padding, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((cin, n, n, n))
    k = r.standard_normal((cout, cin, 3, 3, 3)) * 0.5
    if (n + 2 * padding - 3) // stride + 1 < 1:
        return

    def build(xt, kt):
        return (T.conv3d(xt, kt, stride=stride, padding=padding) ** 2).sum()

    check_grads(build, [x, k], tol=1e-4)


@settings(max_examples=8, deadline=None)
@given(
    cin=st.integers(1, 3), cout=st.integers(1, 3),
    n=st.integers(2, 4), stride=st.integers(1, 2),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv_transpose3d_gradcheck_random_shapes(cin, cout, n, stride, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((cin, n, n, n))
    k = r.standard_normal((cin, cout, 2, 2, 2)) * 0.5

    def build(xt, kt):
        return (T.conv_transpose3d(xt, kt, stride=stride) ** 2).sum()

    check_grads(build, [x, k], tol=1e-4)


@settings(max_examples=10, deadline=None)
@given(
    cin=st.integers(1, 3), cout=st.integers(1, 3),
    n=st.integers(3, 6), k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2), padding=st.integers(0, 1),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv_transpose_is_adjoint_of_conv(cin, cout, n, k, stride, padding, seed):
    r = np.random.default_rng(seed)
    # shapes only match when the conv tiles the padded input exactly
    if (n + 2 * padding - k) < 0 or (n + 2 * padding - k) % stride != 0:
        return
    x = r.standard_normal((cin, n, n, n))
    kern = r.standard_normal((cout, cin, k, k, k))
    with T.no_grad():
        cx = T.conv3d(T.Tensor(x, dtype=np.float64), T.Tensor(kern, dtype=np.float64),
                      stride=stride, padding=padding)
        y = r.standard_normal(cx.shape)
        xt = T.conv_transpose3d(T.Tensor(y, dtype=np.float64), T.Tensor(kern, dtype=np.float64),
                                stride=stride, padding=padding)
    assert xt.shape == x.shape
    lhs = np.sum(cx.data * y)
    rhs = np.sum(x * xt.data)
    scale = max(abs(lhs), abs(rhs), 1e-12)
    assert abs(lhs - rhs) / scale < 1e-6


def test_concat_backward_splits_gradients_exactly():
    a = T.Tensor(randf(2, 3), requires_grad=True, dtype=np.float64)
    b = T.Tensor(randf(4, 3), requires_grad=True, dtype=np.float64)
    out = T.concat([a, b], axis=0)
    w = T.Tensor(randf(6, 3), dtype=np.float64)
    (out * w).sum().backward()
    whole = np.abs(w.data).sum()
    parts = np.abs(a.grad).sum() + np.abs(b.grad).sum()
    assert parts == pytest.approx(whole, rel=1e-12)


def test_instance_norm_normalizes_per_channel():
    x = T.Tensor(randf(3, 4, 4, 4) * 7 + 2, dtype=np.float64)
    g = T.Tensor(np.ones((3, 1, 1, 1)), dtype=np.float64)
    b = T.Tensor(np.zeros((3, 1, 1, 1)), dtype=np.float64)
    y = T.instance_norm(x, g, b)
    means = y.data.mean(axis=(1, 2, 3))
    stds = y.data.std(axis=(1, 2, 3))
    np.testing.assert_allclose(means, 0.0, atol=1e-10)
    np.testing.assert_allclose(stds, 1.0, atol=1e-4)


def test_tape_is_cleared_after_backward():
    x = T.Tensor(randf(3), requires_grad=True)
    (x * x).sum().backward()
    assert len(T.TAPE) == 0


def test_no_grad_skips_recording():
    x = T.Tensor(randf(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    assert len(T.TAPE) == 0


def test_default_dtype_switch():
    T.set_default_dtype(np.float64)
    try:
        assert T.Tensor([1.0]).dtype == np.float64
    finally:
        T.set_default_dtype(np.float32)
    assert T.Tensor([1.0]).dtype == np.float32
