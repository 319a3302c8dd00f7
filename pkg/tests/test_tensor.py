import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tarpose import tensor as T
from tarpose.tensor import Tensor

rng = np.random.default_rng(1234)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


# ---- matmul ---------------------------------------------------------------

def test_matmul_identity_and_hand_cases():
    eye = Tensor(np.eye(2))
    m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(T.matmul(eye, m).data, m.data)
    out = T.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_matches_triple_loop():
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    out = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, naive_matmul(a.astype(np.float64), b.astype(np.float64)), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_backward_rules():
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = rng.standard_normal((3, 2))
    with T.Tape() as tape:
        loss = T.sum(T.mul(T.matmul(a, b), Tensor(g)))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# ---- softmax --------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_lastdim(Tensor(np.zeros(2))).data, [0.5, 0.5])
    x = Tensor(np.array([5.0, 5.0]))
    out = T.softmax_lastdim(x, np.array([0.0, T.NEG_LARGE])).data
    np.testing.assert_array_equal(out, [1.0, 0.0])
    out = T.softmax_lastdim(x, np.array([True, False])).data
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_softmax_matches_direct_formula():
    x = rng.standard_normal((4, 9)).astype(np.float32)
    out = T.softmax_lastdim(Tensor(x)).data
    e = np.exp(x.astype(np.float64))
    np.testing.assert_allclose(out, e / e.sum(-1, keepdims=True), atol=1e-6)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_softmax_fully_masked_row_raises():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(T.FullyMaskedRowError):
        T.softmax_lastdim(Tensor(np.zeros((2, 2))), mask)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.integers(1, 12))
def test_softmax_rows_sum_to_one_and_masked_weights_vanish(seed, rows, cols):
    r = np.random.default_rng(seed)
    x = r.standard_normal((rows, cols)) * 10
    mask = r.random((rows, cols)) > 0.5
    mask[np.arange(rows), r.integers(0, cols, rows)] = True
    p = T.softmax_lastdim(Tensor(x), mask).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p[~mask] < 1e-30)


# ---- layer norm -----------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(T.layer_norm(Tensor(np.full(3, 3.0)), one, zero).data, 0.0, atol=1e-12)
    out = T.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)


def test_layer_norm_matches_formula():
    x = rng.standard_normal((3, 5, 8)).astype(np.float32)
    g = rng.standard_normal(8).astype(np.float32)
    b = rng.standard_normal(8).astype(np.float32)
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    x64 = x.astype(np.float64)
    mu = x64.mean(-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(-1, keepdims=True)
    np.testing.assert_allclose(out, (x64 - mu) / np.sqrt(var + 1e-5) * g + b, atol=1e-5)


# ---- elementwise and layout -----------------------------------------------

def test_gelu_tanh_variant():
    assert T.gelu(Tensor(np.zeros(1))).data[0] == 0.0
    x = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, gelu_ref(x), rtol=1e-12)


def test_add_zero_identity_and_bias_broadcast():
    x = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros((2, 3)))).data, x)
    bias = rng.standard_normal(3)
    np.testing.assert_allclose(T.add(Tensor(x), Tensor(bias)).data, x + bias)


def test_no_general_broadcasting():
    with pytest.raises(T.DimensionError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))
    with pytest.raises(T.DimensionError):
        T.mul(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3,))))


def test_concat_index_oracle():
    a = np.arange(6.0).reshape(2, 3)
    b = 100 + np.arange(6.0).reshape(2, 3)
    out = T.concat([Tensor(a), Tensor(b)], axis=0).data
    assert out.shape == (4, 3)
    for i in range(4):
        for j in range(3):
            src = a if i < 2 else b
            assert out[i, j] == src[i % 2, j]


def test_concat_axis_errors():
    with pytest.raises(T.DimensionError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


def test_reshape_transpose_roundtrip():
    x = rng.standard_normal((2, 3, 4))
    y = T.transpose(T.reshape(Tensor(x), (6, 4)), (1, 0))
    np.testing.assert_array_equal(y.data, x.reshape(6, 4).T)
    with pytest.raises(T.DimensionError):
        T.reshape(Tensor(x), (5, 5))


# ---- convolutions and pooling ---------------------------------------------

def test_conv1x1_examples():
    x = rng.standard_normal((3, 4, 5))
    out = T.conv2d_1x1(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    out = T.conv2d_1x1(Tensor(np.full((1, 1, 1), 1.5)), Tensor(np.array([[2.0]])), Tensor(np.array([1.0])))
    assert out.data.item() == 4.0


def test_conv1x1_matches_reshape_matmul():
    x = rng.standard_normal((2, 5, 4, 3)).astype(np.float32)
    w = rng.standard_normal((6, 5)).astype(np.float32)
    b = rng.standard_normal(6).astype(np.float32)
    out = T.conv2d_1x1(Tensor(x), Tensor(w), Tensor(b)).data
    for n in range(2):
        flat = x[n].astype(np.float64).reshape(5, -1)
        ref = (w.astype(np.float64) @ flat + b[:, None]).reshape(6, 4, 3)
        np.testing.assert_allclose(out[n], ref, atol=1e-5)


def deconv_oracle(x, w, b):
    """Zero insertion, pad by k-1-p, then a correlation with the flipped kernel."""
    cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    up = np.zeros((cin, 2 * h - 1, 2 * wd - 1))
    up[:, ::2, ::2] = x
    pad = k - 1 - 1
    up = np.pad(up, ((0, 0), (pad, pad), (pad, pad)))
    flipped = w[:, :, ::-1, ::-1]
    oh, ow = up.shape[1] - k + 1, up.shape[2] - k + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                out[o, i, j] = np.sum(up[:, i:i + k, j:j + k] * flipped[:, o]) + b[o]
    return out


def test_deconv_single_pixel_all_ones_kernel():
    out = T.deconv2d(Tensor(np.full((1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 4, 4))), Tensor(np.zeros(1)))
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 2.5))


def test_deconv_zero_input_gives_bias():
    b = np.array([0.5, -1.0])
    out = T.deconv2d(Tensor(np.zeros((3, 2, 3))), Tensor(rng.standard_normal((3, 2, 4, 4))), Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b[:, None, None], (2, 4, 6)))


def test_deconv_matches_zero_insertion_oracle():
    x = rng.standard_normal((3, 4, 3)).astype(np.float32)
    w = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = T.deconv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (2, 8, 6)
    np.testing.assert_allclose(out, deconv_oracle(x.astype(np.float64), w.astype(np.float64), b), atol=1e-5)


def test_deconv_rejects_other_geometry():
    with pytest.raises(T.DimensionError):
        T.deconv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(T.DimensionError):
        T.deconv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros(1)), stride=3)


def test_max_pool_examples_and_oracle():
    np.testing.assert_array_equal(T.max_pool2d(Tensor(np.full((2, 8, 4), 0.3)), 4).data, np.full((2, 2, 1), 0.3))
    spike = np.zeros((1, 4, 4))
    spike[0, 2, 1] = 1.0
    assert T.max_pool2d(Tensor(spike), 4).data.item() == 1.0
    x = rng.standard_normal((3, 8, 12))
    out = T.max_pool2d(Tensor(x), 4).data
    for c in range(3):
        for i in range(2):
            for j in range(3):
                assert out[c, i, j] == x[c, 4 * i:4 * i + 4, 4 * j:4 * j + 4].max()
    with pytest.raises(T.DimensionError):
        T.max_pool2d(Tensor(np.zeros((1, 6, 8))), 4)


def test_kernels_are_pure():
    x = rng.standard_normal((2, 3, 4, 3)).astype(np.float32)
    w = rng.standard_normal((3, 5, 4, 4)).astype(np.float32)
    b = np.zeros(5, dtype=np.float32)
    a1 = T.deconv2d(Tensor(x), Tensor(w), Tensor(b)).data
    a2 = T.deconv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert a1.tobytes() == a2.tobytes()


# ---- tape -----------------------------------------------------------------

def test_backward_simple_rules():
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
    x.grad = None
    with T.Tape() as tape:
        loss = T.sum(T.mul(x, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_tape_single_use_and_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
        loss = T.sum(y)
    with pytest.raises(T.DimensionError):
        tape.backward(y)
    tape.backward(loss)
    with pytest.raises(T.TapeError):
        tape.backward(loss)
    with pytest.raises(T.TapeError):
        with tape:
            pass


def test_no_grad_detaches():
    x = Tensor(np.ones(3), requires_grad=True)
    w = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            d = T.mul(x, x)
        loss = T.sum(T.mul(d, w))
    tape.backward(loss)
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, np.ones(3))


def test_composite_graph_matches_finite_differences():
    target = rng.standard_normal((4, 3))

    def f(a, b):
        p = T.softmax_lastdim(T.matmul(a, b))
        d = T.sub(p, Tensor(target))
        return T.sum(T.mul(d, d))

    err = T.gradcheck(f, [Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((5, 3)))])
    assert err < 1e-4


def test_finite_diff_examples():
    x = Tensor(rng.standard_normal((2, 3)))
    np.testing.assert_allclose(T.finite_diff_grad(T.sum, x).data, 1.0, atol=1e-8)
    g = T.finite_diff_grad(lambda t: T.sum(T.mul(t, t)), Tensor(np.array([3.0])))
    np.testing.assert_allclose(g.data, [6.0], atol=1e-6)


def test_flop_counter_counts_matmul():
    with T.FlopCounter() as fc:
        T.matmul(Tensor(np.zeros((2, 7, 5))), Tensor(np.zeros((5, 3))))
    assert fc.total == 2 * 2 * 7 * 5 * 3


OPS = ["matmul", "add", "mul", "gelu", "softmax_masked", "layer_norm", "conv1x1", "deconv", "max_pool", "concat"]


def _case(name, r):
    t = lambda *s: Tensor(r.standard_normal(s))  # noqa: E731
    if name == "matmul":
        p = t(3, 2)
        return (lambda a, b: T.sum(T.mul(T.matmul(a, b), p))), [t(3, 4), t(4, 2)]
    if name == "add":
        p = t(2, 3)
        return (lambda a, b: T.sum(T.mul(T.add(a, b), p))), [t(2, 3), t(3)]
    if name == "mul":
        return (lambda a, b: T.sum(T.mul(T.mul(a, b), a))), [t(2, 3), t(2, 3)]
    if name == "gelu":
        p = t(5)
        return (lambda a: T.sum(T.mul(T.gelu(a), p))), [t(5)]
    if name == "softmax_masked":
        m = r.random((2, 4)) > 0.5
        m[:, 0] = True
        p = t(2, 4)
        return (lambda a: T.sum(T.mul(T.softmax_lastdim(a, m), p))), [t(2, 4)]
    if name == "layer_norm":
        p = t(2, 4)
        return (lambda a, g, b: T.sum(T.mul(T.layer_norm(a, g, b), p))), [t(2, 4), t(4), t(4)]
    if name == "conv1x1":
        p = t(3, 2, 2)
        return (lambda x, w, b: T.sum(T.mul(T.conv2d_1x1(x, w, b), p))), [t(2, 2, 2), t(3, 2), t(3)]
    if name == "deconv":
        p = t(2, 4, 2)
        return (lambda x, w, b: T.sum(T.mul(T.deconv2d(x, w, b), p))), [t(2, 2, 1), t(2, 2, 4, 4), t(2)]
    if name == "max_pool":
        p = t(2, 1, 1)
        return (lambda x: T.sum(T.mul(T.max_pool2d(x, 2), p))), [t(2, 2, 2)]
    p = t(3, 2)
    return (lambda a, b: T.sum(T.mul(T.concat([a, b], axis=0), p))), [t(1, 2), t(2, 2)]


@pytest.mark.parametrize("name", OPS)
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_op_gradients_match_finite_differences(name, seed):
    f, inputs = _case(name, np.random.default_rng(seed))
    assert T.gradcheck(f, inputs) <= 1e-4
