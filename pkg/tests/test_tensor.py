import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnan import tensor as T
from rnan.gradcheck import OP_CASES, grad_check, run_op_suite
from rnan.tensor import Tensor


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---- nested-loop oracles ------------------------------------------------


def conv_loop(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                y, z = i * stride + u - pad, j * stride + v - pad
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += x[s, c, y, z] * w[o, c, u, v]
                    out[s, o, i, j] = acc
    return out


def depthwise_loop(x, w, b):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    out = np.zeros_like(x)
    for ch in range(c):
        out[:, ch : ch + 1] = conv_loop(x[:, ch : ch + 1], w[ch : ch + 1], b[ch : ch + 1], 1, k // 2)
    return out


def pool_loop(x, w):
    n, c, h, wd = x.shape
    out = np.zeros((n, c, 1, 1))
    for s in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(wd):
                    out[s, ch, 0, 0] += w[s, 0, i, j] * x[s, ch, i, j]
    return out


# ---- conv2d -------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = T.conv2d(_t(x), _t(w), _t(np.zeros(3))).data
    np.testing.assert_array_equal(out, x)


def test_conv_counts_ones():
    out = T.conv2d(_t(np.ones((1, 1, 4, 4))), _t(np.ones((1, 1, 3, 3))), _t([0.0]), pad=1).data[0, 0]
    assert out[1:3, 1:3].tolist() == [[9, 9], [9, 9]]
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv_matches_loop(stride, pad):
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)
    got = T.conv2d(_t(x), _t(w), _t(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad), atol=1e-6)


def test_conv_spec_example_4x4():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3)), np.zeros(2)
    np.testing.assert_allclose(T.conv2d(_t(x), _t(w), _t(b), pad=1).data, conv_loop(x, w, b, 1, 1), atol=1e-6)


def test_conv_rejects_bad_shapes():
    x = _t(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(x, _t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="integral"):
        T.conv2d(x, _t(np.zeros((1, 2, 3, 3))), stride=2, pad=0)
    with pytest.raises(ValueError, match="odd"):
        T.conv2d(x, _t(np.zeros((1, 2, 2, 2))))


# ---- depthwise / pointwise ---------------------------------------------


def test_depthwise_identity_and_independence():
    x = np.random.default_rng(3).standard_normal((1, 2, 4, 4))
    w = np.zeros((2, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.depthwise_conv2d(_t(x), _t(w), _t([0.0, 0.0])).data, x)
    x[:, 1] = 0
    w = np.random.default_rng(4).standard_normal((2, 1, 3, 3))
    out = T.depthwise_conv2d(_t(x), _t(w), _t([0.5, -2.0])).data
    np.testing.assert_array_equal(out[:, 1], np.full((1, 4, 4), -2.0))


def test_depthwise_matches_loop():
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((1, 3, 5, 5)), rng.standard_normal((3, 1, 3, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(T.depthwise_conv2d(_t(x), _t(w), _t(b)).data, depthwise_loop(x, w, b), atol=1e-6)
    w5 = rng.standard_normal((3, 1, 5, 5))
    np.testing.assert_allclose(T.depthwise_conv2d(_t(x), _t(w5), _t(b)).data, depthwise_loop(x, w5, b), atol=1e-6)


def test_depthwise_channel_mismatch():
    with pytest.raises(ValueError):
        T.depthwise_conv2d(_t(np.zeros((1, 3, 4, 4))), _t(np.zeros((2, 1, 3, 3))))


def test_pointwise():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(T.pointwise_conv(_t(x), _t(np.eye(3)[:, :, None, None])).data, x)
    w, b = rng.standard_normal((4, 3, 1, 1)), rng.standard_normal(4)
    assert np.array_equal(T.pointwise_conv(_t(x), _t(w), _t(b)).data, T.conv2d(_t(x), _t(w), _t(b)).data)
    vec = rng.standard_normal(3)
    const = np.broadcast_to(vec[None, :, None, None], (1, 3, 3, 3)).copy()
    out = T.pointwise_conv(_t(const), _t(w), _t(b)).data
    np.testing.assert_allclose(out, np.broadcast_to((w[:, :, 0, 0] @ vec + b)[None, :, None, None], out.shape))


# ---- elementwise --------------------------------------------------------


def test_relu_sigmoid_values():
    assert T.relu(_t([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert T.sigmoid(_t([0.0])).data[0] == 0.5
    x = np.random.default_rng(7).standard_normal(50) * 5
    np.testing.assert_allclose(T.sigmoid(_t(x)).data + T.sigmoid(_t(-x)).data, 1.0, atol=1e-15)


def test_relu_subgradient_at_zero():
    x = _t([0.0, 1.0, -1.0], grad=True)
    T.backward(T.sum_all(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(_t([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_add_and_gate():
    x = np.random.default_rng(8).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(T.add(_t(x), _t(np.zeros_like(x))).data, x)
    np.testing.assert_array_equal(T.mul_broadcast(_t(x), _t(np.ones_like(x))).data, x)
    np.testing.assert_array_equal(T.mul_broadcast(_t(x), _t(np.full((2, 3, 1, 1), 0.5))).data, x / 2)
    with pytest.raises(ValueError):
        T.add(_t(x), _t(np.zeros((2, 3, 4, 3))))


# ---- layer norm ---------------------------------------------------------


def test_layer_norm_examples():
    g, b = _t(np.ones(4)), _t(np.zeros(4))
    out = T.layer_norm(_t(np.full((1, 4, 1, 1), 3.0)), g, b).data
    np.testing.assert_array_equal(out, 0.0)
    out = T.layer_norm(_t(np.array([1.0, -1.0]).reshape(1, 2, 1, 1)), _t(np.ones(2)), _t(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data.ravel(), [1.0, -1.0], atol=1e-15)


def test_layer_norm_closed_form():
    rng = np.random.default_rng(9)
    x, g, b = rng.standard_normal((3, 6, 1, 1)), rng.standard_normal(6), rng.standard_normal(6)
    v = x[:, :, 0, 0]
    mu, var = v.mean(1, keepdims=True), ((v - v.mean(1, keepdims=True)) ** 2).mean(1, keepdims=True)
    want = g * (v - mu) / np.sqrt(var + 1e-5) + b
    np.testing.assert_allclose(T.layer_norm(_t(x), _t(g), _t(b)).data[:, :, 0, 0], want, atol=1e-6)
    out = T.layer_norm(_t(x), _t(np.ones(6)), _t(np.zeros(6))).data[:, :, 0, 0]
    np.testing.assert_allclose(out.mean(1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(1), 1.0, atol=1e-4)


# ---- pixel shuffle / concat --------------------------------------------


def test_pixel_shuffle_mapping():
    out = T.pixel_shuffle(_t(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)), 2).data
    assert out.shape == (1, 1, 2, 2) and out[0, 0].tolist() == [[1, 2], [3, 4]]


@pytest.mark.parametrize("s", [2, 3])
def test_pixel_shuffle_definition_and_bijection(s):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 2 * s * s, 3, 4))
    out = T.pixel_shuffle(_t(x), s).data
    for c in range(2):
        for a in range(s):
            for bb in range(s):
                np.testing.assert_array_equal(out[:, c, a::s, bb::s], x[:, c * s * s + a * s + bb])
    assert np.array_equal(T.pixel_unshuffle(_t(out), s).data, x)
    assert out.sum() == pytest.approx(x.sum(), rel=1e-12)
    with pytest.raises(ValueError):
        T.pixel_shuffle(_t(np.zeros((1, 3, 2, 2))), 2)


def test_concat_channels():
    a, b = np.arange(4.0).reshape(1, 1, 2, 2), -np.arange(4.0).reshape(1, 1, 2, 2)
    assert np.array_equal(T.concat_channels([_t(a)]).data, a)
    out = T.concat_channels([_t(a), _t(b)]).data
    assert out.shape == (1, 2, 2, 2)
    assert np.array_equal(out[:, :1], a) and np.array_equal(out[:, 1:], b)
    with pytest.raises(ValueError):
        T.concat_channels([_t(a), _t(np.zeros((1, 1, 3, 2)))])


# ---- softmax / pool -----------------------------------------------------


def test_softmax_positions():
    out = T.softmax_positions(_t(np.full((1, 1, 3, 4), 2.5))).data
    np.testing.assert_allclose(out, 1 / 12, atol=1e-15)
    out = T.softmax_positions(_t(np.array([0.0, np.log(3)]).reshape(1, 1, 1, 2))).data
    np.testing.assert_allclose(out.ravel(), [0.25, 0.75], atol=1e-12)
    a = np.random.default_rng(11).standard_normal((3, 1, 4, 5)) * 30
    p = T.softmax_positions(_t(a)).data
    np.testing.assert_allclose(p, T.softmax_positions(_t(a + 123.0)).data, atol=1e-6)
    np.testing.assert_allclose(p.sum(axis=(1, 2, 3)), 1.0, atol=1e-6)
    assert np.all(p >= 0)


def test_weighted_pool():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(T.weighted_spatial_pool(_t(x), _t(np.full((2, 1, 4, 5), 1 / 20))).data[..., 0, 0],
                               x.mean(axis=(2, 3)), atol=1e-12)
    onehot = np.zeros((2, 1, 4, 5))
    onehot[:, 0, 2, 3] = 1
    np.testing.assert_array_equal(T.weighted_spatial_pool(_t(x), _t(onehot)).data[..., 0, 0], x[:, :, 2, 3])
    w = rng.random((2, 1, 4, 5))
    np.testing.assert_allclose(T.weighted_spatial_pool(_t(x), _t(w)).data, pool_loop(x, w), atol=1e-6)


# ---- loss / backward ----------------------------------------------------


def test_l1_loss():
    rng = np.random.default_rng(13)
    p = rng.standard_normal((2, 3, 4, 4))
    assert T.l1_loss(_t(p), _t(p)).item() == 0.0
    assert T.l1_loss(_t(p + 0.25), _t(p)).item() == pytest.approx(0.25, abs=1e-12)
    q = rng.standard_normal(p.shape)
    total = 0.0
    for v in (p - q).ravel():
        total += abs(v)
    assert T.l1_loss(_t(p), _t(q)).item() == pytest.approx(total / p.size, abs=1e-7)


def test_l1_gradient_sign_zero():
    p = _t([1.0, 2.0, 3.0], grad=True)
    T.backward(T.l1_loss(p, _t([0.0, 2.0, 5.0])))
    np.testing.assert_allclose(p.grad, np.array([1.0, 0.0, -1.0]) / 3)


def test_backward_basics():
    x = _t(np.random.default_rng(14).standard_normal((2, 3)), grad=True)
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    # loss = |w*x - 0| with scalar leaves: dL/dw = sign(wx) x, dL/dx = sign(wx) w
    w, xs = _t(np.array([[[[-1.5]]]]), grad=True), _t(np.array([[[[2.0]]]]), grad=True)
    T.backward(T.l1_loss(T.mul_broadcast(w, xs), _t(np.zeros((1, 1, 1, 1)))))
    assert w.grad.item() == -2.0 and xs.grad.item() == 1.5


def test_backward_accumulates_and_zeroes_unreached():
    x = _t(np.array([1.0, -2.0]), grad=True)
    unused = _t(np.array([5.0]), grad=True)
    T.get_tape().clear()
    _ = T.relu(unused)
    T.backward(T.sum_all(T.add(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_backward_rejects_nonscalar():
    with pytest.raises(ValueError):
        T.backward(T.relu(_t(np.ones(3), grad=True)))


def test_tape_freed_and_records_in_order():
    tape = T.get_tape()
    tape.clear()
    x = _t(np.ones((1, 2, 2, 2)), grad=True)
    T.sum_all(T.relu(T.sigmoid(x)))
    assert len(tape) == 3
    T.backward(T.sum_all(T.relu(x)))
    assert len(tape) == 0


def test_no_grad_records_nothing():
    tape = T.get_tape()
    tape.clear()
    with T.no_grad():
        T.relu(_t(np.ones(3), grad=True))
    assert len(tape) == 0


def test_debug_mode_flags_nonfinite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.add(_t([np.inf]), _t([1.0]))
    finally:
        T.set_debug(False)


def test_default_precision():
    assert T.tensor([1, 2]).dtype == np.float32
    with T.precision("float64"):
        assert T.tensor([1, 2]).dtype == np.float64
    assert T.tensor([1, 2]).dtype == np.float32


def test_deterministic_forward():
    rng = np.random.default_rng(15)
    x, w = rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((5, 4, 3, 3))
    a = T.conv2d(_t(x), _t(w), pad=1).data
    b = T.conv2d(_t(x), _t(w), pad=1).data
    assert a.tobytes() == b.tobytes()


# ---- gradients ----------------------------------------------------------


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients(op):
    assert run_op_suite([op], cases=5, seed=1)[op] < 1e-4


def test_grad_check_detects_wrong_rule():
    def bad(x):
        # forward is halved after recording, so the tape gradient is twice the true one
        y = T.relu(x)
        y.data = y.data * 0.5
        return y

    assert grad_check(bad, [np.array([0.5, 1.0, 2.0])]) > 0.1


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5),
    s=st.integers(2, 3), seed=st.integers(0, 2**16),
)
def test_shuffle_roundtrip_property(n, c, h, w, s, seed):
    x = np.random.default_rng(seed).standard_normal((n, c * s * s, h, w))
    assert np.array_equal(T.pixel_unshuffle(T.pixel_shuffle(_t(x), s), s).data, x)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_softmax_normalization_property(h, w, seed):
    a = np.random.default_rng(seed).standard_normal((2, 1, h, w)) * 50
    p = T.softmax_positions(_t(a)).data
    np.testing.assert_allclose(p.sum(axis=(1, 2, 3)), 1.0, atol=1e-6)
    assert np.all(p >= 0)
