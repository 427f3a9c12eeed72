"""Per-primitive value oracles, gradient checks, and graph semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udcfer import autodiff as ad
from udcfer.errors import NumericError, ShapeError


def _rng(seed=0):
    return np.random.default_rng(seed)


def _p(arr, name):
    return ad.parameter(np.asarray(arr, dtype=np.float64), name)


def _check(f, params, tol=1e-5, **kw):
    err = ad.grad_check(f, params, **kw)
    assert err < tol, f"max relative gradient error {err:.3e}"


# ---------------------------------------------------------------------------
# value oracles
# ---------------------------------------------------------------------------


def test_matmul_value():
    a = _p([[1.0, 2.0], [3.0, 4.0]], "a")
    b = _p([[5.0, 6.0], [7.0, 8.0]], "b")
    out = ad.matmul(a, b)
    np.testing.assert_allclose(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_batched_leading_dims():
    rng = _rng()
    a = _p(rng.normal(size=(2, 3, 4, 5)), "a")
    b = _p(rng.normal(size=(2, 3, 5, 6)), "b")
    out = ad.matmul(a, b)
    assert out.shape == (2, 3, 4, 6)
    np.testing.assert_allclose(out.data, a.data @ b.data)


def test_matmul_shape_error():
    a = _p(np.ones((2, 3)), "a")
    b = _p(np.ones((4, 2)), "b")
    with pytest.raises(ShapeError):
        ad.matmul(a, b)


def test_add_mul_broadcast_singleton():
    a = _p(np.arange(6.0).reshape(2, 3), "a")
    b = _p([[10.0, 20.0, 30.0]], "b")
    np.testing.assert_allclose(ad.add(a, b).data, a.data + b.data)
    np.testing.assert_allclose(ad.mul(a, b).data, a.data * b.data)


def test_broadcast_requires_same_rank():
    a = _p(np.ones((2, 3)), "a")
    b = _p(np.ones(3), "b")
    with pytest.raises(ShapeError):
        ad.add(a, b)


def test_softmax_rows():
    out = ad.softmax(_p([[0.0, 0.0]], "x"))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])
    out = ad.softmax(_p([[1.0, 2.0, 3.0]], "x"))
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(out.data, (e / e.sum())[None, :])


def test_softmax_shift_invariance_and_overflow():
    x = _p([[1000.0, 1000.0, 999.0]], "x")
    out = ad.softmax(x).data
    assert np.isfinite(out).all()
    y = ad.softmax(_p([[1.0, 1.0, 0.0]], "y")).data
    np.testing.assert_allclose(out, y, atol=1e-12)


def test_layer_norm_moments():
    rng = _rng(3)
    x = _p(rng.normal(2.0, 5.0, size=(4, 16)), "x")
    out = ad.layer_norm(x, axis=-1).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_gelu_values():
    # exact erf form: gelu(0)=0, gelu(large)~x, gelu(-large)~0
    x = _p([0.0, 10.0, -10.0, 1.0], "x")
    out = ad.gelu(x).data
    assert out[0] == 0.0
    np.testing.assert_allclose(out[1], 10.0, atol=1e-12)
    np.testing.assert_allclose(out[2], 0.0, atol=1e-12)
    from scipy.special import erf
    np.testing.assert_allclose(out[3], 0.5 * (1 + erf(1 / np.sqrt(2))))


def test_conv1x1_is_channel_matmul():
    rng = _rng(1)
    x = _p(rng.normal(size=(2, 3, 4, 4)), "x")
    w = _p(rng.normal(size=(5, 3)), "w")
    out = ad.conv1x1(x, w)
    ref = np.einsum("oc,bchw->bohw", w.data, x.data)
    np.testing.assert_allclose(out.data, ref)


def test_conv1x1_stride():
    rng = _rng(2)
    x = _p(rng.normal(size=(1, 2, 6, 6)), "x")
    w = _p(rng.normal(size=(2, 2)), "w")
    out = ad.conv1x1(x, w, stride=2)
    assert out.shape == (1, 2, 3, 3)
    full = np.einsum("oc,bchw->bohw", w.data, x.data)
    np.testing.assert_allclose(out.data, full[:, :, ::2, ::2])


def test_depthwise_conv3x3_oracle():
    # single channel, hand-checkable: kernel of ones sums the 3x3
    # neighborhood under zero padding
    x = _p(np.arange(9.0).reshape(1, 1, 3, 3), "x")
    w = _p(np.ones((1, 3, 3)), "w")
    out = ad.depthwise_conv3x3(x, w).data[0, 0]
    assert out[1, 1] == 36.0  # full 3x3 sum
    assert out[0, 0] == 0 + 1 + 3 + 4  # corner sees 4 cells


def test_depthwise_conv3x3_channels_independent():
    rng = _rng(4)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(3, 3, 3))
    out = ad.depthwise_conv3x3(_p(x, "x"), _p(w, "w")).data
    for c in range(3):
        solo = ad.depthwise_conv3x3(_p(x[:, c:c + 1], "xc"),
                                    _p(w[c:c + 1], "wc")).data
        np.testing.assert_allclose(out[:, c:c + 1], solo)


def test_reduce_ops():
    x = _p(np.arange(6.0).reshape(2, 3), "x")
    assert ad.mean(x).data == 2.5
    assert ad.tsum(x).data == 15.0
    np.testing.assert_allclose(ad.mean(x, axis=1).data, [1.0, 4.0])
    np.testing.assert_allclose(ad.tsum(x, axis=(0, 1), keepdims=True).data,
                               [[15.0]])


def test_concat_reshape_transpose_round_trip():
    rng = _rng(5)
    x = rng.normal(size=(2, 3, 4))
    t = _p(x, "x")
    back = ad.transpose(ad.transpose(t, (2, 0, 1)), (1, 2, 0))
    np.testing.assert_array_equal(back.data, x)
    r = ad.reshape(ad.reshape(t, (6, 4)), (2, 3, 4))
    np.testing.assert_array_equal(r.data, x)
    c = ad.concat([t, t], axis=1)
    assert c.shape == (2, 6, 4)
    np.testing.assert_array_equal(c.data[:, :3], x)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = _p(np.zeros((4, 7)), "logits")
    out = ad.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
    np.testing.assert_allclose(out.data, np.log(7.0))


def test_cross_entropy_gradient_is_p_minus_onehot():
    rng = _rng(6)
    logits = _p(rng.normal(size=(3, 5)), "logits")
    labels = np.array([1, 4, 0])
    loss = ad.softmax_cross_entropy(logits, labels)
    grads = ad.backward(loss, {"logits": logits})
    p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.eye(5)[labels]
    np.testing.assert_allclose(grads["logits"].data, (p - onehot) / 3.0,
                               atol=1e-12)


def test_cross_entropy_label_range():
    logits = _p(np.zeros((2, 3)), "logits")
    with pytest.raises(ShapeError):
        ad.softmax_cross_entropy(logits, np.array([0, 3]))


def test_kl_hand_value():
    # softmax([0, -log 3]) vs uniform gives a closed form
    a = _p([[np.log(2.0), 0.0]], "a")  # softmax -> [2/3, 1/3]
    b = _p([[0.0, 0.0]], "b")  # uniform
    out = ad.softmax_kl(a, b)
    expect = (2 / 3) * np.log((2 / 3) / 0.5) + (1 / 3) * np.log((1 / 3) / 0.5)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_kl_zero_iff_equal():
    rng = _rng(7)
    z = rng.normal(size=(2, 9))
    same = ad.softmax_kl(_p(z, "a"), _p(z.copy(), "b"))
    np.testing.assert_allclose(same.data, 0.0, atol=1e-13)
    for k in range(100):
        a = rng.normal(size=(1, 6))
        b = a + rng.normal(size=(1, 6)) * 0.3
        v = ad.softmax_kl(_p(a, "a"), _p(b, "b")).data
        assert v > 0.0


# ---------------------------------------------------------------------------
# gradient checks, one per primitive
# ---------------------------------------------------------------------------


def test_grad_matmul():
    rng = _rng(10)
    params = {"a": _p(rng.normal(size=(3, 4)), "a"),
              "b": _p(rng.normal(size=(4, 2)), "b")}
    _check(lambda p: ad.mean(ad.mul(m := ad.matmul(p["a"], p["b"]), m)), params)


def test_grad_add_mul_broadcast():
    rng = _rng(11)
    params = {"a": _p(rng.normal(size=(3, 4)), "a"),
              "b": _p(rng.normal(size=(1, 4)), "b")}
    _check(lambda p: ad.tsum(ad.mul(ad.add(p["a"], p["b"]), p["a"])), params)


def test_grad_scale_reshape_transpose_concat():
    rng = _rng(12)
    params = {"a": _p(rng.normal(size=(2, 6)), "a"),
              "b": _p(rng.normal(size=(2, 6)), "b")}

    def f(p):
        c = ad.concat([p["a"], p["b"]], axis=0)
        t = ad.transpose(ad.reshape(c, (4, 3, 2)), (1, 0, 2))
        return ad.mean(ad.mul(ad.scale(t, 1.7), t))

    _check(f, params)


def test_grad_softmax():
    rng = _rng(13)
    params = {"x": _p(rng.normal(size=(3, 5)), "x")}
    w = rng.normal(size=(3, 5))
    _check(lambda p: ad.tsum(ad.mul(ad.softmax(p["x"]), ad.constant(w))), params)


def test_grad_layer_norm():
    rng = _rng(14)
    params = {"x": _p(rng.normal(size=(4, 8)), "x")}
    w = rng.normal(size=(4, 8))
    _check(lambda p: ad.tsum(ad.mul(ad.layer_norm(p["x"], axis=-1),
                                    ad.constant(w))), params)


def test_grad_gelu():
    rng = _rng(15)
    params = {"x": _p(rng.normal(size=(20,)), "x")}
    _check(lambda p: ad.tsum(ad.mul(ad.gelu(p["x"]), p["x"])), params)


def test_grad_conv1x1_strided():
    rng = _rng(16)
    params = {"x": _p(rng.normal(size=(2, 3, 4, 4)), "x"),
              "w": _p(rng.normal(size=(4, 3)), "w")}
    c = rng.normal(size=(2, 4, 2, 2))
    _check(lambda p: ad.tsum(ad.mul(ad.conv1x1(p["x"], p["w"], stride=2),
                                    ad.constant(c))), params)


def test_grad_depthwise3x3():
    rng = _rng(17)
    params = {"x": _p(rng.normal(size=(2, 3, 4, 4)), "x"),
              "w": _p(rng.normal(size=(3, 3, 3)), "w")}
    c = rng.normal(size=(2, 3, 4, 4))
    _check(lambda p: ad.tsum(ad.mul(ad.depthwise_conv3x3(p["x"], p["w"]),
                                    ad.constant(c))), params)


def test_grad_reductions():
    rng = _rng(18)
    params = {"x": _p(rng.normal(size=(3, 4, 5)), "x")}

    def f(p):
        m = ad.mean(p["x"], axis=(1,), keepdims=True)
        s = ad.tsum(p["x"], axis=2)
        return ad.add(ad.mean(ad.mul(m, m)), ad.mean(ad.mul(s, s)))

    _check(f, params)


def test_grad_losses_tight():
    rng = _rng(19)
    params = {"logits": _p(rng.normal(size=(4, 6)), "logits")}
    labels = np.array([0, 5, 2, 2])
    _check(lambda p: ad.softmax_cross_entropy(p["logits"], labels), params,
           tol=1e-7)
    params2 = {"a": _p(rng.normal(size=(3, 6)), "a"),
               "b": _p(rng.normal(size=(3, 6)), "b")}
    _check(lambda p: ad.softmax_kl(p["a"], p["b"]), params2, tol=1e-7)


def test_grad_square_very_tight():
    rng = _rng(20)
    params = {"x": _p(rng.normal(size=(5,)), "x")}
    _check(lambda p: ad.tsum(ad.mul(p["x"], p["x"])), params, tol=1e-7)


# ---------------------------------------------------------------------------
# graph semantics
# ---------------------------------------------------------------------------


def test_backward_requires_scalar():
    x = _p(np.ones((2, 2)), "x")
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(x, x))


def test_backward_accumulates_fanout():
    x = _p([3.0], "x")
    y = ad.add(x, x)  # dy/dx = 2
    grads = ad.backward(ad.tsum(y), {"x": x})
    np.testing.assert_allclose(grads["x"].data, [2.0])


def test_disconnected_parameter_gets_zero_grad():
    x = _p([1.0, 2.0], "x")
    unused = _p([5.0], "unused")
    grads = ad.backward(ad.tsum(ad.mul(x, x)), {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"].data, [0.0])


def test_tape_consumed_after_backward():
    x = _p([2.0], "x")
    loss = ad.tsum(ad.mul(x, x))
    ad.backward(loss, {"x": x})
    assert loss._parents == () and loss._vjp is None


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_forward_raises():
    big = _p([1e308], "big")
    with pytest.raises(NumericError):
        ad.mul(big, big)


def test_detach_blocks_gradient():
    x = _p([3.0], "x")
    d = ad.mul(x, x).detach()
    loss = ad.tsum(ad.mul(d, x))
    grads = ad.backward(loss, {"x": x})
    np.testing.assert_allclose(grads["x"].data, [9.0])  # only the live factor


def test_apply_primitive_matches_direct_call():
    rng = _rng(21)
    a = _p(rng.normal(size=(2, 3)), "a")
    out = ad.apply_primitive("softmax", [a], axis=-1)
    np.testing.assert_array_equal(out.data, ad.softmax(a, axis=-1).data)
    with pytest.raises(ShapeError):
        ad.apply_primitive("log", [a])


def test_forward_determinism_bitwise():
    rng = _rng(22)
    x = rng.normal(size=(3, 3))
    w = rng.normal(size=(3, 3))

    def run():
        t = ad.gelu(ad.matmul(_p(x, "x"), _p(w, "w")))
        return ad.softmax(t).data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# property tests
# ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = _p(rng.normal(0, 5, size=(3, 6)), "x")
    rows = ad.softmax(x).data.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_kl_nonnegative_property(seed):
    rng = np.random.default_rng(seed)
    a = _p(rng.normal(size=(2, 5)), "a")
    b = _p(rng.normal(size=(2, 5)), "b")
    assert ad.softmax_kl(a, b).data >= 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_layer_norm_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 8))
    shift = float(rng.normal() * 10)
    a = ad.layer_norm(_p(x, "a"), axis=-1).data
    b = ad.layer_norm(_p(x + shift, "b"), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-7)
