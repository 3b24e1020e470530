import numpy as np
import pytest

from voxaging import autodiff as ad
from voxaging.autodiff import Tensor
from voxaging.gradcheck import check_gradients, GradCheckError
from voxaging.optim import Adam, adam_state, adam_step


def t64(arr, rg=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


# ----------------------------------------------------------------- matmul

def test_matmul_identity():
    i2 = Tensor(np.eye(2, dtype=np.float32))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float32))
    out = ad.matmul(i2, b)
    assert np.array_equal(out.data, b.data)


def test_matmul_hand_product():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float32))
    out = ad.matmul(a, b)
    assert np.array_equal(out.data, np.array([[19.0, 22.0], [43.0, 50.0]], dtype=np.float32))


def test_matmul_shape_mismatch():
    a = Tensor(np.zeros((2, 3), dtype=np.float32))
    b = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        ad.matmul(a, b)


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a = t64(rng.standard_normal((3, 4)))
    b = t64(rng.standard_normal((4, 2)))
    check_gradients(lambda x, y: ad.tsum(ad.matmul(x, y)), [a, b])


def test_matmul_batched_gradcheck():
    rng = np.random.default_rng(1)
    a = t64(rng.standard_normal((2, 3, 4)))
    b = t64(rng.standard_normal((2, 4, 3)))
    check_gradients(lambda x, y: ad.tmean(ad.mul(ad.matmul(x, y), ad.matmul(x, y))), [a, b])


# ----------------------------------------------------------------- conv3d

def test_conv3d_identity_kernel():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 4, 5, 3)).astype(np.float32))
    w = Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32))
    out = ad.conv3d(x, w, stride=1, pad=0)
    assert np.array_equal(out.data, x.data)


def test_conv3d_constant_field():
    v = 0.7
    x = Tensor(np.full((1, 6, 6, 6), v, dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32))
    out = ad.conv3d(x, w, stride=1, pad=1)
    interior = out.data[0, 1:-1, 1:-1, 1:-1]
    assert np.allclose(interior, 27 * v, rtol=1e-6)


def test_conv3d_strided_shape():
    x = Tensor(np.zeros((2, 8, 8, 8), dtype=np.float32))
    w = Tensor(np.zeros((3, 2, 3, 3, 3), dtype=np.float32))
    out = ad.conv3d(x, w, stride=2, pad=1)
    assert out.shape == (3, 4, 4, 4)


def test_conv3d_too_small_errors():
    x = Tensor(np.zeros((1, 2, 2, 2), dtype=np.float32))
    w = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        ad.conv3d(x, w, stride=1, pad=0)


def test_conv3d_gradcheck():
    rng = np.random.default_rng(3)
    x = t64(rng.standard_normal((2, 4, 4, 4)))
    w = t64(rng.standard_normal((3, 2, 3, 3, 3)) * 0.5)
    check_gradients(lambda a, b: ad.tmean(ad.conv3d(a, b, stride=2, pad=1)), [x, w],
                    max_elems=128)


# ------------------------------------------------------- resample_trilinear

def test_resample_identity_bitwise():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
    out = ad.resample_trilinear(x, (3, 4, 5))
    assert np.array_equal(out.data, x.data)


def test_resample_preserves_constants():
    x = Tensor(np.full((1, 4, 4, 4), 0.37, dtype=np.float64))
    out = ad.resample_trilinear(x, (8, 8, 8))
    assert np.allclose(out.data, 0.37, atol=1e-12)


def test_resample_1d_convention():
    # [0, 1] along one axis resampled to length 4 must give [0, .25, .75, 1]
    # under coords (i + 0.5) * (src/dst) - 0.5 clamped to [0, src-1].
    x = Tensor(np.array([0.0, 1.0], dtype=np.float64).reshape(1, 2, 1, 1))
    out = ad.resample_trilinear(x, (4, 1, 1))
    assert np.allclose(out.data.reshape(-1), [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_resample_gradcheck():
    rng = np.random.default_rng(5)
    x = t64(rng.standard_normal((2, 3, 4, 2)))
    check_gradients(lambda a: ad.tmean(ad.mul(ad.resample_trilinear(a, (5, 2, 4)),
                                              ad.resample_trilinear(a, (5, 2, 4)))), [x])


# ----------------------------------------------------------------- layer_norm

def test_layer_norm_constant_vector():
    x = Tensor(np.array([2.0, 2.0, 2.0], dtype=np.float32))
    out = ad.layer_norm(x)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_two_values():
    x = Tensor(np.array([1.0, 3.0], dtype=np.float64))
    out = ad.layer_norm(x)
    # mean 2, variance 1 -> (-1, 1) up to the eps inside the square root
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-4)
    assert abs(out.data[1] - 1.0) <= 1e-5


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(6)
    x = t64(rng.standard_normal((3, 5)))
    w = t64(rng.standard_normal((3, 5)))
    check_gradients(lambda a, b: ad.tsum(ad.mul(ad.layer_norm(a), b)), [x, w])


# ------------------------------------------------------- softmax / cross-entropy

def test_ce_uniform():
    logits = Tensor(np.zeros((3, 4), dtype=np.float64))
    loss = ad.softmax_cross_entropy(logits, np.array([0, 1, 3]))
    assert np.isclose(loss.item(), np.log(4.0), rtol=1e-12)


def test_ce_saturated():
    logits = np.zeros((2, 5), dtype=np.float64)
    logits[0, 2] = 1000.0
    logits[1, 4] = 1000.0
    loss = ad.softmax_cross_entropy(Tensor(logits), np.array([2, 4]))
    assert loss.item() < 1e-8


def test_ce_target_out_of_range():
    logits = Tensor(np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(logits, np.array([0, 4]))


def test_ce_gradcheck():
    rng = np.random.default_rng(7)
    logits = t64(rng.standard_normal((6, 5)))
    targets = rng.integers(0, 5, size=6)
    check_gradients(lambda l: ad.softmax_cross_entropy(l, targets), [logits])


def test_masked_softmax_rows_sum_to_one_and_mask():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
    bias = np.triu(np.full((4, 4), -np.inf), k=1)  # causal
    out = ad.masked_softmax(x, bias)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.array_equal(out.data[0, 1:], np.zeros(3, dtype=np.float32))


def test_masked_softmax_gradcheck():
    rng = np.random.default_rng(9)
    x = t64(rng.standard_normal((3, 4)))
    w = t64(rng.standard_normal((3, 4)))
    bias = np.triu(np.full((4, 4), -np.inf), k=1)[:3]
    check_gradients(lambda a, b: ad.tsum(ad.mul(ad.masked_softmax(a, bias), b)), [x, w])


# ----------------------------------------------------------------- backward

def test_backward_square():
    x = t64(3.0)
    y = ad.mul(x, x)
    ad.backward(y)
    assert np.isclose(x.grad, 6.0)


def test_backward_frozen_tensor_gets_no_grad():
    x = t64(2.0)
    c = Tensor(np.float64(4.0), requires_grad=False)
    y = ad.mul(x, c)
    ad.backward(y)
    assert c.grad is None
    assert np.isclose(x.grad, 4.0)


def test_backward_requires_scalar():
    x = t64(np.ones(3))
    y = ad.mul(x, x)
    with pytest.raises(ValueError):
        ad.backward(y)


def test_backward_fanout_sums_contributions():
    # z = x*x + 3x consumed twice -> dz/dx = 2x + 3
    x = t64(1.5)
    z = ad.add(ad.mul(x, x), ad.mul(x, 3.0))
    ad.backward(z)
    assert np.isclose(x.grad, 2 * 1.5 + 3)
    check_gradients(lambda a: ad.add(ad.mul(a, a), ad.mul(a, 3.0)), [t64(1.5)])


def test_backward_composite_conv_ln_ce():
    rng = np.random.default_rng(10)
    x = t64(rng.standard_normal((1, 4, 4, 4)))
    w = t64(rng.standard_normal((3, 1, 3, 3, 3)) * 0.3)
    targets = np.array([1, 0])

    def f(a, b):
        h = ad.conv3d(a, b, stride=2, pad=1)        # (3, 2, 2, 2)
        h = ad.reshape(ad.permute(h, (1, 2, 3, 0)), (8, 3))
        h = ad.layer_norm(h)
        logits = ad.take_rows(h, np.array([0, 5]))
        return ad.softmax_cross_entropy(logits, targets)

    check_gradients(f, [x, w], max_elems=96)


def test_tape_topological_and_single_visit():
    x = t64(2.0)
    y = ad.mul(ad.add(ad.mul(x, x), 1.0), x)
    tape = ad.backward(y)
    serials = [n[0] for n in tape.nodes]
    assert len(serials) == len(set(serials))
    pos = {s: i for i, s in enumerate(serials)}
    for s, _op, parents in tape.nodes:
        for p in parents:
            if p in pos:
                assert pos[p] < pos[s]


def test_backward_determinism_bitwise():
    rng = np.random.default_rng(11)
    xv = rng.standard_normal((2, 3, 3, 3))
    wv = rng.standard_normal((2, 2, 3, 3, 3))

    def run():
        x = t64(xv.copy())
        w = t64(wv.copy())
        out = ad.tmean(ad.silu(ad.conv3d(x, w, stride=1, pad=1)))
        ad.backward(out)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    o1, g1, h1 = run()
    o2, g2, h2 = run()
    assert np.array_equal(o1, o2) and np.array_equal(g1, g2) and np.array_equal(h1, h2)


def test_stop_gradient_and_straight_through():
    x = t64(2.0)
    y = t64(7.0)
    out = ad.straight_through(x, ad.mul(y, y))
    assert np.isclose(out.data, 49.0)
    ad.backward(out)
    assert np.isclose(x.grad, 1.0)   # identity jacobian to the continuous input
    assert y.grad is None            # quantized branch is detached


def test_elementwise_gradchecks():
    rng = np.random.default_rng(12)
    x = t64(rng.uniform(0.5, 2.0, size=(4, 3)))
    for f in [
        lambda a: ad.tsum(ad.exp(a)),
        lambda a: ad.tsum(ad.log(a)),
        lambda a: ad.tsum(ad.sqrt(a)),
        lambda a: ad.tsum(ad.sigmoid(a)),
        lambda a: ad.tsum(ad.silu(a)),
        lambda a: ad.tsum(ad.absolute(a)),
        lambda a: ad.tsum(ad.power(a, 3.0)),
        lambda a: ad.tmean(ad.div(a, ad.add(a, 1.0))),
        lambda a: ad.tsum(ad.mul(ad.broadcast_to(ad.reshape(ad.tsum(a, axis=0), (1, 3)), (4, 3)), a)),
    ]:
        check_gradients(f, [Tensor(x.data.copy(), requires_grad=True)])


def test_take_rows_and_concat_gradcheck():
    rng = np.random.default_rng(13)
    table = t64(rng.standard_normal((5, 3)))
    idx = np.array([0, 3, 3, 1])

    def f(tb):
        rows = ad.take_rows(tb, idx)
        both = ad.concat([rows, ad.mul(rows, 2.0)], axis=0)
        return ad.tsum(ad.mul(both, both))

    check_gradients(f, [table])


def test_no_implicit_broadcast():
    a = Tensor(np.zeros((2, 3), dtype=np.float32))
    b = Tensor(np.zeros((3,), dtype=np.float32))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_check_finite_flag():
    ad.CHECK_FINITE = True
    try:
        x = Tensor(np.array([1.0, 0.0], dtype=np.float32), requires_grad=True)
        with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
            ad.log(x)
    finally:
        ad.CHECK_FINITE = False


def test_gradcheck_catches_wrong_gradient():
    # sanity: the checker itself must fail on a deliberately wrong backward
    x = t64(1.3)

    def bad(a):
        out = ad._make(a.data * a.data, (a,), lambda g: (g * 3.0 * a.data,), "bad_sq")
        return out

    with pytest.raises(GradCheckError):
        check_gradients(bad, [x])


# ----------------------------------------------------------------- adam

def test_adam_zero_gradient_fixed_point():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    params = {"p": p}
    state = adam_state(params)
    before = p.data.copy()
    adam_step(params, {"p": np.zeros(2, dtype=np.float32)}, state, lr=0.1)
    assert np.array_equal(p.data, before)


def test_adam_first_step_is_signed_lr():
    g = np.array([0.3, -2.0, 5.0], dtype=np.float64)
    p = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    params = {"p": p}
    state = adam_state(params)
    adam_step(params, {"p": g.copy()}, state, lr=0.1)
    assert np.allclose(p.data, -0.1 * np.sign(g), rtol=1e-6)


def test_adam_quadratic_converges_and_matches_scalar_recurrence():
    # independent scalar oracle of the same recurrence
    x_oracle, m, v = 1.0, 0.0, 0.0
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    for t in range(1, 101):
        g = 2.0 * x_oracle
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x_oracle -= lr * mh / (np.sqrt(vh) + eps)

    p = Tensor(np.float64(1.0), requires_grad=True)
    opt = Adam({"x": p}, lr=lr, beta1=b1, beta2=b2, eps=eps)
    for _ in range(100):
        opt.zero_grad()
        loss = ad.mul(p, p)
        ad.backward(loss)
        opt.step()
    assert abs(p.data) < 0.05
    assert np.isclose(float(p.data), x_oracle, rtol=1e-10)
