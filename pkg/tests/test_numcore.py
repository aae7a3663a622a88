import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import random_net_grad_error

from cascade_kd.numcore import (
    AdamState,
    GraphError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    cross_entropy,
    cross_entropy_probs,
    dense_forward,
    kd_loss,
    lr_schedule,
    relu,
    softmax,
    softmax_np,
    tsum,
)

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def _matmul_loops(x, W, b):
    out = np.zeros((x.shape[0], W.shape[1]))
    for i in range(x.shape[0]):
        for j in range(W.shape[1]):
            acc = b[j]
            for k in range(x.shape[1]):
                acc += x[i, k] * W[k, j]
            out[i, j] = acc
    return out


# -- dense ---------------------------------------------------------------


def test_dense_unit_row_selects_weight_row():
    y = dense_forward(Tensor([[1.0, 0.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]), Tensor([0.0, 0.0]))
    assert y.data.tolist() == [[2.0, 3.0]]


def test_dense_zero_input_passes_bias():
    W = Tensor(np.random.default_rng(0).standard_normal((2, 2)))
    y = dense_forward(Tensor([[0.0, 0.0]]), W, Tensor([7.0, -1.0]))
    assert y.data.tolist() == [[7.0, -1.0]]


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    y = dense_forward(Tensor(x), Tensor(W), Tensor(b))
    np.testing.assert_allclose(y.data, _matmul_loops(x, W, b), rtol=0, atol=1e-12)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        dense_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


# -- softmax / losses ----------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    big = softmax(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big)) and big[0, 0] == 1.0 and big[0, 1] < 1e-300
    e = mpmath.e
    want = [float(e / (e + 1)), float(1 / (e + 1))]
    np.testing.assert_allclose(softmax(Tensor([[1.0, 0.0]])).data[0], want, atol=1e-15)
    assert abs(want[0] - 0.73106) < 1e-5 and abs(want[1] - 0.26894) < 1e-5


@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(z):
    p = softmax_np(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_cross_entropy_probs_examples():
    loss, clamps = cross_entropy_probs(Tensor([[1.0, 0.0]]), [0])
    assert abs(loss.item()) <= 1e-12 and clamps == 0
    loss, _ = cross_entropy_probs(Tensor([[0.5, 0.5]]), [1])
    assert loss.item() == pytest.approx(0.693147, abs=1e-6)
    loss, clamps = cross_entropy_probs(Tensor([[1.0, 0.0]]), [1])
    assert clamps == 1 and np.isfinite(loss.item())


def test_cross_entropy_matches_per_sample_sum():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    total = 0.0
    for row, y in zip(logits, labels):
        z = [mpmath.mpf(float(v)) for v in row]
        total += float(-(z[y] - mpmath.log(sum(mpmath.exp(v) for v in z))))
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(total / 4, abs=1e-13)
    probs = softmax_np(logits)
    loss, _ = cross_entropy_probs(Tensor(probs), labels)
    assert loss.item() == pytest.approx(total / 4, abs=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])


def _kl_oracle(teacher, student, T):
    mpmath.mp.dps = 40
    total = mpmath.mpf(0)
    for t_row, s_row in zip(teacher, student):
        t = [mpmath.mpf(float(v)) / T for v in t_row]
        s = [mpmath.mpf(float(v)) / T for v in s_row]
        zt = sum(mpmath.exp(v) for v in t)
        zs = sum(mpmath.exp(v) for v in s)
        for a, b in zip(t, s):
            pt = mpmath.exp(a) / zt
            ps = mpmath.exp(b) / zs
            total += pt * mpmath.log(pt / ps)
    return float(T * T * total / len(teacher))


def test_kd_loss_examples():
    same = np.array([[0.3, -1.2, 2.0]])
    assert kd_loss(Tensor(same), same, 1.0).item() == 0.0
    assert kd_loss(Tensor([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0).item() == pytest.approx(0.462117, abs=1e-6)
    assert _kl_oracle([[1.0, 0.0]], [[0.0, 1.0]], 1) == pytest.approx(0.462117, abs=1e-6)


def test_kd_loss_temperature_matches_oracle():
    rng = np.random.default_rng(3)
    s, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    for T in (1.0, 2.0, 4.0):
        assert kd_loss(Tensor(s), t, T).item() == pytest.approx(_kl_oracle(t, s, T), rel=1e-12, abs=1e-15)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_kd_loss_nonnegative(s, t):
    assert kd_loss(Tensor(s), t, 1.5).item() >= 0.0


# -- backward ------------------------------------------------------------


def test_backward_of_sum_is_ones():
    W = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(tsum(W))
    assert np.array_equal(W.grad, np.ones((2, 3)))


def test_backward_twice_raises():
    W = Tensor(np.ones(3), requires_grad=True)
    loss = tsum(W)
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_frozen_leaf_gets_no_grad():
    x = Tensor(np.ones((2, 3)))
    W = Tensor(np.ones((3, 2)), requires_grad=False)
    V = Tensor(np.ones((2, 2)), requires_grad=True)
    out = dense_forward(relu(dense_forward(x, W, Tensor(np.zeros(2)))), V, Tensor(np.zeros(2), requires_grad=True))
    backward(cross_entropy(out, [0, 1]))
    assert W.grad is None and V.grad is not None


def test_gradients_match_finite_differences():
    assert max(random_net_grad_error(s) for s in range(10)) < 1e-4


# -- optimisation --------------------------------------------------------


def test_adam_zero_grad_no_decay_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step(AdamState(lr=0.1, weight_decay=0.0), {"p": p})
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    st_ = AdamState(lr=0.1, weight_decay=0.0, eps=1e-3)
    adam_step(st_, {"p": p})
    # bias-corrected m = 1, v = 1 on the first step
    assert p.data[0] == pytest.approx(-0.1 * 1.0 / (1.0 + 1e-3), abs=1e-15)


def test_adam_converges_on_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=0.1, weight_decay=0.0, eps=1e-8)
    for _ in range(100):
        d = w - 3.0
        backward(tsum(d * d))
        adam_step(state, {"w": w})
    assert abs(w.data[0] - 3.0) < 0.05


def test_adam_skips_frozen():
    p = Tensor(np.array([1.0]), requires_grad=False)
    p.grad = np.array([5.0])
    adam_step(AdamState(lr=1.0), {"p": p})
    assert p.data[0] == 1.0


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((8, 3)))
        W = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        state = AdamState(lr=0.05)
        for _ in range(20):
            backward(cross_entropy(dense_forward(x, W, b), np.arange(8) % 2))
            adam_step(state, {"W": W, "b": b})
        return W.data.tobytes() + b.data.tobytes()

    assert run() == run()


def test_lr_schedule_examples():
    ms = [150, 270, 390]
    assert lr_schedule(0.01, 0, ms) == 0.01
    assert lr_schedule(0.01, 150, ms) == pytest.approx(0.001, rel=1e-12)
    assert lr_schedule(0.01, 149, ms) == 0.01
    assert lr_schedule(0.01, 400, ms) == pytest.approx(1e-5, rel=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(0.01, 0, [5, 3])


@settings(max_examples=50)
@given(st.integers(0, 1000), st.integers(0, 1000))
def test_lr_schedule_monotone(e1, e2):
    lo, hi = sorted((e1, e2))
    assert lr_schedule(0.1, hi, [10, 100, 500]) <= lr_schedule(0.1, lo, [10, 100, 500])


def test_tensor_item_rejects_vectors():
    with pytest.raises(ShapeError):
        Tensor(np.ones(2)).item()
    assert math.isclose(Tensor([[2.5]]).item(), 2.5)
