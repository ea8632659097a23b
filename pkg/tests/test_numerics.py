import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d2f.numerics import (
    OptimizerState,
    adamw_step,
    cross_entropy_rows,
    grad_check,
    kl_rows,
    log_softmax_rows,
    softmax_rows,
)


def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])


def test_softmax_large_logits_do_not_overflow():
    out = softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0)
    assert out[0, 1] < 1e-300 or out[0, 1] == 0.0


def test_softmax_matches_high_precision_reference():
    mpmath.mp.dps = 50
    exps = [mpmath.e ** k for k in (1, 2, 3)]
    ref = [float(x / sum(exps)) for x in exps]
    np.testing.assert_allclose(softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0], ref, rtol=0, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_rows(np.array([[0.0, np.nan]]))
    with pytest.raises(ValueError):
        log_softmax_rows(np.array([[np.inf, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_are_distributions(x):
    p = softmax_rows(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_kl_of_identical_rows_is_zero():
    logp = log_softmax_rows(np.random.default_rng(0).normal(size=(4, 7)))
    np.testing.assert_allclose(kl_rows(np.exp(logp), logp), 0.0, atol=1e-12)


def test_kl_one_hot_target_is_negative_log_prob():
    logp = log_softmax_rows(np.array([[0.3, -1.0, 2.0]]))
    target = np.array([[0.0, 0.0, 1.0]])
    assert kl_rows(target, logp)[0] == pytest.approx(-logp[0, 2], abs=1e-12)


def test_kl_hand_value():
    got = kl_rows(np.array([[0.5, 0.5]]), np.log(np.array([[0.9, 0.1]])))[0]
    want = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert got == pytest.approx(want, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        kl_rows(np.ones((2, 3)) / 3, np.zeros((3, 3)))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(-20, 20)),
    arrays(np.float64, (3, 5), elements=st.floats(-20, 20)),
)
def test_kl_is_nonnegative(a, b):
    assert np.all(kl_rows(softmax_rows(a), log_softmax_rows(b)) >= -1e-12)


def test_cross_entropy_matches_log_softmax():
    logits = np.random.default_rng(1).normal(size=(5, 6))
    targets = np.array([0, 5, 2, 2, 1])
    want = -log_softmax_rows(logits)[np.arange(5), targets]
    np.testing.assert_allclose(cross_entropy_rows(logits, targets), want)


def test_adamw_zero_grads_no_decay_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    state = OptimizerState.for_params(params, learning_rate=0.1)
    adamw_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adamw_one_step_closed_form():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    p0, g = 0.5, 0.2
    params = {"x": np.array([p0])}
    state = OptimizerState.for_params(params, learning_rate=lr, betas=(b1, b2), epsilon=eps, weight_decay=wd)
    adamw_step(params, {"x": np.array([g])}, state)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    want = p0 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert params["x"][0] == pytest.approx(want, abs=1e-15)
    assert state.step_count == 1


def test_adamw_decay_only_shrinks_by_lr_times_wd():
    params = {"w": np.array([2.0, -4.0])}
    state = OptimizerState.for_params(params, learning_rate=0.1, weight_decay=0.5)
    adamw_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(params["w"], np.array([2.0, -4.0]) * (1 - 0.05))
    np.testing.assert_array_equal(state.first_moment["w"], 0.0)


def test_adamw_rejects_non_finite_gradient_by_name():
    params = {"layers.0.wq": np.zeros(3)}
    state = OptimizerState.for_params(params, learning_rate=0.1)
    with pytest.raises(FloatingPointError, match="layers.0.wq"):
        adamw_step(params, {"layers.0.wq": np.array([0.0, np.nan, 0.0])}, state)


def test_adamw_is_deterministic():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(4, 4))
    g = rng.normal(size=(4, 4))
    outs = []
    for _ in range(2):
        params = {"w": p.copy()}
        state = OptimizerState.for_params(params, learning_rate=1e-3, weight_decay=0.01)
        for _ in range(3):
            adamw_step(params, {"w": g}, state)
        outs.append(params["w"].tobytes())
    assert outs[0] == outs[1]


def test_optimizer_state_validation():
    with pytest.raises(ValueError):
        OptimizerState(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimizerState(learning_rate=0.1, betas=(1.0, 0.9))


def test_grad_check_quadratic():
    params = {"p": np.random.default_rng(0).normal(size=(3, 4))}

    def loss(ps):
        return 0.5 * float((ps["p"] ** 2).sum()), {"p": ps["p"].copy()}

    assert grad_check(loss, params, perturbation=1e-5) < 1e-7


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(1)
    params = {"z": rng.normal(size=(6, 5))}
    targets = rng.integers(0, 5, size=6)

    def loss(ps):
        z = ps["z"]
        g = softmax_rows(z)
        g[np.arange(6), targets] -= 1.0
        return float(cross_entropy_rows(z, targets).sum()), {"z": g}

    assert grad_check(loss, params, samples_per_param=30) < 1e-6


def test_grad_check_catches_a_wrong_gradient():
    params = {"p": np.ones(4)}

    def loss(ps):
        return float((ps["p"] ** 2).sum()), {"p": ps["p"].copy()}  # true gradient is 2p

    assert grad_check(loss, params) > 0.4
