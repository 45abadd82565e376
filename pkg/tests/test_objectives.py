import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trifed.alignment import SharedStack
from trifed.errors import NumericInputError
from trifed.objectives import (
    PRED_KL_CLAMP,
    Hyperparameters,
    batch_prediction_kl,
    cross_entropy,
    cross_entropy_grad,
    loss_share,
    loss_specific,
    matrix_kl,
    matrix_kl_grads,
    prediction_kl,
    prediction_kl_grad_p,
)

HYPER = Hyperparameters()


def test_ce_uniform_two_classes():
    assert cross_entropy(np.array([0.0, 0.0]), 0) == pytest.approx(math.log(2.0), rel=1e-12)


def test_ce_confident_correct():
    # -log sigmoid(20) = log(1 + exp(-20)), evaluated independently
    expected = math.log1p(math.exp(-20.0))
    assert expected == pytest.approx(2.0611536181902037e-09, rel=1e-9)
    assert cross_entropy(np.array([10.0, -10.0]), 0) == pytest.approx(expected, rel=1e-9)


def test_ce_three_class_hand_logsumexp():
    # -log softmax([1,2,3])[2] = log(1 + e^-1 + e^-2)
    expected = math.log(1.0 + math.exp(-1.0) + math.exp(-2.0))
    got = cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(0.40760596444438, rel=1e-10)


def test_ce_label_out_of_range():
    with pytest.raises(NumericInputError):
        cross_entropy(np.array([0.0, 1.0]), 2)


def test_ce_nonnegative_and_finite():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.normal(size=rng.integers(2, 6)) * 10
        v = cross_entropy(logits, int(rng.integers(0, len(logits))))
        assert v >= 0.0 and np.isfinite(v)


def test_prediction_kl_equal_and_shifted_logits():
    p = np.array([0.3, -1.2, 2.0])
    assert prediction_kl(p, p) == 0.0
    assert prediction_kl(p, p + 7.5) == pytest.approx(0.0, abs=1e-12)


def test_prediction_kl_two_term_hand_formula():
    p = np.array([1.0, 0.0])
    q = np.array([0.0, 1.0])
    sp = [math.exp(1.0) / (math.exp(1.0) + 1.0), 1.0 / (math.exp(1.0) + 1.0)]
    sq = [1.0 / (1.0 + math.exp(1.0)), math.exp(1.0) / (1.0 + math.exp(1.0))]
    expected = sp[0] * math.log(sp[0] / sq[0]) + sp[1] * math.log(sp[1] / sq[1])
    assert prediction_kl(p, q) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_prediction_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    p, q = rng.normal(size=n) * 5, rng.normal(size=n) * 5
    assert prediction_kl(p, q) >= -1e-15


def test_matrix_kl_identical_stacks():
    rng = np.random.default_rng(1)
    s = SharedStack(rng.normal(size=(3, 2, 2)))
    assert matrix_kl(s, s.copy()) == 0.0


def test_matrix_kl_constant_shift_per_layer():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(2, 2, 2))
    shifted = base + 3.25
    assert matrix_kl(SharedStack(base), SharedStack(shifted)) == pytest.approx(0.0, abs=1e-12)


def test_matrix_kl_four_term_hand_formula():
    local = np.array([[[0.1, 0.6], [-0.4, 1.2]]])
    ref = np.array([[[1.0, -0.3], [0.2, 0.5]]])
    p_flat, q_flat = local.ravel(), ref.ravel()
    sp = np.exp(p_flat) / np.exp(p_flat).sum()
    sq = np.exp(q_flat) / np.exp(q_flat).sum()
    expected = sum(sp[i] * math.log(sp[i] / sq[i]) for i in range(4))
    got = matrix_kl(SharedStack(local), SharedStack(ref))
    assert got == pytest.approx(expected, rel=1e-12)


def test_loss_share_reduces_to_ce():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=4)
    stack = SharedStack(rng.normal(size=(2, 3, 3)))
    out = loss_share(logits, 1, stack, stack.copy(), HYPER)
    assert out.total == pytest.approx(out.ce, rel=1e-12)
    lam0 = Hyperparameters(matrix_kl_weight=0.0)
    other = SharedStack(rng.normal(size=(2, 3, 3)))
    out = loss_share(logits, 1, stack, other, lam0)
    assert out.total == pytest.approx(out.ce, rel=1e-12)


def test_loss_share_recombination():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=5)
    local = SharedStack(rng.normal(size=(3, 2, 2)))
    ref = SharedStack(rng.normal(size=(3, 2, 2)))
    hyper = Hyperparameters(matrix_kl_weight=0.7)
    out = loss_share(logits, 2, local, ref, hyper)
    expected = cross_entropy(logits, 2) + 0.7 * matrix_kl(local, ref)
    assert out.total == pytest.approx(expected, rel=1e-12)
    assert out.total == pytest.approx(out.ce + 0.7 * out.kl_term + out.reg, rel=1e-12)


def test_loss_specific_degenerate_cases():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=4)
    a = [rng.normal(size=(3, 2))]
    b = [rng.normal(size=(2, 3))]
    no_decay = Hyperparameters(weight_decay=0.0)
    out = loss_specific(logits, 0, logits.copy(), a, b, no_decay)
    assert out.total == pytest.approx(out.ce, rel=1e-12)
    decay = Hyperparameters(weight_decay=2.0)
    zeros_a = [np.zeros((3, 2))]
    zeros_b = [np.zeros((2, 3))]
    out = loss_specific(logits, 0, logits.copy(), zeros_a, zeros_b, decay)
    assert out.reg == 0.0


def test_loss_specific_recombination():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=4)
    ref_logits = rng.normal(size=4)
    a = [rng.normal(size=(3, 2)), rng.normal(size=(4, 2))]
    b = [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]
    hyper = Hyperparameters(weight_decay=0.3, pred_kl_weight=0.8)
    out = loss_specific(logits, 1, ref_logits, a, b, hyper)
    ce = cross_entropy(logits, 1)
    kl = min(prediction_kl(logits, ref_logits), PRED_KL_CLAMP)
    reg = 0.15 * (sum(np.sum(m * m) for m in a) + sum(np.sum(m * m) for m in b))
    assert out.total == pytest.approx(ce - 0.8 * kl + reg, rel=1e-12)


def test_pred_kl_clamp_engages():
    p = np.array([40.0, -40.0])
    q = np.array([-40.0, 40.0])
    assert prediction_kl(p, q) > PRED_KL_CLAMP
    mean, grad = batch_prediction_kl(p[None, :], q[None, :])
    assert mean == PRED_KL_CLAMP
    assert np.array_equal(grad, np.zeros_like(grad))


def _fd(fn, x, step=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn()
        flat[i] = keep - step
        lo = fn()
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * step)
    return g


def test_ce_grad_matches_fd():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=5)
    fd = _fd(lambda: cross_entropy(logits, 3), logits)
    ana = cross_entropy_grad(logits, 3)
    assert np.max(np.abs(ana - fd)) <= 1e-7


def test_prediction_kl_grad_matches_fd():
    rng = np.random.default_rng(8)
    p, q = rng.normal(size=4), rng.normal(size=4)
    fd = _fd(lambda: prediction_kl(p, q), p)
    ana = prediction_kl_grad_p(p, q)
    assert np.max(np.abs(ana - fd)) <= 1e-7


def test_matrix_kl_grads_match_fd():
    rng = np.random.default_rng(9)
    local = rng.normal(size=(2, 2, 2))
    ref = rng.normal(size=(2, 2, 2))
    value = lambda: matrix_kl(SharedStack(local), SharedStack(ref))
    g_local, g_ref = matrix_kl_grads(SharedStack(local), SharedStack(ref))
    assert np.max(np.abs(g_local - _fd(value, local))) <= 1e-7
    assert np.max(np.abs(g_ref - _fd(value, ref))) <= 1e-7
