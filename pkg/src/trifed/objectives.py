"""Training losses and their closed-form gradients.

Two phase losses are built from three scalar terms:

* softmax cross-entropy between logits and an integer label,
* a prediction-level KL divergence between two logit vectors,
* a matrix-level KL divergence between two shared stacks, taken after
  softmax-normalizing each layer's flattened entries and averaged over layers.

The shared-phase loss is ``ce + matrix_kl_weight * matrix_kl``.  The
specific-phase loss is ``ce - pred_kl_weight * kl(y'', y') + reg`` where the
KL term is clamped (it enters with a minus sign and would otherwise reward
unbounded divergence) and ``reg`` is a standard squared-Frobenius decay on
all A and B factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import SharedStack
from .errors import ConfigError, NumericInputError, ShapeError

# Cap on the (negatively weighted) prediction KL inside the specific loss.
PRED_KL_CLAMP = 10.0


@dataclass(frozen=True)
class Hyperparameters:
    """Per-client training knobs.

    ``lr_specific`` and ``lr_shared`` are the step sizes of the two phases,
    ``local_epochs`` and ``rounds`` the schedule lengths, ``weight_decay``
    the coefficient on the squared-Frobenius A/B penalty, and the two KL
    weights scale the matrix-level and prediction-level divergence terms.
    """

    lr_specific: float = 0.1
    lr_shared: float = 0.1
    local_epochs: int = 1
    rounds: int = 1
    weight_decay: float = 0.0
    matrix_kl_weight: float = 1.0
    pred_kl_weight: float = 1.0
    batch_size: int = 16
    joint: bool = False
    proximal_mode: bool = False
    proximal_inner_steps: int = 8

    def __post_init__(self):
        if self.lr_specific < 0 or self.lr_shared < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.local_epochs < 1 or self.rounds < 1:
            raise ConfigError("local_epochs and rounds must be >= 1")
        if self.weight_decay < 0 or self.matrix_kl_weight < 0 or self.pred_kl_weight < 0:
            raise ConfigError("loss coefficients must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.proximal_inner_steps < 1:
            raise ConfigError("proximal_inner_steps must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    """A scalar loss plus the components it was combined from."""

    total: float
    ce: float
    kl_term: float
    reg: float


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable log-softmax; accepts a vector or an (n, C) batch."""
    z = np.asarray(logits, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log-probability of ``label`` under softmax(logits)."""
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise NumericInputError("logits must be a vector with at least 2 classes")
    if not np.all(np.isfinite(logits)):
        raise NumericInputError("logits contain non-finite values")
    if not 0 <= label < logits.shape[0]:
        raise NumericInputError(f"label {label} out of range for {logits.shape[0]} classes")
    return float(-log_softmax(logits)[label])


def cross_entropy_grad(logits: np.ndarray, label: int) -> np.ndarray:
    """d ce / d logits = softmax(logits) - onehot(label)."""
    g = softmax(logits)
    g[label] -= 1.0
    return g


def prediction_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """KL(softmax(p) || softmax(q)); zero iff the logits differ by a constant."""
    p_logits = np.asarray(p_logits, dtype=float)
    q_logits = np.asarray(q_logits, dtype=float)
    if p_logits.shape != q_logits.shape:
        raise ShapeError("logit vectors must share length")
    if not (np.all(np.isfinite(p_logits)) and np.all(np.isfinite(q_logits))):
        raise NumericInputError("logits contain non-finite values")
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def prediction_kl_grad_p(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """Gradient of prediction_kl in its first (parameter-side) argument."""
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    sp = np.exp(lp)
    kl = np.sum(sp * (lp - lq))
    return sp * ((lp - lq) - kl)


def matrix_kl(local: SharedStack, reference: SharedStack) -> float:
    """Mean over layers of KL between softmax-flattened matrix entries."""
    if local.layers.shape != reference.layers.shape:
        raise ShapeError(
            f"stack shapes differ: {local.layers.shape} vs {reference.layers.shape}")
    depth = local.depth
    flat_p = local.layers.reshape(depth, -1)
    flat_q = reference.layers.reshape(depth, -1)
    lp, lq = log_softmax(flat_p), log_softmax(flat_q)
    return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1)))


def matrix_kl_grads(local: SharedStack, reference: SharedStack):
    """Gradients of matrix_kl in both stacks, each shaped like the input stack."""
    if local.layers.shape != reference.layers.shape:
        raise ShapeError("stack shapes differ")
    depth = local.depth
    shape = local.layers.shape
    lp = log_softmax(local.layers.reshape(depth, -1))
    lq = log_softmax(reference.layers.reshape(depth, -1))
    sp, sq = np.exp(lp), np.exp(lq)
    kl = np.sum(sp * (lp - lq), axis=1, keepdims=True)
    g_local = sp * ((lp - lq) - kl) / depth
    g_ref = (sq - sp) / depth
    return g_local.reshape(shape), g_ref.reshape(shape)


def loss_share(logits: np.ndarray, label: int, local_stack: SharedStack,
               ref_stack: SharedStack, hyper: Hyperparameters) -> LossBreakdown:
    """Shared-phase loss: cross-entropy plus the weighted matrix KL pull."""
    ce = cross_entropy(logits, label)
    kl = matrix_kl(local_stack, ref_stack)
    return LossBreakdown(total=ce + hyper.matrix_kl_weight * kl, ce=ce, kl_term=kl, reg=0.0)


def loss_specific(logits: np.ndarray, label: int, phase1_logits: np.ndarray,
                  a_mats, b_mats, hyper: Hyperparameters) -> LossBreakdown:
    """Specific-phase loss; ``phase1_logits`` is a constant (no gradient flows in)."""
    ce = cross_entropy(logits, label)
    kl = min(prediction_kl(logits, phase1_logits), PRED_KL_CLAMP)
    sq = sum(float(np.sum(a * a)) for a in a_mats) + sum(float(np.sum(b * b)) for b in b_mats)
    reg = 0.5 * hyper.weight_decay * sq
    return LossBreakdown(total=ce - hyper.pred_kl_weight * kl + reg,
                         ce=ce, kl_term=kl, reg=reg)


# Batch forms used by the trainer: means over rows, gradients already
# carrying the 1/n factor.

def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows and its gradient d/d logits."""
    n = logits.shape[0]
    lp = log_softmax(logits)
    ce = float(-lp[np.arange(n), labels].mean())
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    return ce, grad / n


def batch_prediction_kl(p_logits: np.ndarray, q_logits: np.ndarray):
    """Mean clamped KL over rows and its gradient in p (zero where clamped)."""
    n = p_logits.shape[0]
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    sp = np.exp(lp)
    kl = np.sum(sp * (lp - lq), axis=1)
    active = kl < PRED_KL_CLAMP
    grad = sp * ((lp - lq) - kl[:, None])
    grad[~active] = 0.0
    return float(np.minimum(kl, PRED_KL_CLAMP).mean()), grad / n
