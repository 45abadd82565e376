"""One client's local training round.

Each batch is visited by two phases in a fixed order: the shared phase
updates the task-shared matrices R (through their masks) and the relation
matrix under the shared loss, with A and B untouched; the specific phase
then updates A and B under the specific loss with R, the relation matrix,
and the masks untouched.  All gradients are closed-form; a finite-difference
harness (`check_gradients`) verifies every one of them.

Gradient derivation for a layer z = x (W + A M B) with M = I + mask * R:
with G = dLoss/dz and xA = x A,

    dA = x^T (G B^T M^T),   dB = M^T (xA^T G),   dR = mask * (xA^T (G B^T)),
    dx = G W^T + (G B^T M^T) A^T.

The R gradient of the network loss is masked by construction because R only
enters through mask * R.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import RelationMatrix, SharedStack, to_global, to_local
from .errors import ConfigError, NumericDivergenceError, ShapeError, SolverError
from .objectives import (
    Hyperparameters,
    LossBreakdown,
    batch_cross_entropy,
    batch_prediction_kl,
    matrix_kl,
    matrix_kl_grads,
)
from .taskgen import ClientModel, Dataset, derive_seed
from .trilora import ResourceDescriptor


@dataclass
class ClientState:
    """Everything one client owns: model, alignment map, data, knobs."""

    client_id: int
    model: ClientModel
    relation: RelationMatrix
    resource: ResourceDescriptor
    hyper: Hyperparameters
    data: Dataset
    data_seed: int = 0
    round_index: int = 0

    def __post_init__(self):
        if self.model.depth != self.relation.local_depth:
            raise ConfigError(
                f"model depth {self.model.depth} != relation rows {self.relation.local_depth}")
        ranks = {layer.rank for layer in self.model.layers}
        if len(ranks) != 1:
            raise ConfigError(f"layers must share one rank, got {sorted(ranks)}")


@dataclass(frozen=True)
class PhaseReport:
    """What one phase did: its loss and the parameter movement per group."""

    phase: str
    loss: LossBreakdown
    n_samples: int
    delta_shared: float = 0.0
    delta_relation: float = 0.0
    delta_a: float = 0.0
    delta_b: float = 0.0


@dataclass(frozen=True)
class RoundStats:
    """Per-client aggregates over one local round."""

    share_loss: float
    specific_loss: float
    gg_sq_mean: float
    n_steps: int


def generalized_gradient(r_before: SharedStack, r_after: SharedStack,
                         lr_shared: float) -> float:
    """Displacement-based convergence surrogate |before - after|_F / lr.

    Measured across epoch boundaries of the shared phase, this is the
    quantity whose squared average the protocol drives toward zero.
    """
    if r_before.layers.shape != r_after.layers.shape:
        raise ShapeError("stacks must share shape")
    if lr_shared <= 0.0:
        raise ConfigError("lr_shared must be positive")
    return float(np.linalg.norm((r_before.layers - r_after.layers).ravel())) / lr_shared


def _forward_trace(model: ClientModel, x: np.ndarray):
    """Forward pass caching per layer (input, preactivation, xA, xAM)."""
    h = np.asarray(x, dtype=float)
    caches = []
    last = model.depth - 1
    z = h
    for i, layer in enumerate(model.layers):
        middle = np.eye(layer.rank) + layer.mask * layer.R
        xa = h @ layer.A
        xam = xa @ middle
        z = h @ layer.base_weight + xam @ layer.B
        caches.append((h, z, xa, middle))
        if i != last:
            h = np.tanh(z) if model.activation == "tanh" else z
    return z, caches


def _backward(model: ClientModel, caches, grad_logits: np.ndarray):
    """Per-layer gradients (dA, dB, dR) from the logit gradient."""
    depth = model.depth
    d_a = [None] * depth
    d_b = [None] * depth
    d_r = [None] * depth
    gz = grad_logits
    for i in range(depth - 1, -1, -1):
        layer = model.layers[i]
        h, _, xa, middle = caches[i]
        gb = gz @ layer.B.T                    # (n, r)
        gbm = gb @ middle.T                    # (n, r)
        d_a[i] = h.T @ gbm
        d_b[i] = middle.T @ (xa.T @ gz)
        d_r[i] = layer.mask * (xa.T @ gb)
        if i > 0:
            dh = gz @ layer.base_weight.T + gbm @ layer.A.T
            _, z_prev, _, _ = caches[i - 1]
            if model.activation == "tanh":
                gz = dh * (1.0 - np.tanh(z_prev) ** 2)
            else:
                gz = dh
    return d_a, d_b, d_r


def _require_finite(value, term: str):
    if not np.all(np.isfinite(value)):
        raise NumericDivergenceError(term)


def _share_gradients(state: ClientState, ref_global: SharedStack, xb, yb):
    """Shared loss at the current parameters and its R / relation gradients."""
    hyper = state.hyper
    ref_local = to_local(ref_global, state.relation)
    logits, caches = _forward_trace(state.model, xb)
    ce, gz = batch_cross_entropy(logits, yb)
    _, _, d_r = _backward(state.model, caches, gz)
    local = SharedStack(state.model.shared_stack())
    mkl = matrix_kl(local, ref_local)
    g_local, g_ref = matrix_kl_grads(local, ref_local)
    lam = hyper.matrix_kl_weight
    d_r_total = np.stack(d_r) + lam * g_local
    d_omega = lam * np.einsum("lij,mij->lm", g_ref, ref_global.layers)
    loss = LossBreakdown(total=ce + lam * mkl, ce=ce, kl_term=mkl, reg=0.0)
    return loss, d_r_total, d_omega


def phase_share_step(state: ClientState, r_ref: SharedStack, batch):
    """Shared phase: one masked gradient step on R and one on the relation matrix.

    Returns the report and the post-update logits on the same batch, which
    the following specific phase treats as its frozen reference predictions.
    """
    xb, yb = batch
    loss, d_r_total, d_omega = _share_gradients(state, r_ref, xb, yb)
    _require_finite(loss.total, "share loss")
    _require_finite(d_r_total, "gradient of share loss in R")
    _require_finite(d_omega, "gradient of share loss in relation matrix")
    lr = state.hyper.lr_shared
    delta_shared = 0.0
    delta_relation = 0.0
    if lr != 0.0:
        sq = 0.0
        for i, layer in enumerate(state.model.layers):
            step = lr * (layer.mask * d_r_total[i])
            # masked positions are never written, not even with a zero update
            np.subtract(layer.R, step, out=layer.R, where=layer.mask.astype(bool))
            sq += float(np.sum(step * step))
        delta_shared = float(np.sqrt(sq))
        omega_step = lr * d_omega
        state.relation.omega -= omega_step
        delta_relation = float(np.linalg.norm(omega_step))
    y_prime = state.model.forward(xb)
    report = PhaseReport(phase="share", loss=loss, n_samples=len(yb),
                         delta_shared=delta_shared, delta_relation=delta_relation)
    return report, y_prime


def phase_specific_step(state: ClientState, y_prime: np.ndarray, batch) -> PhaseReport:
    """Specific phase: one gradient step on every A and B; R and the relation
    matrix are bit-identical before and after."""
    xb, yb = batch
    hyper = state.hyper
    logits, caches = _forward_trace(state.model, xb)
    ce, g_ce = batch_cross_entropy(logits, yb)
    klm, g_kl = batch_prediction_kl(logits, y_prime)
    gz = g_ce - hyper.pred_kl_weight * g_kl
    d_a, d_b, _ = _backward(state.model, caches, gz)
    v = hyper.weight_decay
    sq_norm = sum(float(np.sum(l.A * l.A) + np.sum(l.B * l.B)) for l in state.model.layers)
    reg = 0.5 * v * sq_norm
    loss = LossBreakdown(total=ce - hyper.pred_kl_weight * klm + reg,
                         ce=ce, kl_term=klm, reg=reg)
    _require_finite(loss.total, "specific loss")
    lr = hyper.lr_specific
    delta_a = delta_b = 0.0
    if lr != 0.0:
        sq_a = sq_b = 0.0
        for i, layer in enumerate(state.model.layers):
            ga = d_a[i] + v * layer.A
            gb = d_b[i] + v * layer.B
            _require_finite(ga, "gradient of specific loss in A")
            _require_finite(gb, "gradient of specific loss in B")
            layer.A -= lr * ga
            layer.B -= lr * gb
            sq_a += float(np.sum(ga * ga))
            sq_b += float(np.sum(gb * gb))
        delta_a = lr * float(np.sqrt(sq_a))
        delta_b = lr * float(np.sqrt(sq_b))
    return PhaseReport(phase="specific", loss=loss, n_samples=len(yb),
                       delta_a=delta_a, delta_b=delta_b)


def phase_joint_step(state: ClientState, r_ref: SharedStack, batch) -> PhaseReport:
    """Ablation step: update A, B, R, and the relation matrix together on the
    shared objective plus weight decay, with no phase alternation."""
    xb, yb = batch
    hyper = state.hyper
    ref_local = to_local(r_ref, state.relation)
    logits, caches = _forward_trace(state.model, xb)
    ce, gz = batch_cross_entropy(logits, yb)
    d_a, d_b, d_r = _backward(state.model, caches, gz)
    local = SharedStack(state.model.shared_stack())
    mkl = matrix_kl(local, ref_local)
    g_local, g_ref = matrix_kl_grads(local, ref_local)
    lam = hyper.matrix_kl_weight
    d_r_total = np.stack(d_r) + lam * g_local
    d_omega = lam * np.einsum("lij,mij->lm", g_ref, r_ref.layers)
    v = hyper.weight_decay
    sq_norm = sum(float(np.sum(l.A * l.A) + np.sum(l.B * l.B)) for l in state.model.layers)
    loss = LossBreakdown(total=ce + lam * mkl + 0.5 * v * sq_norm,
                         ce=ce, kl_term=mkl, reg=0.5 * v * sq_norm)
    _require_finite(loss.total, "joint loss")
    delta_shared = delta_relation = 0.0
    if hyper.lr_shared != 0.0:
        sq = 0.0
        for i, layer in enumerate(state.model.layers):
            step = hyper.lr_shared * (layer.mask * d_r_total[i])
            np.subtract(layer.R, step, out=layer.R, where=layer.mask.astype(bool))
            sq += float(np.sum(step * step))
        delta_shared = float(np.sqrt(sq))
        state.relation.omega -= hyper.lr_shared * d_omega
        delta_relation = hyper.lr_shared * float(np.linalg.norm(d_omega))
    delta_a = delta_b = 0.0
    if hyper.lr_specific != 0.0:
        for i, layer in enumerate(state.model.layers):
            ga = d_a[i] + v * layer.A
            gb = d_b[i] + v * layer.B
            layer.A -= hyper.lr_specific * ga
            layer.B -= hyper.lr_specific * gb
            delta_a += hyper.lr_specific ** 2 * float(np.sum(ga * ga))
            delta_b += hyper.lr_specific ** 2 * float(np.sum(gb * gb))
    return PhaseReport(phase="joint", loss=loss, n_samples=len(yb),
                       delta_shared=delta_shared, delta_relation=delta_relation,
                       delta_a=float(np.sqrt(delta_a)), delta_b=float(np.sqrt(delta_b)))


def proximal_share_step(state: ClientState, r_ref: SharedStack, batch,
                        inner_steps: int):
    """Approximate proximal step on R, replacing a plain shared-phase step.

    Minimizes <g, R> + matrix_kl_weight * matrix_kl(R, ref) + (1/lr) |R - R_prev|^2
    by masked gradient descent with backtracking, where g is the network-loss
    gradient at R_prev.  The returned point never has a larger proximal
    objective than R_prev.
    """
    if inner_steps < 1:
        raise ConfigError("inner_steps must be >= 1")
    hyper = state.hyper
    lr = hyper.lr_shared
    if lr <= 0.0:
        raise ConfigError("proximal step needs a positive shared-phase step size")
    xb, yb = batch
    lam = hyper.matrix_kl_weight
    ref_local = to_local(r_ref, state.relation)
    logits, caches = _forward_trace(state.model, xb)
    ce, gz = batch_cross_entropy(logits, yb)
    _, _, d_r = _backward(state.model, caches, gz)
    g = np.stack(d_r)                       # masked by construction
    masks = np.stack([layer.mask for layer in state.model.layers])
    r_prev = state.model.shared_stack()
    entry_kl = matrix_kl(SharedStack(r_prev), ref_local)
    loss = LossBreakdown(total=ce + lam * entry_kl, ce=ce, kl_term=entry_kl, reg=0.0)
    _require_finite(loss.total, "share loss")
    _require_finite(g, "gradient of share loss in R")

    def objective(r_stack):
        val = float(np.sum(g * r_stack))
        if lam != 0.0:
            val += lam * matrix_kl(SharedStack(r_stack), ref_local)
        val += float(np.sum((r_stack - r_prev) ** 2)) / lr
        return val

    r_cur = r_prev.copy()
    f_cur = objective(r_cur)
    f_start = f_cur
    for _ in range(inner_steps):
        grad = g + (2.0 / lr) * (r_cur - r_prev)
        if lam != 0.0:
            g_local, _ = matrix_kl_grads(SharedStack(r_cur), ref_local)
            grad = grad + lam * g_local
        grad = masks * grad
        step, moved = lr / 2.0, False
        for _ in range(40):
            cand = r_cur - step * grad
            f_cand = objective(cand)
            if f_cand < f_cur:
                r_cur, f_cur, moved = cand, f_cand, True
                break
            step /= 2.0
        if not moved:
            break
    if f_cur > f_start:
        raise SolverError("proximal objective increased during the inner solve")
    for i, layer in enumerate(state.model.layers):
        np.copyto(layer.R, r_cur[i], where=layer.mask.astype(bool))
    delta_shared = float(np.linalg.norm((r_cur - r_prev).ravel()))
    y_prime = state.model.forward(xb)
    report = PhaseReport(phase="share", loss=loss, n_samples=len(yb),
                         delta_shared=delta_shared)
    return report, y_prime


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_round(state: ClientState, r_global: SharedStack, tau: int,
                observer=None):
    """Run tau local epochs of share-then-specific steps over the train set.

    Returns the mutated state, the depth-aligned upload of its R stack, and
    the round's aggregate statistics: mean losses plus the mean squared
    generalized gradient, measured per epoch as the shared-stack displacement
    over that epoch divided by the shared-phase step size.
    """
    if tau < 1:
        raise ConfigError("tau must be >= 1")
    hyper = state.hyper
    xb_all, yb_all = state.data.x_train, state.data.y_train
    n = len(yb_all)
    n_batches = -(-n // hyper.batch_size)
    total_steps = tau * n_batches
    share_losses, specific_losses, gg_sq = [], [], []
    step = 0
    for epoch in range(tau):
        rng = np.random.default_rng(
            derive_seed(state.data_seed, state.round_index, epoch))
        epoch_start = SharedStack(state.model.shared_stack())
        for idx in _batches(n, hyper.batch_size, rng):
            batch = (xb_all[idx], yb_all[idx])
            notify = observer if observer is not None else _no_observer
            notify("pre_share", state)
            if hyper.joint:
                report = phase_joint_step(state, r_global, batch)
                notify("post_share", state)
                share_losses.append(report.loss.total)
                specific_losses.append(report.loss.total)
            else:
                if hyper.proximal_mode and step == total_steps - 1:
                    rep1, y_prime = proximal_share_step(
                        state, r_global, batch, hyper.proximal_inner_steps)
                else:
                    rep1, y_prime = phase_share_step(state, r_global, batch)
                notify("post_share", state)
                share_losses.append(rep1.loss.total)
                notify("pre_specific", state)
                rep2 = phase_specific_step(state, y_prime, batch)
                notify("post_specific", state)
                specific_losses.append(rep2.loss.total)
            step += 1
        if hyper.lr_shared > 0.0:
            epoch_end = SharedStack(state.model.shared_stack())
            gg_sq.append(generalized_gradient(epoch_start, epoch_end,
                                              hyper.lr_shared) ** 2)
        else:
            gg_sq.append(0.0)
    state.round_index += 1
    upload = to_global(SharedStack(state.model.shared_stack()), state.relation)
    stats = RoundStats(share_loss=float(np.mean(share_losses)),
                       specific_loss=float(np.mean(specific_losses)),
                       gg_sq_mean=float(np.mean(gg_sq)) if gg_sq else 0.0,
                       n_steps=step)
    return state, upload, stats


def _no_observer(event, state):
    pass


def _specific_loss_value(state: ClientState, xb, yb, y_prime) -> float:
    hyper = state.hyper
    logits, _ = _forward_trace(state.model, xb)
    ce, _ = batch_cross_entropy(logits, yb)
    klm, _ = batch_prediction_kl(logits, y_prime)
    sq = sum(float(np.sum(l.A * l.A) + np.sum(l.B * l.B)) for l in state.model.layers)
    return ce - hyper.pred_kl_weight * klm + 0.5 * hyper.weight_decay * sq


def _share_loss_value(state: ClientState, r_ref: SharedStack, xb, yb) -> float:
    hyper = state.hyper
    ref_local = to_local(r_ref, state.relation)
    logits, _ = _forward_trace(state.model, xb)
    ce, _ = batch_cross_entropy(logits, yb)
    local = SharedStack(state.model.shared_stack())
    return ce + hyper.matrix_kl_weight * matrix_kl(local, ref_local)


def _fd_gradient(param: np.ndarray, value_fn, step: float) -> np.ndarray:
    grad = np.zeros_like(param)
    flat_p = param.ravel()
    flat_g = grad.ravel()
    for i in range(flat_p.size):
        keep = flat_p[i]
        flat_p[i] = keep + step
        hi = value_fn()
        flat_p[i] = keep - step
        lo = value_fn()
        flat_p[i] = keep
        flat_g[i] = (hi - lo) / (2.0 * step)
    return grad


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(analytic.ravel())),
                float(np.linalg.norm(numeric.ravel())), 1e-12)
    return float(np.linalg.norm((analytic - numeric).ravel())) / denom


def check_gradients(state: ClientState, batch, r_ref: SharedStack | None = None,
                    y_prime: np.ndarray | None = None, fd_step: float = 1e-6) -> float:
    """Worst relative error of every analytic gradient vs central differences.

    Covers the shared loss in R and the relation matrix and the specific
    loss in A and B, each compared group-wise in the Frobenius norm.
    """
    xb, yb = batch
    if r_ref is None:
        rng = np.random.default_rng(derive_seed(state.data_seed, 0xC4EC))
        depth = state.relation.global_depth
        r_ref = SharedStack(rng.normal(0.0, 0.5, size=(depth, state.model.rank,
                                                       state.model.rank)))
    if y_prime is None:
        rng = np.random.default_rng(derive_seed(state.data_seed, 0xF00D))
        y_prime = state.model.forward(xb) + 0.05 * rng.normal(
            size=(len(yb), state.model.num_classes))

    worst = 0.0
    _, d_r_total, d_omega = _share_gradients(state, r_ref, xb, yb)
    share_fn = lambda: _share_loss_value(state, r_ref, xb, yb)
    for i, layer in enumerate(state.model.layers):
        fd = _fd_gradient(layer.R, share_fn, fd_step)
        worst = max(worst, _relative_error(d_r_total[i], fd))
    fd = _fd_gradient(state.relation.omega, share_fn, fd_step)
    worst = max(worst, _relative_error(d_omega, fd))

    logits, caches = _forward_trace(state.model, xb)
    _, g_ce = batch_cross_entropy(logits, yb)
    _, g_kl = batch_prediction_kl(logits, y_prime)
    d_a, d_b, _ = _backward(state.model, caches,
                            g_ce - state.hyper.pred_kl_weight * g_kl)
    spec_fn = lambda: _specific_loss_value(state, xb, yb, y_prime)
    v = state.hyper.weight_decay
    for i, layer in enumerate(state.model.layers):
        fd = _fd_gradient(layer.A, spec_fn, fd_step)
        worst = max(worst, _relative_error(d_a[i] + v * layer.A, fd))
        fd = _fd_gradient(layer.B, spec_fn, fd_step)
        worst = max(worst, _relative_error(d_b[i] + v * layer.B, fd))
    return worst
