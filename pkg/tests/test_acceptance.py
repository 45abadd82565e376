"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
complete.  Criteria 7 and 8 execute the bundled three-client scenario; the
rest are property suites over randomized instances.
"""

import copy
import time

import numpy as np
import pytest

from trifed.alignment import RelationMatrix, SharedStack, stack_inner, to_global, to_local
from trifed.client_trainer import check_gradients, proximal_share_step
from trifed.errors import FormatError
from trifed.federation import (
    Federation,
    aggregate,
    deserialize_stack,
    serialize_stack,
)
from trifed.objectives import cross_entropy, matrix_kl
from trifed.scenarios import apply_arm, bundled_scenario, config_from_doc
from trifed.taskgen import ArchSpec, build_toy_model

from conftest import random_client_state, random_stack

SEEDS = (1, 2, 3, 4, 5)


def report(number, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}", flush=True)
    assert ok, f"criterion {number}: {detail}"


def test_criterion_1_gradient_fidelity():
    started = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        state, batch = random_client_state(1000 + seed)
        worst = max(worst, check_gradients(state, batch, fd_step=1e-6))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-5 and elapsed < 30.0
    report(1, ok, f"worst relative gradient error {worst:.3e} over 100 instances "
                  f"in {elapsed:.1f}s (bounds: 1e-5, 30s)")


def _ab_bytes(state):
    return tuple(l.A.tobytes() for l in state.model.layers) + tuple(
        l.B.tobytes() for l in state.model.layers)


def _shared_bytes(state):
    return (tuple(l.R.tobytes() for l in state.model.layers)
            + tuple(l.mask.tobytes() for l in state.model.layers)
            + (state.relation.omega.tobytes(),))


class PhaseByteGuard:
    def __init__(self):
        self.stash = {}
        self.share_checks = 0
        self.specific_checks = 0

    def __call__(self, event, state):
        key = id(state)
        if event == "pre_share":
            self.stash[key] = _ab_bytes(state)
        elif event == "post_share":
            assert _ab_bytes(state) == self.stash[key], "phase 1 touched A or B"
            self.share_checks += 1
        elif event == "pre_specific":
            self.stash[key] = _shared_bytes(state)
        elif event == "post_specific":
            assert _shared_bytes(state) == self.stash[key], \
                "phase 2 touched R, mask, or the relation matrix"
            self.specific_checks += 1


def test_criterion_2_phase_isolation_and_mask_permanence():
    doc = bundled_scenario()
    for entry in doc["clients"]:
        entry["task"]["n_train"] = 96
        entry["task"]["n_test"] = 64
    config = config_from_doc(doc, rounds=10, seed=2)
    fed = Federation(config)
    frozen = []
    for state in fed.clients:
        for layer in state.model.layers:
            zeros = np.where(layer.mask == 0.0)
            frozen.append((layer, zeros, layer.R[zeros].tobytes()))
    guard = PhaseByteGuard()
    fed.run(observer=guard)
    permanent = all(layer.R[zeros].tobytes() == blob
                    for layer, zeros, blob in frozen)
    ok = permanent and guard.share_checks > 0 and guard.specific_checks > 0
    report(2, ok, f"T=10, K=3 run: {guard.share_checks} phase-1 and "
                  f"{guard.specific_checks} phase-2 byte checks, "
                  f"mask-zero R entries bit-identical end to end")


def test_criterion_3_lora_degeneration():
    rng = np.random.default_rng(3)
    worst = 0.0
    exact = True
    for trial in range(20):
        depth = int(rng.integers(1, 4))
        dims, a = [], int(rng.integers(4, 9))
        for _ in range(depth):
            b = int(rng.integers(4, 9))
            dims.append((a, b))
            a = b
        arch = ArchSpec(layer_dims=tuple(dims), activation="tanh",
                        num_classes=dims[-1][1])
        model = build_toy_model(arch, r_g=3, beta=0.0, seed=trial)
        for layer in model.layers:
            layer.A[:] = rng.normal(size=layer.A.shape)
            layer.B[:] = rng.normal(size=layer.B.shape)
        exact &= all(np.array_equal(
            (layer.A @ (np.eye(layer.rank) + layer.mask * layer.R)) @ layer.B,
            layer.A @ layer.B) for layer in model.layers)
        x = rng.normal(size=(5, dims[0][0]))
        h = x
        for i, layer in enumerate(model.layers):  # plain-LoRA reference path
            h = h @ layer.base_weight + (h @ layer.A) @ layer.B
            if i != depth - 1:
                h = np.tanh(h)
        got = model.forward(x)
        worst = max(worst, float(np.max(np.abs(got - h))
                                 / max(1.0, np.max(np.abs(h)))))
    ok = exact and worst <= 1e-12
    report(3, ok, f"beta=0: delta == A B exactly on all layers; forward vs "
                  f"plain-LoRA reference relative error {worst:.2e} (bound 1e-12)")


def test_criterion_4_alignment_oracle():
    rng = np.random.default_rng(4)
    worst_map = 0.0
    worst_adjoint = 0.0
    for _ in range(1000):
        depth_k = int(rng.integers(1, 7))
        depth_g = int(rng.integers(depth_k, 7))
        rank = int(rng.integers(1, 7))
        omega = rng.normal(size=(depth_k, depth_g))
        stack = rng.normal(size=(depth_k, rank, rank))
        gstack = rng.normal(size=(depth_g, rank, rank))
        up = to_global(SharedStack(stack), RelationMatrix(omega)).layers
        down = to_local(SharedStack(gstack), RelationMatrix(omega)).layers
        up_ref = np.zeros_like(up)
        for m in range(depth_g):
            for l in range(depth_k):
                up_ref[m] += omega[l, m] * stack[l]
        down_ref = np.zeros_like(down)
        for l in range(depth_k):
            for m in range(depth_g):
                down_ref[l] += omega[l, m] * gstack[m]
        scale = max(1.0, np.max(np.abs(up_ref)), np.max(np.abs(down_ref)))
        worst_map = max(worst_map,
                        float(np.max(np.abs(up - up_ref))) / scale,
                        float(np.max(np.abs(down - down_ref))) / scale)
        lhs = stack_inner(SharedStack(up), SharedStack(gstack))
        rhs = stack_inner(SharedStack(stack), SharedStack(down))
        worst_adjoint = max(worst_adjoint,
                            abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)))
    ok = worst_map <= 1e-12 and worst_adjoint <= 1e-10
    report(4, ok, f"1000 instances: contraction error {worst_map:.2e} "
                  f"(bound 1e-12), adjointness error {worst_adjoint:.2e} (bound 1e-10)")


def test_criterion_5_aggregation_oracle():
    rng = np.random.default_rng(5)
    all_exact = True
    for _ in range(1000):
        count = int(rng.integers(1, 7))
        depth = int(rng.integers(1, 5))
        rank = int(rng.integers(1, 4))
        uploads = [SharedStack(rng.normal(size=(depth, rank, rank)))
                   for _ in range(count)]
        got = aggregate(uploads).layers
        ref = np.zeros((depth, rank, rank))
        for l in range(depth):
            for i in range(rank):
                for j in range(rank):
                    acc = 0.0
                    for stack in uploads:  # ascending client order
                        acc += stack.layers[l, i, j]
                    ref[l, i, j] = acc / count
        all_exact &= np.array_equal(got, ref)
    report(5, all_exact, "1000 upload sets: server mean equals same-order "
                         "entrywise mean exactly")


def test_criterion_6_serialization():
    rng = np.random.default_rng(6)
    all_exact = True
    for _ in range(1000):
        stack = random_stack(rng)
        back = deserialize_stack(serialize_stack(stack))
        all_exact &= back.layers.tobytes() == stack.layers.tobytes()
    blob = serialize_stack(random_stack(rng, depth=2, rank=2))
    corrupt = [
        (b"", 0),
        (blob[:3], 3),
        (b"ZZZZ" + blob[4:], 0),
        (blob[:4] + bytes([blob[4] ^ 0xFF]) + blob[5:], 4),
        (blob[:9], 9),
        (blob[:5] + b"\x00\x00\x00\x00" + blob[9:], 5),
        (blob[:9] + b"\x00\x00\x00\x00" + blob[13:], 9),
        (blob[:-1], len(blob) - 1),
        (blob + b"!", len(blob)),
    ]
    offsets_ok = True
    for data, want in corrupt:
        try:
            deserialize_stack(data)
            offsets_ok = False
        except FormatError as err:
            offsets_ok &= err.offset == want
    ok = all_exact and offsets_ok
    report(6, ok, "1000 round-trips bit-exact; all corrupted headers rejected "
                  "with correct byte offsets")


def _arm_mean_acc(arm, seed, rounds=20):
    config = config_from_doc(apply_arm(bundled_scenario(), arm),
                             rounds=rounds, seed=seed)
    fed = Federation(config, communicate=(arm != "LOCAL"))
    history = fed.run()
    return float(np.mean([c.eval_acc for c in history[-1].clients]))


def test_criterion_7_desk_scale_arms():
    started = time.perf_counter()
    beats_local = beats_joint = 0
    rows = []
    for seed in SEEDS:
        ours = _arm_mean_acc("H2TUNE", seed)
        local = _arm_mean_acc("LOCAL", seed)
        joint = _arm_mean_acc("NO_DISENTANGLE", seed)
        beats_local += ours > local
        beats_joint += ours > joint
        rows.append(f"seed {seed}: {ours:.4f} vs LOCAL {local:.4f} "
                    f"vs NO_DISENTANGLE {joint:.4f}")
    elapsed = time.perf_counter() - started
    ok = beats_local >= 4 and beats_joint >= 3 and elapsed < 120.0
    report(7, ok, f"beats LOCAL on {beats_local}/5 seeds (need >= 4), "
                  f"NO_DISENTANGLE on {beats_joint}/5 (need >= 3), "
                  f"{elapsed:.0f}s (< 120s); " + "; ".join(rows))


def test_criterion_8_convergence_trend():
    config = config_from_doc(apply_arm(bundled_scenario(), "H2TUNE"),
                             rounds=40, seed=1)
    history = Federation(config).run()
    gg = np.array([r.gg_sq_mean for r in history])
    early = float(gg[0:10].mean())
    late = float(gg[30:40].mean())
    ok = late <= 0.5 * early
    report(8, ok, f"mean squared generalized gradient: rounds 31-40 {late:.4f} "
                  f"vs rounds 1-10 {early:.4f} (ratio {late / early:.3f}, need <= 0.5)")


def _fd_ce_grad_in_r(state, xb, yb, step=1e-6):
    grads = []
    for layer in state.model.layers:
        grad = np.zeros_like(layer.R)
        flat, gf = layer.R.ravel(), grad.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = np.mean([cross_entropy(r, int(l))
                          for r, l in zip(state.model.forward(xb), yb)])
            flat[i] = keep - step
            lo = np.mean([cross_entropy(r, int(l))
                          for r, l in zip(state.model.forward(xb), yb)])
            flat[i] = keep
            gf[i] = (hi - lo) / (2 * step)
        grads.append(grad * layer.mask)
    return np.stack(grads)


def test_criterion_9_proximal_mode():
    rng = np.random.default_rng(9)
    decreases = closed_form_ok = 0
    closed_form_cases = 0
    for trial in range(100):
        lam = 0.0 if trial % 2 == 0 else float(rng.uniform(0.2, 2.0))
        state, batch = random_client_state(5000 + trial, lam=lam)
        xb, yb = batch
        r_ref = random_stack(rng, depth=state.relation.global_depth,
                             rank=state.model.rank)
        r_prev = state.model.shared_stack()
        g = _fd_ce_grad_in_r(copy.deepcopy(state), xb, yb)
        lr = state.hyper.lr_shared
        ref_local = to_local(r_ref, state.relation)

        def objective(stack):
            val = float(np.sum(g * stack))
            if lam:
                val += lam * matrix_kl(SharedStack(stack), ref_local)
            return val + float(np.sum((stack - r_prev) ** 2)) / lr

        proximal_share_step(state, r_ref, batch, inner_steps=6)
        r_new = state.model.shared_stack()
        decreases += objective(r_new) <= objective(r_prev) + 1e-9
        if lam == 0.0:
            closed_form_cases += 1
            want = r_prev - (lr / 2.0) * g
            closed_form_ok += float(np.max(np.abs(r_new - want))) <= 1e-8
    ok = decreases == 100 and closed_form_ok == closed_form_cases
    report(9, ok, f"proximal objective non-increasing on {decreases}/100 "
                  f"instances; closed form matched on "
                  f"{closed_form_ok}/{closed_form_cases} unregularized cases (1e-8)")
