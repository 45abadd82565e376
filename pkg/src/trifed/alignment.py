"""Depth alignment between a client's shared-matrix stack and the global one.

A stack of L square rank-r matrices is mapped to the global depth L_g by a
trainable relation matrix (L_k x L_g): global slot m receives the
combination sum_l omega[l, m] * stack[l], and the transpose contraction maps
back.  Both maps are linear and mutually adjoint under the elementwise inner
product, which is what the relation matrix gradient relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .trilora import round_half_up


@dataclass
class SharedStack:
    """Ordered stack of L square matrices sharing one rank, stored (L, r, r)."""

    layers: np.ndarray

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=float)
        if self.layers.ndim != 3 or self.layers.shape[1] != self.layers.shape[2]:
            raise ShapeError(f"stack must be (L, r, r), got {self.layers.shape}")
        if self.layers.shape[0] < 1:
            raise ShapeError("stack depth must be >= 1")

    @property
    def depth(self) -> int:
        return self.layers.shape[0]

    @property
    def rank(self) -> int:
        return self.layers.shape[1]

    @classmethod
    def zeros(cls, depth: int, rank: int) -> "SharedStack":
        return cls(np.zeros((depth, rank, rank)))

    def copy(self) -> "SharedStack":
        return SharedStack(self.layers.copy())


@dataclass
class RelationMatrix:
    """Trainable (L_k, L_g) map from a client's depth to the global depth."""

    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if self.omega.ndim != 2:
            raise ShapeError(f"relation matrix must be 2-D, got {self.omega.shape}")
        if not np.all(np.isfinite(self.omega)):
            raise ShapeError("relation matrix entries must be finite")

    @property
    def local_depth(self) -> int:
        return self.omega.shape[0]

    @property
    def global_depth(self) -> int:
        return self.omega.shape[1]


def to_global(stack: SharedStack, relation: RelationMatrix) -> SharedStack:
    """Map a local stack up to global depth: out[m] = sum_l omega[l, m] stack[l]."""
    if stack.depth != relation.local_depth:
        raise ShapeError(
            f"stack depth {stack.depth} != relation rows {relation.local_depth}")
    return SharedStack(np.einsum("lm,lij->mij", relation.omega, stack.layers))


def to_local(global_stack: SharedStack, relation: RelationMatrix) -> SharedStack:
    """Map a global stack down: out[l] = sum_m omega[l, m] global_stack[m]."""
    if global_stack.depth != relation.global_depth:
        raise ShapeError(
            f"global depth {global_stack.depth} != relation cols {relation.global_depth}")
    return SharedStack(np.einsum("lm,mij->lij", relation.omega, global_stack.layers))


def init_relation(local_depth: int, global_depth: int) -> RelationMatrix:
    """One-hot interpolation init: local layer l claims an evenly spaced global slot.

    Round 0 then behaves like depth-matched averaging instead of scrambling
    layer correspondence the way a random init would.
    """
    if not 1 <= local_depth <= global_depth:
        raise ConfigError(
            f"need 1 <= local depth <= global depth, got {local_depth} > {global_depth}")
    omega = np.zeros((local_depth, global_depth))
    span = max(local_depth - 1, 1)
    for l in range(local_depth):
        omega[l, round_half_up(l * (global_depth - 1) / span)] = 1.0
    return RelationMatrix(omega)


def stack_inner(first: SharedStack, second: SharedStack) -> float:
    """Elementwise inner product over two stacks of identical shape."""
    if first.layers.shape != second.layers.shape:
        raise ShapeError("stacks must share shape for the inner product")
    return float(np.sum(first.layers * second.layers))
