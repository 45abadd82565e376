"""Triple low-rank decomposition of a fine-tuned layer.

Each adapted layer keeps a frozen dense base weight plus three trainable
factors: task-specific ``A`` and ``B`` and a task-shared square matrix ``R``
gated by a fixed binary mask.  The effective weight update is
``A @ (I + mask * R) @ B``, so ``B == 0`` leaves the base model untouched
and an all-zero mask degenerates to plain LoRA.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericInputError


def round_half_up(x: float) -> int:
    """round() with deterministic half-up ties (no banker's rounding)."""
    return int(math.floor(x + 0.5))


def mask_budget(sparsity_ratio: float, rank: int) -> int:
    """Number of active mask entries for a given sparsity ratio."""
    return round_half_up(sparsity_ratio * rank * rank)


@dataclass(frozen=True)
class ResourceDescriptor:
    """A client's resource budget: mask density and its declared native rank."""

    sparsity_ratio: float
    declared_rank: int

    def __post_init__(self):
        if not 0.0 <= self.sparsity_ratio <= 1.0:
            raise ConfigError(f"sparsity_ratio must be in [0, 1], got {self.sparsity_ratio}")
        if self.declared_rank < 1:
            raise ConfigError(f"declared_rank must be >= 1, got {self.declared_rank}")


@dataclass
class TriLoraLayer:
    """One adapted layer: frozen base plus the A / R / mask / B factors.

    Shapes: base_weight (a, b), A (a, r), B (r, b), R and mask (r, r).
    The mask is sampled once and never trained; entries of R at mask-zero
    positions must stay untouched by every training step.
    """

    base_weight: np.ndarray
    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    mask: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.base_weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.base_weight.shape[1]

    @property
    def rank(self) -> int:
        return self.R.shape[0]

    def __post_init__(self):
        a, b = self.base_weight.shape
        r = self.A.shape[1]
        if not (0 < r <= min(a, b)):
            raise ConfigError(f"rank {r} must satisfy 0 < r <= min({a}, {b})")
        if self.A.shape != (a, r) or self.B.shape != (r, b):
            raise ConfigError("A/B shapes do not chain with the base weight")
        if self.R.shape != (r, r) or self.mask.shape != (r, r):
            raise ConfigError("R and mask must be rank x rank")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ConfigError("mask entries must be exactly 0 or 1")


def init_trilora(a: int, b: int, r_g: int, beta: float, seed: int,
                 base_weight: np.ndarray | None = None) -> TriLoraLayer:
    """Build a fresh layer: A ~ N(0, 1/r_g), B = R = 0, seeded random mask.

    B starting at zero makes the initial weight update exactly zero, and the
    mask keeps round(beta * r_g^2) active positions drawn without replacement.
    Deterministic in all arguments.
    """
    if not (0 < r_g <= min(a, b)):
        raise ConfigError(f"rank {r_g} must satisfy 0 < r_g <= min({a}, {b})")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"sparsity ratio must be in [0, 1], got {beta}")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0 / math.sqrt(r_g), size=(a, r_g))
    B = np.zeros((r_g, b))
    R = np.zeros((r_g, r_g))
    mask = np.zeros(r_g * r_g)
    ones = mask_budget(beta, r_g)
    if ones:
        mask[rng.choice(r_g * r_g, size=ones, replace=False)] = 1.0
    mask = mask.reshape(r_g, r_g)
    if base_weight is None:
        base_weight = np.zeros((a, b))
    return TriLoraLayer(base_weight=base_weight, A=A, B=B, R=R, mask=mask)


def delta_matrix(layer: TriLoraLayer) -> np.ndarray:
    """Materialize the weight update A @ (I + mask * R) @ B as an (a, b) matrix."""
    middle = np.eye(layer.rank) + layer.mask * layer.R
    return layer.A @ middle @ layer.B


def apply_delta(layer: TriLoraLayer, x: np.ndarray) -> np.ndarray:
    """Apply base + update to a row vector or (n, a) batch without materializing it."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericInputError("input to apply_delta contains non-finite values")
    middle = np.eye(layer.rank) + layer.mask * layer.R
    return x @ layer.base_weight + ((x @ layer.A) @ middle) @ layer.B
