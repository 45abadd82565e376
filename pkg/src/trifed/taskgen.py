"""Heterogeneous toy models and synthetic multi-task data.

Models are small dense chains of adapted layers with tanh or identity
activations, differing across clients in depth and width.  Tasks are linear
teachers mixing a shared component (same seed across clients) with a private
one, so the amount of transferable structure is an explicit knob.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConfigError
from .trilora import apply_delta, init_trilora

# Fraction of labels resampled to another class, so a client cannot be
# trivially perfect on its own task.
LABEL_FLIP_RATE = 0.05


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ArchSpec:
    """Layer dimensions of one client model; consecutive dims must chain."""

    layer_dims: tuple
    activation: Literal["tanh", "identity"]
    num_classes: int

    def __post_init__(self):
        dims = tuple(tuple(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 1:
            raise ConfigError("need at least one layer")
        if self.activation not in ("tanh", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        for (a, b), (a2, _) in zip(dims, dims[1:]):
            if b != a2:
                raise ConfigError(f"layer dims do not chain: out {b} feeds in {a2}")
        if dims[-1][1] != self.num_classes:
            raise ConfigError("final layer width must equal num_classes")

    @property
    def depth(self) -> int:
        return len(self.layer_dims)

    @property
    def min_dim(self) -> int:
        return min(min(a, b) for a, b in self.layer_dims)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Linear-teacher task: labels from a shared/private mixture of weights."""

    input_dim: int
    num_classes: int
    n_train: int
    n_test: int
    shared_seed: int
    private_seed: int
    shared_weight: float

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        if not 0.0 <= self.shared_weight <= 1.0:
            raise ConfigError("shared_weight must be in [0, 1]")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigError("need input_dim >= 1 and num_classes >= 2")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


@dataclass
class ClientModel:
    """A chain of adapted layers with an activation between them."""

    layers: list
    activation: str
    num_classes: int

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def rank(self) -> int:
        return self.layers[0].rank

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a single input or an (n, d) batch."""
        h = np.asarray(x, dtype=float)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = apply_delta(layer, h)
            if i != last and self.activation == "tanh":
                h = np.tanh(h)
        return h

    def shared_stack(self) -> np.ndarray:
        """View of the R matrices as an (L, r, r) array (copies)."""
        return np.stack([layer.R for layer in self.layers])


def teacher_matrix(spec: SyntheticTaskSpec) -> np.ndarray:
    """(C, d) labeling weights: shared_weight * shared + (1 - shared_weight) * private."""
    shared = np.random.default_rng(spec.shared_seed).normal(
        size=(spec.num_classes, spec.input_dim))
    private = np.random.default_rng(spec.private_seed).normal(
        size=(spec.num_classes, spec.input_dim))
    return spec.shared_weight * shared + (1.0 - spec.shared_weight) * private


def gen_task(spec: SyntheticTaskSpec) -> Dataset:
    """Sample a task: standard-normal inputs, argmax teacher labels, 5% flips."""
    teacher = teacher_matrix(spec)
    rng = np.random.default_rng(derive_seed(spec.private_seed, spec.shared_seed, 0x7A5C))
    n = spec.n_train + spec.n_test
    x = rng.normal(size=(n, spec.input_dim))
    y = np.argmax(x @ teacher.T, axis=1)
    flip = rng.random(n) < LABEL_FLIP_RATE
    # resample flipped labels uniformly from the other classes
    offsets = rng.integers(1, spec.num_classes, size=n)
    y = np.where(flip, (y + offsets) % spec.num_classes, y)
    return Dataset(x_train=x[:spec.n_train], y_train=y[:spec.n_train],
                   x_test=x[spec.n_train:], y_test=y[spec.n_train:])


def build_toy_model(spec: ArchSpec, r_g: int, beta: float, seed: int) -> ClientModel:
    """Stack adapted layers over seeded random frozen bases (scale 1/sqrt(a))."""
    if r_g > spec.min_dim:
        raise ConfigError(
            f"global rank {r_g} exceeds the smallest layer dimension {spec.min_dim}")
    layers = []
    for idx, (a, b) in enumerate(spec.layer_dims):
        base_rng = np.random.default_rng(derive_seed(seed, idx, 0xBA5E))
        base = base_rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))
        layers.append(init_trilora(a, b, r_g, beta, derive_seed(seed, idx, 0xADA7),
                                   base_weight=base))
    return ClientModel(layers=layers, activation=spec.activation,
                       num_classes=spec.num_classes)


def accuracy(model: ClientModel, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of argmax predictions matching the labels."""
    return float(np.mean(np.argmax(model.forward(x), axis=1) == y))
