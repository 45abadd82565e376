"""Bundled desk-scale scenario and JSON config handling.

The config document is plain JSON: top-level ``rank``, ``rounds``,
``epochs``, ``seed``, optional ``transport``, and a ``clients`` array whose
entries carry ``arch``, ``task``, ``resource``, and ``hyper`` sections.  The
bundled scenario is three clients of increasing depth and width (2/3/4
layers, hidden widths 8/12/16) over synthetic tasks that share 70% of their
labeling structure, with mask densities 0.25 / 0.5 / 1.0.
"""

from __future__ import annotations

import copy
import json

from .errors import ConfigError
from .federation import ClientSpec, FederationConfig
from .objectives import Hyperparameters
from .taskgen import ArchSpec, SyntheticTaskSpec
from .trilora import ResourceDescriptor

_SHARED_TEACHER_SEED = 424242

_BUNDLED = {
    "rank": 4,
    "rounds": 20,
    "epochs": 2,
    "seed": 1,
    "transport": "inproc",
    "clients": [
        {
            "arch": {"layer_dims": [[8, 8], [8, 4]],
                     "activation": "tanh", "num_classes": 4},
            "task": {"input_dim": 8, "num_classes": 4, "n_train": 256,
                     "n_test": 512, "shared_seed": _SHARED_TEACHER_SEED,
                     "private_seed": 101, "shared_weight": 0.7},
            "resource": {"sparsity_ratio": 0.25, "declared_rank": 4},
            "hyper": {"lr_specific": 0.2, "lr_shared": 0.1,
                      "weight_decay": 0.05, "matrix_kl_weight": 1.0,
                      "pred_kl_weight": 1.0, "batch_size": 16},
        },
        {
            "arch": {"layer_dims": [[8, 12], [12, 12], [12, 4]],
                     "activation": "tanh", "num_classes": 4},
            "task": {"input_dim": 8, "num_classes": 4, "n_train": 256,
                     "n_test": 512, "shared_seed": _SHARED_TEACHER_SEED,
                     "private_seed": 202, "shared_weight": 0.7},
            "resource": {"sparsity_ratio": 0.5, "declared_rank": 4},
            "hyper": {"lr_specific": 0.2, "lr_shared": 0.1,
                      "weight_decay": 0.05, "matrix_kl_weight": 1.0,
                      "pred_kl_weight": 1.0, "batch_size": 16},
        },
        {
            "arch": {"layer_dims": [[8, 16], [16, 16], [16, 16], [16, 4]],
                     "activation": "tanh", "num_classes": 4},
            "task": {"input_dim": 8, "num_classes": 4, "n_train": 256,
                     "n_test": 512, "shared_seed": _SHARED_TEACHER_SEED,
                     "private_seed": 303, "shared_weight": 0.7},
            "resource": {"sparsity_ratio": 1.0, "declared_rank": 4},
            "hyper": {"lr_specific": 0.2, "lr_shared": 0.1,
                      "weight_decay": 0.05, "matrix_kl_weight": 1.0,
                      "pred_kl_weight": 1.0, "batch_size": 16},
        },
    ],
}


def bundled_scenario() -> dict:
    """Deep copy of the default three-client scenario document."""
    return copy.deepcopy(_BUNDLED)


def bundled_scenario_bytes() -> bytes:
    """Canonical JSON bytes of the bundled scenario (what gets hashed)."""
    return (json.dumps(_BUNDLED, indent=2, sort_keys=True) + "\n").encode()


def config_from_doc(doc: dict, *, rounds: int | None = None,
                    seed: int | None = None, transport: str | None = None,
                    exchange_dir: str | None = None,
                    workers: int = 1) -> FederationConfig:
    """Turn a parsed JSON document into a validated FederationConfig.

    Missing or mistyped keys raise KeyError/TypeError (a parse problem);
    semantic violations raise ConfigError.
    """
    rounds_val = int(doc["rounds"] if rounds is None else rounds)
    epochs = int(doc["epochs"])
    seed_val = int(doc["seed"] if seed is None else seed)
    transport_val = transport or doc.get("transport", "inproc")
    clients = []
    for entry in doc["clients"]:
        arch = ArchSpec(layer_dims=tuple(tuple(p) for p in entry["arch"]["layer_dims"]),
                        activation=entry["arch"]["activation"],
                        num_classes=int(entry["arch"]["num_classes"]))
        t = entry["task"]
        task = SyntheticTaskSpec(input_dim=int(t["input_dim"]),
                                 num_classes=int(t["num_classes"]),
                                 n_train=int(t["n_train"]), n_test=int(t["n_test"]),
                                 shared_seed=int(t["shared_seed"]),
                                 private_seed=int(t["private_seed"]),
                                 shared_weight=float(t["shared_weight"]))
        r = entry["resource"]
        resource = ResourceDescriptor(sparsity_ratio=float(r["sparsity_ratio"]),
                                      declared_rank=int(r["declared_rank"]))
        h = dict(entry["hyper"])
        hyper = Hyperparameters(lr_specific=float(h["lr_specific"]),
                                lr_shared=float(h["lr_shared"]),
                                local_epochs=epochs, rounds=max(rounds_val, 1),
                                weight_decay=float(h.get("weight_decay", 0.0)),
                                matrix_kl_weight=float(h.get("matrix_kl_weight", 1.0)),
                                pred_kl_weight=float(h.get("pred_kl_weight", 1.0)),
                                batch_size=int(h.get("batch_size", 16)),
                                joint=bool(h.get("joint", False)),
                                proximal_mode=bool(h.get("proximal_mode", False)),
                                proximal_inner_steps=int(h.get("proximal_inner_steps", 8)))
        clients.append(ClientSpec(arch=arch, task=task, resource=resource, hyper=hyper))
    return FederationConfig(clients=tuple(clients), rank=int(doc["rank"]),
                            rounds=rounds_val, local_epochs=epochs,
                            master_seed=seed_val, transport=transport_val,
                            exchange_dir=exchange_dir, workers=workers)


def apply_arm(doc: dict, arm: str) -> dict:
    """Rewrite a config document for one experiment arm.

    LOCAL zeroes the matrix-KL pull (communication is disabled separately),
    NO_DISENTANGLE switches clients to joint single-phase training, and
    NO_MASK makes every mask fully dense.
    """
    if arm not in ("H2TUNE", "LOCAL", "NO_DISENTANGLE", "NO_MASK"):
        raise ConfigError(f"unknown baseline arm {arm!r}")
    out = copy.deepcopy(doc)
    for entry in out["clients"]:
        if arm == "LOCAL":
            entry["hyper"]["matrix_kl_weight"] = 0.0
        elif arm == "NO_DISENTANGLE":
            entry["hyper"]["joint"] = True
        elif arm == "NO_MASK":
            entry["resource"]["sparsity_ratio"] = 1.0
    return out
