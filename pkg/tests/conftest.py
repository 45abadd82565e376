import numpy as np
import pytest

from trifed.alignment import SharedStack, init_relation
from trifed.client_trainer import ClientState
from trifed.objectives import Hyperparameters
from trifed.taskgen import ArchSpec, Dataset, build_toy_model
from trifed.trilora import ResourceDescriptor


def random_client_state(seed, warm=True, lam=None, depth_range=(1, 4),
                        dim_range=(3, 7), max_rank=3):
    """Random small heterogeneous client plus a matching batch.

    ``warm`` fills A/B/R with nonzero values so gradients are nontrivial;
    masked R positions stay zero.
    """
    r = np.random.default_rng(seed)
    depth = int(r.integers(*depth_range))
    dims = []
    a = int(r.integers(*dim_range))
    for _ in range(depth):
        b = int(r.integers(*dim_range))
        dims.append((a, b))
        a = b
    num_classes = dims[-1][1]
    arch = ArchSpec(layer_dims=tuple(dims),
                    activation="tanh" if r.random() < 0.7 else "identity",
                    num_classes=num_classes)
    rank = int(r.integers(1, min(arch.min_dim, max_rank) + 1))
    beta = float(r.uniform(0.2, 1.0))
    model = build_toy_model(arch, rank, beta, int(r.integers(0, 2**31)))
    if warm:
        for layer in model.layers:
            layer.A[:] = r.normal(size=layer.A.shape)
            layer.B[:] = 0.5 * r.normal(size=layer.B.shape)
            # keep masked positions at a clean +0.0 (no -0.0 from 0 * negative)
            layer.R[:] = np.where(layer.mask == 1.0,
                                  0.5 * r.normal(size=layer.R.shape), 0.0)
    global_depth = depth + int(r.integers(0, 3))
    relation = init_relation(depth, global_depth)
    relation.omega = relation.omega + 0.1 * r.normal(size=relation.omega.shape)
    n = int(r.integers(2, 5))
    x = r.normal(size=(n, dims[0][0]))
    y = r.integers(0, num_classes, size=n)
    data = Dataset(x, y, x.copy(), y.copy())
    hyper = Hyperparameters(
        lr_specific=0.1, lr_shared=0.1,
        weight_decay=float(r.uniform(0.0, 0.01)),
        matrix_kl_weight=float(r.uniform(0.2, 2.0)) if lam is None else lam,
        pred_kl_weight=float(r.uniform(0.2, 1.5)))
    state = ClientState(client_id=0, model=model, relation=relation,
                        resource=ResourceDescriptor(beta, rank), hyper=hyper,
                        data=data, data_seed=seed)
    return state, (x, y)


def random_stack(rng, depth=None, rank=None, scale=1.0):
    depth = depth or int(rng.integers(1, 5))
    rank = rank or int(rng.integers(1, 5))
    return SharedStack(scale * rng.normal(size=(depth, rank, rank)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
