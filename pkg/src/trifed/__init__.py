"""Federated fine-tuning with triple low-rank adapters.

Building blocks: masked triple-factor adapter layers (`trilora`), depth
alignment between shared-matrix stacks (`alignment`), the two phase losses
(`objectives`), synthetic heterogeneous clients (`taskgen`), the alternating
local trainer (`client_trainer`), round orchestration and the wire format
(`federation`), and the experiment CLI (`cli`).
"""

from .alignment import RelationMatrix, SharedStack, init_relation, to_global, to_local
from .client_trainer import (
    ClientState,
    PhaseReport,
    RoundStats,
    check_gradients,
    local_round,
    phase_share_step,
    phase_specific_step,
    proximal_share_step,
)
from .federation import (
    ClientSpec,
    Federation,
    FederationConfig,
    RoundRecord,
    aggregate,
    deserialize_stack,
    generalized_gradient,
    run_federation,
    serialize_stack,
)
from .objectives import (
    Hyperparameters,
    LossBreakdown,
    cross_entropy,
    loss_share,
    loss_specific,
    matrix_kl,
    prediction_kl,
)
from .taskgen import ArchSpec, ClientModel, Dataset, SyntheticTaskSpec, build_toy_model, gen_task
from .trilora import ResourceDescriptor, TriLoraLayer, apply_delta, delta_matrix, init_trilora

__version__ = "0.1.0"
