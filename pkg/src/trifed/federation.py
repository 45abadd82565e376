"""Round orchestration, server aggregation, and the exchange wire format.

The server keeps a global stack at the maximum client depth.  Each round it
broadcasts the stack, every client runs a local round and uploads its
depth-aligned stack, and the server replaces the global stack with the
plain mean over clients, accumulated in ascending client order so reruns
are bitwise identical.  Uploads and broadcasts always pass through the
serialized format, whether they travel in memory or as files.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import SharedStack, init_relation
from .client_trainer import ClientState, generalized_gradient, local_round
from .errors import (
    ConfigError,
    FormatError,
    NumericDivergenceError,
    ProtocolError,
)
from .objectives import Hyperparameters
from .taskgen import (
    ArchSpec,
    SyntheticTaskSpec,
    accuracy,
    build_toy_model,
    derive_seed,
    gen_task,
)
from .trilora import ResourceDescriptor

MAGIC = b"H2TN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBII")


def serialize_stack(stack: SharedStack) -> bytes:
    """Encode a stack: magic, version byte, u32 depth, u32 rank, f64 entries.

    All integers and floats are little-endian; entries are layer-major,
    row-major.  Round-trips are bit-exact.
    """
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, stack.depth, stack.rank)
    return header + np.ascontiguousarray(stack.layers, dtype="<f8").tobytes()


def deserialize_stack(data: bytes) -> SharedStack:
    """Decode `serialize_stack` output; FormatError carries the failing offset."""
    if len(data) < 4:
        raise FormatError("truncated magic", offset=len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", offset=0)
    if len(data) < 5:
        raise FormatError("truncated version byte", offset=len(data))
    if data[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {data[4]}", offset=4)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    _, _, depth, rank = _HEADER.unpack_from(data)
    if depth < 1:
        raise FormatError("depth must be >= 1", offset=5)
    if rank < 1:
        raise FormatError("rank must be >= 1", offset=9)
    expected = _HEADER.size + depth * rank * rank * 8
    if len(data) < expected:
        raise FormatError("truncated payload", offset=len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    layers = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(
        float).reshape(depth, rank, rank)
    return SharedStack(layers)


def aggregate(uploads) -> SharedStack:
    """Elementwise mean of the uploads, summed in ascending client order."""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    shape = uploads[0].layers.shape
    for k, stack in enumerate(uploads):
        if stack.layers.shape != shape:
            raise ProtocolError(
                f"upload shape {stack.layers.shape} != expected {shape}", client_id=k)
    acc = np.zeros(shape)
    for stack in uploads:
        acc += stack.layers
    return SharedStack(acc / len(uploads))


@dataclass(frozen=True)
class ClientSpec:
    """Static description of one client in a federation config."""

    arch: ArchSpec
    task: SyntheticTaskSpec
    resource: ResourceDescriptor
    hyper: Hyperparameters


@dataclass(frozen=True)
class FederationConfig:
    clients: tuple
    rank: int
    rounds: int
    local_epochs: int
    master_seed: int
    transport: str = "inproc"
    exchange_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if len(self.clients) < 1:
            raise ConfigError("need at least one client")
        if self.rounds < 0 or self.local_epochs < 1:
            raise ConfigError("rounds must be >= 0 and local_epochs >= 1")
        if self.transport not in ("inproc", "files"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.transport == "files" and not self.exchange_dir:
            raise ConfigError("file transport needs an exchange_dir")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for spec in self.clients:
            if self.rank > spec.arch.min_dim:
                raise ConfigError(
                    f"global rank {self.rank} exceeds a layer dimension "
                    f"of arch {spec.arch.layer_dims}")

    @property
    def global_depth(self) -> int:
        return max(spec.arch.depth for spec in self.clients)


@dataclass(frozen=True)
class ClientRoundMetrics:
    client_id: int
    share_loss: float
    specific_loss: float
    eval_acc: float
    gg_norm: float


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    clients: tuple
    gg_sq_mean: float
    wall_time: float


class _InProcessTransport:
    def __init__(self):
        self._store = {}

    def put(self, name: str, payload: bytes):
        self._store[name] = payload

    def get(self, name: str) -> bytes:
        return self._store[name]


class _FileTransport:
    """Exchange directory with one folder per round: round_<t>/client_<k>.r2g."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, name: str, payload: bytes):
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)

    def get(self, name: str) -> bytes:
        return (self.root / name).read_bytes()


class Federation:
    """Builds the clients from a config and drives the synchronous rounds."""

    def __init__(self, config: FederationConfig, communicate: bool = True):
        self.config = config
        self.communicate = communicate
        self.global_depth = config.global_depth
        self.clients = [self._build_client(k, spec)
                        for k, spec in enumerate(config.clients)]
        self.global_stack = SharedStack.zeros(self.global_depth, config.rank)
        if config.transport == "files":
            self._transport = _FileTransport(config.exchange_dir)
        else:
            self._transport = _InProcessTransport()
        self.history: list[RoundRecord] = []

    def _build_client(self, k: int, spec: ClientSpec) -> ClientState:
        seed = self.config.master_seed
        model = build_toy_model(spec.arch, self.config.rank,
                                spec.resource.sparsity_ratio,
                                derive_seed(seed, k, 0x0DE1))
        relation = init_relation(spec.arch.depth, self.global_depth)
        data = gen_task(spec.task)
        return ClientState(client_id=k, model=model, relation=relation,
                           resource=spec.resource, hyper=spec.hyper,
                           data=data, data_seed=derive_seed(seed, k, 0xDA7A))

    def _client_round(self, state: ClientState, round_index: int, observer):
        payload = self._transport.get(f"round_{round_index}/global.r2g")
        received = deserialize_stack(payload)
        try:
            _, upload, stats = local_round(state, received,
                                           self.config.local_epochs,
                                           observer=observer)
        except NumericDivergenceError as err:
            raise NumericDivergenceError(err.term, round_index=round_index,
                                         client_id=state.client_id) from err
        self._transport.put(f"round_{round_index}/client_{state.client_id}.r2g",
                            serialize_stack(upload))
        return stats

    def run(self, observer=None) -> list[RoundRecord]:
        """Execute all configured rounds and return the per-round history."""
        expected_shape = (self.global_depth, self.config.rank, self.config.rank)
        for t in range(self.config.rounds):
            started = time.perf_counter()
            self._transport.put(f"round_{t}/global.r2g",
                                serialize_stack(self.global_stack))
            if self.config.workers > 1:
                with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                    stats = list(pool.map(
                        lambda s: self._client_round(s, t, observer), self.clients))
            else:
                stats = [self._client_round(s, t, observer) for s in self.clients]
            uploads = []
            for state in self.clients:
                stack = deserialize_stack(
                    self._transport.get(f"round_{t}/client_{state.client_id}.r2g"))
                if stack.layers.shape != expected_shape:
                    raise ProtocolError(
                        f"upload shape {stack.layers.shape} != {expected_shape}",
                        client_id=state.client_id)
                uploads.append(stack)
            if self.communicate:
                self.global_stack = aggregate(uploads)
            metrics = tuple(
                ClientRoundMetrics(
                    client_id=state.client_id,
                    share_loss=st.share_loss,
                    specific_loss=st.specific_loss,
                    eval_acc=accuracy(state.model, state.data.x_test,
                                      state.data.y_test),
                    gg_norm=float(np.sqrt(st.gg_sq_mean)))
                for state, st in zip(self.clients, stats))
            gg_sq_mean = float(np.mean([st.gg_sq_mean for st in stats]))
            self.history.append(RoundRecord(
                round_index=t, clients=metrics, gg_sq_mean=gg_sq_mean,
                wall_time=time.perf_counter() - started))
        return self.history

    def evaluate(self) -> list[float]:
        """Current test accuracy of every client."""
        return [accuracy(s.model, s.data.x_test, s.data.y_test)
                for s in self.clients]


def run_federation(config: FederationConfig, observer=None) -> list[RoundRecord]:
    """Initialize the clients, run every round, return the full history."""
    return Federation(config).run(observer=observer)
