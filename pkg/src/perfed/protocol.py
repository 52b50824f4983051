"""Synchronous round-based federation.

One round samples K clients, applies per-client Bernoulli dropout,
broadcasts the current global state, runs local training on the survivors,
and aggregates their uploads at a barrier. Communication is accounted in
exact scalar counts (what would cross the wire, uncompressed), and simulated
time follows the straggler rule: a round takes as long as its slowest
survivor. Aggregation always sums in ascending client id order so results
are bit-reproducible regardless of scheduling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .data import ClientDataset, SharedSet
from .nn import (
    Model,
    ModelSpec,
    TrainConfig,
    build_model,
    distill_local,
    forward,
    model_from_params,
    param_count,
    train_local,
)
from .rng import derive_seed, stream

LOG_SCHEMA = "v1"


@dataclass
class ClientState:
    """A simulated device: its data, optional local model, and conditions."""

    client_id: int
    dataset: ClientDataset
    model: Model | None = None
    speed_factor: float = 1.0  # simulated seconds per sample pass
    dropout_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.speed_factor <= 0:
            raise ValueError("speed_factor must be > 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must be in [0, 1]")


@dataclass(frozen=True)
class RoundConfig:
    k: int
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


@dataclass(frozen=True)
class UpMessage:
    client_id: int
    payload: np.ndarray  # 1-D parameter vector or 2-D soft-label matrix
    sample_count: int
    scalar_count: int


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    participants: tuple[int, ...]  # survivors; disjoint from dropouts
    dropouts: tuple[int, ...]
    uplink_scalars: int
    downlink_scalars: int
    simulated_time_s: float
    global_accuracy: float | None = None
    empty_round: bool = False

    def to_json_obj(self) -> dict:
        return {
            "schema": LOG_SCHEMA,
            "stage": "learning",
            "round_index": self.round_index,
            "participants": list(self.participants),
            "dropouts": list(self.dropouts),
            "uplink_scalars": self.uplink_scalars,
            "downlink_scalars": self.downlink_scalars,
            "simulated_time_s": self.simulated_time_s,
            "global_accuracy": self.global_accuracy,
            "empty_round": self.empty_round,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RoundRecord":
        if obj.get("schema") != LOG_SCHEMA:
            raise ValueError(f"unsupported round log schema {obj.get('schema')!r}")
        return cls(
            round_index=int(obj["round_index"]),
            participants=tuple(obj["participants"]),
            dropouts=tuple(obj["dropouts"]),
            uplink_scalars=int(obj["uplink_scalars"]),
            downlink_scalars=int(obj["downlink_scalars"]),
            simulated_time_s=float(obj["simulated_time_s"]),
            global_accuracy=obj.get("global_accuracy"),
            empty_round=bool(obj.get("empty_round", False)),
        )


@dataclass(frozen=True)
class CommReport:
    per_round_uplink: tuple[int, ...]
    per_round_downlink: tuple[int, ...]
    cumulative_uplink: int
    cumulative_downlink: int
    total_simulated_time_s: float


# ---------------------------------------------------------------------------
# Sampling and aggregation
# ---------------------------------------------------------------------------


def sample_clients(
    clients: list[ClientState], k: int, seed: int, round_index: int
) -> list[ClientState]:
    """Uniform sample of K clients without replacement, sorted by client id."""
    if k > len(clients):
        raise ValueError(f"K={k} exceeds the {len(clients)} available clients")
    ordered = sorted(clients, key=lambda c: c.client_id)
    rng = stream(seed, "sample", round_index)
    picks = rng.choice(len(ordered), size=k, replace=False)
    return [ordered[i] for i in np.sort(picks)]


def fedavg_aggregate(updates: list[tuple[np.ndarray, int]]) -> np.ndarray:
    """Sample-count-weighted mean, summed in list order."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    length = updates[0][0].size
    total = 0
    acc = np.zeros(length)
    for vec, count in updates:
        if vec.size != length:
            raise ValueError(f"update length mismatch: {vec.size} vs {length}")
        acc += float(count) * vec
        total += count
    if total <= 0:
        raise ValueError("total sample count must be positive")
    return acc / float(total)


def aggregate_messages(messages: list[UpMessage]) -> np.ndarray:
    """FedAvg over messages, summing in ascending client id order."""
    ordered = sorted(messages, key=lambda m: m.client_id)
    return fedavg_aggregate([(m.payload, m.sample_count) for m in ordered])


# ---------------------------------------------------------------------------
# Weight-mode rounds (FedAvg and base-layer variants)
# ---------------------------------------------------------------------------


def _split_dropouts(
    sampled: list[ClientState], dropout_seed: int, round_index: int
) -> tuple[list[ClientState], list[ClientState]]:
    survivors, dropped = [], []
    for client in sampled:
        draw = stream(dropout_seed, round_index, client.client_id).random()
        (dropped if draw < client.dropout_prob else survivors).append(client)
    return survivors, dropped


def _weight_mode_round(
    clients: list[ClientState],
    spec: ModelSpec,
    global_vec: np.ndarray,
    cfg: RoundConfig,
    round_index: int,
    dropout_seed: int,
    personal: dict[int, np.ndarray] | None,
    collect_messages: list[UpMessage] | None,
) -> tuple[np.ndarray, RoundRecord]:
    """One synchronous round; aggregates the leading len(global_vec) scalars.

    In plain FedAvg, ``global_vec`` is the full parameter vector and
    ``personal`` is None. In base+personal mode, ``global_vec`` is the base
    prefix and ``personal`` maps client id to its full local vector, updated
    in place for survivors.
    """
    base_len = global_vec.size
    sampled = sample_clients(clients, cfg.k, cfg.seed, round_index)
    survivors, dropped = _split_dropouts(sampled, dropout_seed, round_index)
    downlink = base_len * len(sampled)

    if not survivors:
        record = RoundRecord(
            round_index=round_index,
            participants=(),
            dropouts=tuple(c.client_id for c in dropped),
            uplink_scalars=0,
            downlink_scalars=downlink,
            simulated_time_s=0.0,
            empty_round=True,
        )
        return global_vec, record

    messages = []
    times = []
    for client in survivors:  # already in ascending id order
        cid = client.client_id
        if personal is None:
            start = global_vec.copy()
        else:
            start = personal[cid].copy()
            start[:base_len] = global_vec
        tc = TrainConfig(
            learning_rate=cfg.lr,
            batch_size=cfg.batch_size,
            epochs=cfg.local_epochs,
            seed=derive_seed(cfg.seed, "local", round_index, cid),
        )
        trained = train_local(
            model_from_params(spec, start), client.dataset.train_x, client.dataset.train_y, tc
        )
        if personal is not None:
            personal[cid] = trained.params
        payload = trained.params[:base_len].copy()
        messages.append(
            UpMessage(
                client_id=cid,
                payload=payload,
                sample_count=client.dataset.n_train,
                scalar_count=payload.size,
            )
        )
        times.append(client.dataset.n_train * cfg.local_epochs * client.speed_factor)

    if collect_messages is not None:
        collect_messages.extend(messages)
    new_global = aggregate_messages(messages)
    record = RoundRecord(
        round_index=round_index,
        participants=tuple(c.client_id for c in survivors),
        dropouts=tuple(c.client_id for c in dropped),
        uplink_scalars=sum(m.scalar_count for m in messages),
        downlink_scalars=downlink,
        simulated_time_s=float(max(times)),
    )
    return new_global, record


def run_round(
    clients: list[ClientState],
    spec: ModelSpec,
    global_params: np.ndarray,
    cfg: RoundConfig,
    round_index: int,
    dropout_seed: int | None = None,
    collect_messages: list[UpMessage] | None = None,
) -> tuple[np.ndarray, RoundRecord]:
    """One FedAvg round: sample, drop out, train survivors, aggregate."""
    if global_params.size != param_count(spec):
        raise ValueError("global parameter vector does not match the model spec")
    if dropout_seed is None:
        dropout_seed = derive_seed(cfg.seed, "dropout")
    return _weight_mode_round(
        clients, spec, global_params, cfg, round_index, dropout_seed, None, collect_messages
    )


def federation_init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Initial global parameters for a federation run with master seed ``seed``."""
    return build_model(spec, derive_seed(seed, "init")).params


def run_federation(
    clients: list[ClientState],
    spec: ModelSpec,
    cfg: RoundConfig,
    rounds: int,
    round_metric=None,
    collect_messages: list[UpMessage] | None = None,
) -> tuple[np.ndarray, list[RoundRecord]]:
    """Run ``rounds`` FedAvg rounds from a seeded init.

    ``round_metric(global_params)``, when given, is evaluated on each round's
    aggregated result and stored on the round record.
    """
    global_params = federation_init_params(spec, cfg.seed)
    dropout_seed = derive_seed(cfg.seed, "dropout")
    records = []
    for r in range(rounds):
        global_params, record = _weight_mode_round(
            clients, spec, global_params, cfg, r, dropout_seed, None, collect_messages
        )
        if round_metric is not None:
            record = replace(record, global_accuracy=float(round_metric(global_params)))
        records.append(record)
    return global_params, records


# ---------------------------------------------------------------------------
# Federated distillation rounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FdOptions:
    digest_epochs: int = 1
    revisit_epochs: int = 1
    exclude_self: bool = False


@dataclass(frozen=True)
class FdConsensus:
    """Soft-label matrices uploaded in one round plus their mean."""

    matrices: dict[int, np.ndarray]
    mean: np.ndarray

    def teacher_for(self, client_id: int, exclude_self: bool) -> np.ndarray:
        if exclude_self and client_id in self.matrices and len(self.matrices) > 1:
            n = len(self.matrices)
            return (self.mean * n - self.matrices[client_id]) / (n - 1)
        return self.mean


def run_fd_round(
    clients: list[ClientState],
    shared: SharedSet,
    consensus_prev: FdConsensus | None,
    cfg: RoundConfig,
    round_index: int,
    models: dict[int, Model],
    options: FdOptions = FdOptions(),
    dropout_seed: int | None = None,
    collect_messages: list[UpMessage] | None = None,
) -> tuple[FdConsensus | None, RoundRecord, dict[int, Model]]:
    """One distillation round: digest the consensus, revisit local data, upload.

    Survivors first train toward the previous consensus on the shared set
    (skipped while no consensus exists), then train on their own data, then
    upload their class-probability matrix over the shared set. The server
    returns the mean matrix. Uplink and downlink are |shared| * num_classes
    scalars per participant (no consensus broadcast before round 1).
    """
    if dropout_seed is None:
        dropout_seed = derive_seed(cfg.seed, "dropout")
    shared_n = len(shared)
    num_classes = shared.num_classes
    sampled = sample_clients(clients, cfg.k, cfg.seed, round_index)
    survivors, dropped = _split_dropouts(sampled, dropout_seed, round_index)
    downlink = 0 if consensus_prev is None else shared_n * num_classes * len(sampled)

    if not survivors:
        record = RoundRecord(
            round_index=round_index,
            participants=(),
            dropouts=tuple(c.client_id for c in dropped),
            uplink_scalars=0,
            downlink_scalars=downlink,
            simulated_time_s=0.0,
            empty_round=True,
        )
        return consensus_prev, record, models

    new_models = dict(models)
    messages = []
    times = []
    for client in survivors:
        cid = client.client_id
        model = new_models[cid]
        work = 0
        if consensus_prev is not None and options.digest_epochs > 0:
            teacher = consensus_prev.teacher_for(cid, options.exclude_self)
            model = distill_local(
                model,
                shared.X,
                teacher,
                TrainConfig(
                    learning_rate=cfg.lr,
                    batch_size=cfg.batch_size,
                    epochs=options.digest_epochs,
                    seed=derive_seed(cfg.seed, "digest", round_index, cid),
                ),
            )
            work += shared_n * options.digest_epochs
        model = train_local(
            model,
            client.dataset.train_x,
            client.dataset.train_y,
            TrainConfig(
                learning_rate=cfg.lr,
                batch_size=cfg.batch_size,
                epochs=options.revisit_epochs,
                seed=derive_seed(cfg.seed, "revisit", round_index, cid),
            ),
        )
        work += client.dataset.n_train * options.revisit_epochs
        new_models[cid] = model
        matrix = forward(model, shared.X)
        messages.append(
            UpMessage(
                client_id=cid,
                payload=matrix,
                sample_count=client.dataset.n_train,
                scalar_count=matrix.size,
            )
        )
        times.append(work * client.speed_factor)

    if collect_messages is not None:
        collect_messages.extend(messages)
    mean = np.zeros((shared_n, num_classes))
    for m in messages:  # ascending client id order
        mean += m.payload
    mean /= len(messages)
    consensus = FdConsensus(matrices={m.client_id: m.payload for m in messages}, mean=mean)
    record = RoundRecord(
        round_index=round_index,
        participants=tuple(c.client_id for c in survivors),
        dropouts=tuple(c.client_id for c in dropped),
        uplink_scalars=sum(m.scalar_count for m in messages),
        downlink_scalars=downlink,
        simulated_time_s=float(max(times)),
    )
    return consensus, record, new_models


# ---------------------------------------------------------------------------
# Accounting and logs
# ---------------------------------------------------------------------------


def payload_to_bytes(payload: np.ndarray) -> bytes:
    """Serialize an uplink payload: shape header then little-endian float64."""
    arr = np.ascontiguousarray(payload, dtype="<f8")
    if arr.ndim == 1:
        header = struct.pack("<Q", arr.size)
    elif arr.ndim == 2:
        header = struct.pack("<QQ", arr.shape[0], arr.shape[1])
    else:
        raise ValueError("payloads are 1-D vectors or 2-D matrices")
    return header + arr.tobytes()


def payload_header_size(payload: np.ndarray) -> int:
    return 8 * np.ndim(payload)


def comm_totals(records: list[RoundRecord]) -> CommReport:
    """Per-round and cumulative scalar counts plus total simulated time."""
    up = tuple(r.uplink_scalars for r in records)
    down = tuple(r.downlink_scalars for r in records)
    return CommReport(
        per_round_uplink=up,
        per_round_downlink=down,
        cumulative_uplink=sum(up),
        cumulative_downlink=sum(down),
        total_simulated_time_s=float(sum(r.simulated_time_s for r in records)),
    )


def write_round_log(path, records: list[RoundRecord], extra_entries: list[dict] = ()) -> None:
    """Newline-delimited JSON log: one round record per line, then extras."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_obj(), sort_keys=True) + "\n")
        for entry in extra_entries:
            fh.write(json.dumps({"schema": LOG_SCHEMA, **entry}, sort_keys=True) + "\n")


def read_round_log(path) -> tuple[list[RoundRecord], list[dict]]:
    records, extras = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("stage") == "learning":
                records.append(RoundRecord.from_json_obj(obj))
            else:
                extras.append(obj)
    return records, extras
