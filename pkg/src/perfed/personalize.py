"""Personalization strategies: one personalized model per client.

Five strategies are provided. GlobalOnly deploys the federated global model
as-is. FineTune continues training selected layers on local data. FedPer
aggregates only the leading "base" layers during federation and keeps the
upper layers private per client. MamlFineTune runs a few first-order
full-batch adaptation steps on a support split. FedDistill exchanges
class-probability matrices on a shared public set instead of weights, so
clients may use heterogeneous architectures.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClientDataset, SharedSet
from .nn import (
    LayerMask,
    Model,
    ModelSpec,
    TrainConfig,
    build_model,
    evaluate,
    layer_offsets,
    loss_and_grad,
    model_from_params,
    sgd_step,
    train_local,
)
from .protocol import (
    ClientState,
    FdConsensus,
    FdOptions,
    RoundConfig,
    RoundRecord,
    UpMessage,
    federation_init_params,
    run_fd_round,
    _weight_mode_round,
)
from .rng import derive_seed, stream


# ---------------------------------------------------------------------------
# Strategy descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlobalOnly:
    kind = "global_only"
    name: str = "global_only"


@dataclass(frozen=True)
class FineTune:
    kind = "finetune"
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32
    layers: str | tuple[int, ...] = "after_first"
    name: str = "finetune"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if isinstance(self.layers, str) and self.layers not in ("after_first", "all"):
            raise ValueError(f"unknown layer selection {self.layers!r}")


@dataclass(frozen=True)
class FedPer:
    kind = "fedper"
    base_layers: int = 2
    local_epochs: int | None = None  # None: use the round config's epochs
    name: str = "fedper"

    def __post_init__(self) -> None:
        if self.base_layers < 1:
            raise ValueError("base_layers must be >= 1")


@dataclass(frozen=True)
class MamlFineTune:
    kind = "maml"
    inner_lr: float = 0.05
    inner_steps: int = 5
    support_fraction: float = 0.8
    name: str = "maml"

    def __post_init__(self) -> None:
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError("support_fraction must be in (0, 1)")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")


@dataclass(frozen=True)
class FedDistill:
    kind = "fed_distill"
    digest_epochs: int = 1
    revisit_epochs: int = 1
    exclude_self: bool = False
    name: str = "fed_distill"

    def __post_init__(self) -> None:
        if self.digest_epochs < 0 or self.revisit_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


Strategy = GlobalOnly | FineTune | FedPer | MamlFineTune | FedDistill

_STRATEGY_KINDS = {
    cls.kind: cls for cls in (GlobalOnly, FineTune, FedPer, MamlFineTune, FedDistill)
}


def strategy_from_dict(obj: dict) -> Strategy:
    obj = dict(obj)
    kind = obj.pop("kind", None)
    cls = _STRATEGY_KINDS.get(kind)
    if cls is None:
        raise ValueError(f"unknown strategy kind {kind!r}")
    if "layers" in obj and isinstance(obj["layers"], list):
        obj["layers"] = tuple(obj["layers"])
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ValueError(f"bad fields for strategy {kind!r}: {exc}") from None


def strategy_to_dict(strategy: Strategy) -> dict:
    out: dict = {"kind": strategy.kind}
    for key, value in vars(strategy).items():
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


@dataclass(frozen=True)
class PersonalizedOutcome:
    client_id: int
    model: Model
    test_accuracy: float
    strategy: str
    extras: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        obj = {
            "stage": "personalization",
            "client_id": self.client_id,
            "strategy": self.strategy,
            "test_accuracy": self.test_accuracy,
        }
        obj.update(self.extras)
        return obj


def _check_input_compat(spec: ModelSpec, client: ClientDataset) -> None:
    if client.test_x.shape[1] != spec.input_dim:
        raise ValueError(
            f"client {client.client_id}: feature dim {client.test_x.shape[1]} "
            f"incompatible with model input {spec.input_shape}"
        )


# ---------------------------------------------------------------------------
# Per-client strategies
# ---------------------------------------------------------------------------


def personalize_global_only(
    global_model: Model, client: ClientDataset, strategy_name: str = "global_only"
) -> PersonalizedOutcome:
    """Deploy the global model unchanged; accuracy on the client's own test set."""
    _check_input_compat(global_model.spec, client)
    model = global_model.with_params(global_model.params.copy())
    return PersonalizedOutcome(
        client_id=client.client_id,
        model=model,
        test_accuracy=evaluate(model, client.test_x, client.test_y),
        strategy=strategy_name,
    )


def finetune_mask(spec: ModelSpec, layers: str | tuple[int, ...]) -> LayerMask:
    if layers == "after_first":
        return LayerMask.after_first_parametric(spec)
    if layers == "all":
        return LayerMask.all_layers(spec)
    return LayerMask.from_trainable_indices(spec, layers)


def personalize_finetune(
    global_model: Model,
    client: ClientDataset,
    mask: LayerMask | None = None,
    epochs: int = 5,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
    strategy_name: str = "finetune",
) -> PersonalizedOutcome:
    """Refine selected layers of the global model on the client's train data.

    By default everything after the first weight-bearing layer is trainable
    (low-level features stay shared). Frozen layers remain bit-identical to
    the global model.
    """
    _check_input_compat(global_model.spec, client)
    if mask is None:
        mask = LayerMask.after_first_parametric(global_model.spec)
    model = global_model.with_params(global_model.params.copy())
    if mask.num_trainable_parametric(global_model.spec) == 0:
        warnings.warn("fine-tune mask freezes every layer; result equals the global model")
    if epochs > 0:
        model = train_local(
            model,
            client.train_x,
            client.train_y,
            TrainConfig(
                learning_rate=lr,
                batch_size=batch_size,
                epochs=epochs,
                seed=derive_seed(seed, "finetune", client.client_id),
            ),
            mask=mask,
        )
    return PersonalizedOutcome(
        client_id=client.client_id,
        model=model,
        test_accuracy=evaluate(model, client.test_x, client.test_y),
        strategy=strategy_name,
    )


def personalize_maml(
    global_model: Model,
    client: ClientDataset,
    inner_lr: float = 0.05,
    inner_steps: int = 5,
    support_fraction: float = 0.8,
    seed: int = 0,
    strategy_name: str = "maml",
) -> PersonalizedOutcome:
    """First-order adaptation: full-batch SGD steps on a seeded support split.

    The query split's post-adaptation loss is logged for diagnostics.
    """
    _check_input_compat(global_model.spec, client)
    if not 0.0 < support_fraction < 1.0:
        raise ValueError("support_fraction must be in (0, 1)")
    n = client.n_train
    perm = stream(seed, "maml-split", client.client_id).permutation(n)
    n_support = int(math.floor(support_fraction * n))
    if n_support == 0:
        raise ValueError(f"client {client.client_id}: support split empty")
    support = np.sort(perm[:n_support])
    query = np.sort(perm[n_support:])
    model = global_model.with_params(global_model.params.copy())
    for _ in range(inner_steps):
        _, grad = loss_and_grad(model, client.train_x[support], client.train_y[support])
        model = sgd_step(model, grad, inner_lr)
    extras: dict = {}
    if len(query):
        query_loss, _ = loss_and_grad(model, client.train_x[query], client.train_y[query])
        extras["query_loss"] = float(query_loss)
    return PersonalizedOutcome(
        client_id=client.client_id,
        model=model,
        test_accuracy=evaluate(model, client.test_x, client.test_y),
        strategy=strategy_name,
        extras=extras,
    )


# ---------------------------------------------------------------------------
# Federation-coupled strategies
# ---------------------------------------------------------------------------


def base_prefix_length(spec: ModelSpec, base_layer_count: int) -> int:
    """Scalar count of the first ``base_layer_count`` parametric layers."""
    parametric = spec.parametric_layer_indices()
    if not 1 <= base_layer_count <= len(parametric):
        raise ValueError(
            f"base_layer_count must be in [1, {len(parametric)}], got {base_layer_count}"
        )
    offsets = layer_offsets(spec)
    start, length = offsets[parametric[base_layer_count - 1]]
    return start + length


def train_fedper(
    clients: list[ClientState],
    spec: ModelSpec,
    base_layer_count: int,
    rounds: int,
    cfg: RoundConfig,
    local_epochs: int | None = None,
    round_metric=None,
    collect_messages: list[UpMessage] | None = None,
    strategy_name: str = "fedper",
) -> tuple[list[PersonalizedOutcome], list[RoundRecord]]:
    """Federate only the base layers; upper layers never leave their client.

    Every client starts from the same seeded init; per round, survivors train
    their full model locally but upload only the base prefix, which the
    server aggregates. The final personalized model joins the last global
    base with each client's own upper layers. ``round_metric(base, personal)``
    is recorded per round when given.
    """
    base_len = base_prefix_length(spec, base_layer_count)
    for client in clients:
        _check_input_compat(spec, client.dataset)
    init = federation_init_params(spec, cfg.seed)
    personal = {c.client_id: init.copy() for c in clients}
    global_base = init[:base_len].copy()
    dropout_seed = derive_seed(cfg.seed, "dropout")
    round_cfg = cfg if local_epochs is None else RoundConfig(
        k=cfg.k,
        local_epochs=local_epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        seed=cfg.seed,
    )
    records = []
    for r in range(rounds):
        global_base, record = _weight_mode_round(
            clients, spec, global_base, round_cfg, r, dropout_seed, personal, collect_messages
        )
        if round_metric is not None:
            record = replace(record, global_accuracy=float(round_metric(global_base, personal)))
        records.append(record)

    outcomes = []
    for client in sorted(clients, key=lambda c: c.client_id):
        params = personal[client.client_id].copy()
        params[:base_len] = global_base
        model = model_from_params(spec, params)
        outcomes.append(
            PersonalizedOutcome(
                client_id=client.client_id,
                model=model,
                test_accuracy=evaluate(model, client.dataset.test_x, client.dataset.test_y),
                strategy=strategy_name,
            )
        )
    return outcomes, records


def train_feddistill(
    clients: list[ClientState],
    shared: SharedSet,
    rounds: int,
    cfg: RoundConfig,
    options: FdOptions = FdOptions(),
    round_metric=None,
    collect_messages: list[UpMessage] | None = None,
    strategy_name: str = "fed_distill",
) -> tuple[list[PersonalizedOutcome], list[RoundRecord]]:
    """Federated distillation over possibly heterogeneous client models.

    Client models are seeded per client from their own (possibly distinct)
    specs. Each round's survivors digest the previous consensus on the shared
    set, revisit their local data, and upload soft labels; each client's final
    local model is its personalized model. ``round_metric(consensus, models)``
    is recorded per round when given.
    """
    if not clients:
        raise ValueError("no clients")
    num_classes = None
    models: dict[int, Model] = {}
    for client in clients:
        if client.model is not None:
            model = client.model
        else:
            raise ValueError(f"client {client.client_id}: no model spec assigned")
        spec = model.spec
        if shared.X.shape[1] != spec.input_dim:
            raise ValueError(
                f"client {client.client_id}: shared set feature dim {shared.X.shape[1]} "
                f"incompatible with model input {spec.input_shape}"
            )
        if num_classes is None:
            num_classes = spec.num_classes
        elif spec.num_classes != num_classes:
            raise ValueError(
                f"client {client.client_id}: num_classes {spec.num_classes} != {num_classes}"
            )
        models[client.client_id] = model

    consensus: FdConsensus | None = None
    records = []
    for r in range(rounds):
        consensus, record, models = run_fd_round(
            clients,
            shared,
            consensus,
            cfg,
            r,
            models,
            options=options,
            collect_messages=collect_messages,
        )
        if round_metric is not None:
            record = replace(record, global_accuracy=float(round_metric(consensus, models)))
        records.append(record)

    outcomes = []
    for client in sorted(clients, key=lambda c: c.client_id):
        model = models[client.client_id]
        outcomes.append(
            PersonalizedOutcome(
                client_id=client.client_id,
                model=model,
                test_accuracy=evaluate(model, client.dataset.test_x, client.dataset.test_y),
                strategy=strategy_name,
            )
        )
    return outcomes, records


def build_client_models(
    clients: list[ClientState], specs: dict[int, ModelSpec], seed: int
) -> list[ClientState]:
    """Assign each client a freshly initialized model from its spec."""
    out = []
    for client in clients:
        spec = specs[client.client_id]
        model = build_model(spec, derive_seed(seed, "init", client.client_id))
        out.append(
            ClientState(
                client_id=client.client_id,
                dataset=client.dataset,
                model=model,
                speed_factor=client.speed_factor,
                dropout_prob=client.dropout_prob,
            )
        )
    return out
