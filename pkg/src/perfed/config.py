"""Experiment configuration: the versioned ``perfed/v1`` JSON schema.

Parsing is strict: unknown keys are rejected with their dotted path, and
every leaf is type-checked with the expected type in the error message.
Dotted-key overrides edit the raw dict and are validated by a full re-parse,
so an override can never smuggle in a key or type the schema would refuse.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .data import DEFAULT_NOISE_SIGMA
from .nn import Conv3x3, Dense, ModelSpec, spec_from_dict, spec_to_dict
from .personalize import Strategy, strategy_from_dict, strategy_to_dict

SCHEMA_NAME = "perfed/v1"


class ConfigError(ValueError):
    """A configuration file or override is invalid."""


def _type_name(t) -> str:
    return {int: "int", float: "float", str: "str", bool: "bool", list: "list", dict: "dict"}[t]


def _check(value, expected: type, path: str, optional: bool = False):
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: expected {_type_name(expected)}, got null")
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if not isinstance(value, expected):
        raise ConfigError(f"{path}: expected {_type_name(expected)}, got {type(value).__name__}")
    return value


class _Section:
    """Tracks consumed keys of one dict so leftovers can be rejected."""

    def __init__(self, raw: dict, path: str):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected dict, got {type(raw).__name__}")
        self.raw = raw
        self.path = path
        self.seen: set[str] = set()

    def get(self, key: str, expected: type, default=None, optional: bool = False):
        self.seen.add(key)
        if key not in self.raw:
            return default
        return _check(self.raw[key], expected, f"{self.path}{key}", optional=optional)

    def require(self, key: str):
        self.seen.add(key)
        if key not in self.raw:
            raise ConfigError(f"missing required key: {self.path}{key}")
        return self.raw[key]

    def finish(self) -> None:
        unknown = sorted(set(self.raw) - self.seen)
        if unknown:
            raise ConfigError(f"unknown key: {self.path}{unknown[0]}")


# ---------------------------------------------------------------------------
# Section dataclasses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    num_classes: int = 10
    feature_dim: int = 64
    samples_per_class: int = 3000
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    csv_path: str | None = None
    sample_rate_hz: int = 50
    window_seconds: float = 1.0
    stride_seconds: float | None = None


@dataclass(frozen=True)
class PartitionSection:
    num_clients: int = 30
    train_per_client: int = 480
    test_per_client: int = 160
    skew: str = "random-counts"
    dirichlet_alpha: float | None = None
    client_shift: float = 0.0


@dataclass(frozen=True)
class SharedSetSection:
    size: int = 500
    balanced: bool = True


@dataclass(frozen=True)
class RoundSection:
    k: int = 5
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01


@dataclass(frozen=True)
class ClientsSection:
    dropout_prob: float = 0.0
    speed_factor_min: float = 1.0
    speed_factor_max: float = 1.0


@dataclass(frozen=True)
class ClientModelGroup:
    count: int
    model: ModelSpec


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    repeats: int
    rounds: int
    data: DataSection
    partition: PartitionSection
    shared_set: SharedSetSection
    data_sharing_fraction: float
    model: ModelSpec
    client_models: tuple[ClientModelGroup, ...] | None
    round: RoundSection
    clients: ClientsSection
    strategies: tuple[Strategy, ...]

    @property
    def feature_dim(self) -> int:
        if self.data.source == "csv":
            return 6 * int(round(self.data.window_seconds * self.data.sample_rate_hz))
        return self.data.feature_dim


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"input_shape", "num_classes", "layers"}
_LAYER_KEYS = {
    "dense": {"kind", "in", "out"},
    "conv3x3": {"kind", "in_channels", "out_channels"},
    "maxpool2x2": {"kind"},
    "relu": {"kind"},
    "softmax": {"kind"},
    "flatten": {"kind"},
}


def _parse_model(raw, path: str) -> ModelSpec:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected dict, got {type(raw).__name__}")
    unknown = sorted(set(raw) - _MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown key: {path}.{unknown[0]}")
    for key in ("input_shape", "num_classes", "layers"):
        if key not in raw:
            raise ConfigError(f"missing required key: {path}.{key}")
    layers = _check(raw["layers"], list, f"{path}.layers")
    for i, entry in enumerate(layers):
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ConfigError(f"{path}.layers[{i}]: expected a dict with a 'kind'")
        kind = entry["kind"]
        allowed = _LAYER_KEYS.get(kind)
        if allowed is None:
            raise ConfigError(f"{path}.layers[{i}].kind: unknown layer kind {kind!r}")
        unknown = sorted(set(entry) - allowed)
        if unknown:
            raise ConfigError(f"unknown key: {path}.layers[{i}].{unknown[0]}")
    try:
        return spec_from_dict(raw)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    top = _Section(raw, "")
    schema = top.require("schema")
    if schema != SCHEMA_NAME:
        raise ConfigError(f"schema: expected {SCHEMA_NAME!r}, got {schema!r}")
    seed = _check(top.get("seed", int, 0), int, "seed")
    out_dir = _check(top.get("out_dir", str, "out"), str, "out_dir")
    repeats = _check(top.get("repeats", int, 5), int, "repeats")
    rounds = _check(top.get("rounds", int, 40), int, "rounds")
    if repeats < 1:
        raise ConfigError("repeats: must be >= 1")
    if rounds < 1:
        raise ConfigError("rounds: must be >= 1")

    d = _Section(top.get("data", dict, {}), "data.")
    data = DataSection(
        source=d.get("source", str, "synthetic"),
        num_classes=d.get("num_classes", int, 10),
        feature_dim=d.get("feature_dim", int, 64),
        samples_per_class=d.get("samples_per_class", int, 3000),
        noise_sigma=d.get("noise_sigma", float, DEFAULT_NOISE_SIGMA),
        csv_path=d.get("csv_path", str, None, optional=True),
        sample_rate_hz=d.get("sample_rate_hz", int, 50),
        window_seconds=d.get("window_seconds", float, 1.0),
        stride_seconds=d.get("stride_seconds", float, None, optional=True),
    )
    d.finish()
    if data.source not in ("synthetic", "csv"):
        raise ConfigError(f"data.source: expected 'synthetic' or 'csv', got {data.source!r}")
    if data.source == "csv" and not data.csv_path:
        raise ConfigError("data.csv_path: required when data.source is 'csv'")
    if data.num_classes < 2:
        raise ConfigError("data.num_classes: must be >= 2")

    p = _Section(top.get("partition", dict, {}), "partition.")
    part = PartitionSection(
        num_clients=p.get("num_clients", int, 30),
        train_per_client=p.get("train_per_client", int, 480),
        test_per_client=p.get("test_per_client", int, 160),
        skew=p.get("skew", str, "random-counts"),
        dirichlet_alpha=p.get("dirichlet_alpha", float, None, optional=True),
        client_shift=p.get("client_shift", float, 0.0),
    )
    p.finish()
    if part.skew not in ("random-counts", "dirichlet"):
        raise ConfigError(
            f"partition.skew: expected 'random-counts' or 'dirichlet', got {part.skew!r}"
        )
    if part.skew == "dirichlet" and (part.dirichlet_alpha is None or part.dirichlet_alpha <= 0):
        raise ConfigError("partition.dirichlet_alpha: must be > 0 for dirichlet skew")
    if part.test_per_client % data.num_classes:
        raise ConfigError(
            f"partition.test_per_client: {part.test_per_client} not divisible by "
            f"{data.num_classes} classes"
        )

    s = _Section(top.get("shared_set", dict, {}), "shared_set.")
    shared = SharedSetSection(
        size=s.get("size", int, 500), balanced=s.get("balanced", bool, True)
    )
    s.finish()
    if shared.size < 1:
        raise ConfigError("shared_set.size: must be >= 1")

    sharing = _check(top.get("data_sharing_fraction", float, 0.0), float, "data_sharing_fraction")
    if not 0.0 <= sharing <= 1.0:
        raise ConfigError("data_sharing_fraction: must be in [0, 1]")

    model = _parse_model(top.require("model"), "model")

    raw_groups = top.get("client_models", list, None, optional=True)
    client_models = None
    if raw_groups is not None:
        groups = []
        for i, entry in enumerate(raw_groups):
            g = _Section(entry, f"client_models[{i}].")
            count = _check(g.require("count"), int, f"client_models[{i}].count")
            spec = _parse_model(g.require("model"), f"client_models[{i}].model")
            g.finish()
            groups.append(ClientModelGroup(count=count, model=spec))
        client_models = tuple(groups)
        if sum(g.count for g in client_models) != part.num_clients:
            raise ConfigError(
                "client_models: group counts must sum to partition.num_clients"
            )

    r = _Section(top.get("round", dict, {}), "round.")
    round_sec = RoundSection(
        k=r.get("k", int, 5),
        local_epochs=r.get("local_epochs", int, 1),
        batch_size=r.get("batch_size", int, 32),
        lr=r.get("lr", float, 0.01),
    )
    r.finish()
    if not 1 <= round_sec.k <= part.num_clients:
        raise ConfigError(f"round.k: must be in [1, {part.num_clients}], got {round_sec.k}")
    if round_sec.lr <= 0:
        raise ConfigError("round.lr: must be > 0")

    c = _Section(top.get("clients", dict, {}), "clients.")
    clients = ClientsSection(
        dropout_prob=c.get("dropout_prob", float, 0.0),
        speed_factor_min=c.get("speed_factor_min", float, 1.0),
        speed_factor_max=c.get("speed_factor_max", float, 1.0),
    )
    c.finish()
    if not 0.0 <= clients.dropout_prob <= 1.0:
        raise ConfigError("clients.dropout_prob: must be in [0, 1]")
    if not 0 < clients.speed_factor_min <= clients.speed_factor_max:
        raise ConfigError("clients: need 0 < speed_factor_min <= speed_factor_max")

    raw_strategies = _check(top.require("strategies"), list, "strategies")
    if not raw_strategies:
        raise ConfigError("strategies: must name at least one strategy")
    strategies = []
    for i, entry in enumerate(raw_strategies):
        if not isinstance(entry, dict):
            raise ConfigError(f"strategies[{i}]: expected dict, got {type(entry).__name__}")
        try:
            strategies.append(strategy_from_dict(entry))
        except ValueError as exc:
            raise ConfigError(f"strategies[{i}]: {exc}") from None
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})[0]
        raise ConfigError(f"strategies: duplicate name {dup!r}")

    top.finish()

    cfg = ExperimentConfig(
        seed=seed,
        out_dir=out_dir,
        repeats=repeats,
        rounds=rounds,
        data=data,
        partition=part,
        shared_set=shared,
        data_sharing_fraction=sharing,
        model=model,
        client_models=client_models,
        round=round_sec,
        clients=clients,
        strategies=tuple(strategies),
    )
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: ExperimentConfig) -> None:
    dim = cfg.feature_dim
    for label, spec in _named_specs(cfg):
        if spec.input_dim != dim:
            raise ConfigError(
                f"{label}: model input dim {spec.input_dim} != feature dim {dim}"
            )
        if spec.num_classes != cfg.data.num_classes:
            raise ConfigError(
                f"{label}: model num_classes {spec.num_classes} != data.num_classes "
                f"{cfg.data.num_classes}"
            )


def _named_specs(cfg: ExperimentConfig):
    yield "model", cfg.model
    if cfg.client_models:
        for i, group in enumerate(cfg.client_models):
            yield f"client_models[{i}].model", group.model


def load_config(path) -> ExperimentConfig:
    return parse_config(load_raw_config(path))


def load_raw_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


# ---------------------------------------------------------------------------
# Canonical form and overrides
# ---------------------------------------------------------------------------


def canonical_dict(cfg: ExperimentConfig) -> dict:
    """Round-trippable raw dict with every key present."""
    out: dict = {
        "schema": SCHEMA_NAME,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "repeats": cfg.repeats,
        "rounds": cfg.rounds,
        "data": {
            "source": cfg.data.source,
            "num_classes": cfg.data.num_classes,
            "feature_dim": cfg.data.feature_dim,
            "samples_per_class": cfg.data.samples_per_class,
            "noise_sigma": cfg.data.noise_sigma,
            "csv_path": cfg.data.csv_path,
            "sample_rate_hz": cfg.data.sample_rate_hz,
            "window_seconds": cfg.data.window_seconds,
            "stride_seconds": cfg.data.stride_seconds,
        },
        "partition": {
            "num_clients": cfg.partition.num_clients,
            "train_per_client": cfg.partition.train_per_client,
            "test_per_client": cfg.partition.test_per_client,
            "skew": cfg.partition.skew,
            "dirichlet_alpha": cfg.partition.dirichlet_alpha,
            "client_shift": cfg.partition.client_shift,
        },
        "shared_set": {"size": cfg.shared_set.size, "balanced": cfg.shared_set.balanced},
        "data_sharing_fraction": cfg.data_sharing_fraction,
        "model": spec_to_dict(cfg.model),
        "client_models": (
            None
            if cfg.client_models is None
            else [
                {"count": g.count, "model": spec_to_dict(g.model)} for g in cfg.client_models
            ]
        ),
        "round": {
            "k": cfg.round.k,
            "local_epochs": cfg.round.local_epochs,
            "batch_size": cfg.round.batch_size,
            "lr": cfg.round.lr,
        },
        "clients": {
            "dropout_prob": cfg.clients.dropout_prob,
            "speed_factor_min": cfg.clients.speed_factor_min,
            "speed_factor_max": cfg.clients.speed_factor_max,
        },
        "strategies": [strategy_to_dict(s) for s in cfg.strategies],
    }
    return out


def apply_override(raw: dict, assignment: str) -> dict:
    """Set one dotted key (e.g. ``round.k=5``) in a copy of the raw config.

    Parent path segments must already exist (list segments are numeric
    indices); the value is parsed as JSON when possible, else kept as a
    string. The result must still be re-parsed, which enforces schema
    membership and types.
    """
    key, sep, value = assignment.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    out = copy.deepcopy(raw)
    parts = key.split(".")
    node = out
    for i, part in enumerate(parts[:-1]):
        path = ".".join(parts[: i + 1])
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(f"override key {path!r} is not a valid list index")
            node = node[int(part)]
        elif isinstance(node, dict):
            if part not in node:
                raise ConfigError(f"override key {path!r} does not exist in the config")
            node = node[part]
        else:
            raise ConfigError(f"override key {path!r} does not address a container")
    leaf = parts[-1]
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    if isinstance(node, list):
        if not leaf.isdigit() or int(leaf) >= len(node):
            raise ConfigError(f"override key {key!r} is not a valid list index")
        node[int(leaf)] = parsed
    elif isinstance(node, dict):
        node[leaf] = parsed
    else:
        raise ConfigError(f"override key {key!r} does not address a container")
    return out
