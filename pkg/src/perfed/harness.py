"""Config-driven experiment runner, metric aggregation, and report emission.

One experiment builds its data once, then runs federation plus
personalization ``repeats`` times with seeds derived from the master seed;
repeats are isolated deterministic units, so they may run in parallel
threads and are merged in repeat order. All outputs are byte-reproducible
for a fixed config regardless of thread count.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from .config import ExperimentConfig, canonical_dict
from .data import CsvSchema, PartitionPlan, SharedSet, build_shared_set, partition
from .nn import Model, ModelSpec, evaluate, model_from_params
from .personalize import (
    FdOptions,
    FedDistill,
    FedPer,
    FineTune,
    GlobalOnly,
    MamlFineTune,
    PersonalizedOutcome,
    Strategy,
    build_client_models,
    finetune_mask,
    personalize_finetune,
    personalize_global_only,
    personalize_maml,
    train_feddistill,
    train_fedper,
)
from .protocol import (
    ClientState,
    CommReport,
    RoundConfig,
    RoundRecord,
    comm_totals,
    run_federation,
    write_round_log,
)
from .rng import derive_seed, stream

_FEDAVG_FAMILY = (GlobalOnly, FineTune, MamlFineTune)


# ---------------------------------------------------------------------------
# Six-number summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SixNumberSummary:
    minimum: float
    lower_quartile: float
    median: float
    upper_quartile: float
    maximum: float
    mean: float

    def to_json_obj(self) -> dict:
        return {
            "min": self.minimum,
            "lower_quartile": self.lower_quartile,
            "median": self.median,
            "upper_quartile": self.upper_quartile,
            "max": self.maximum,
            "mean": self.mean,
        }


def _interpolated_quantile(ordered: np.ndarray, q: float) -> float:
    """Inclusive linear interpolation: value at position q*(n-1) of the order stats."""
    pos = q * (len(ordered) - 1)
    lo = math.floor(pos)
    hi = math.ceil(pos)
    frac = pos - lo
    return float(ordered[lo] * (1.0 - frac) + ordered[hi] * frac)


def summarize(accuracies) -> SixNumberSummary:
    """Min, quartiles (inclusive linear interpolation), max, and mean."""
    values = np.asarray(list(accuracies), dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot summarize an empty list")
    ordered = np.sort(values)
    return SixNumberSummary(
        minimum=float(ordered[0]),
        lower_quartile=_interpolated_quantile(ordered, 0.25),
        median=_interpolated_quantile(ordered, 0.50),
        upper_quartile=_interpolated_quantile(ordered, 0.75),
        maximum=float(ordered[-1]),
        mean=float(values.mean()),
    )


# ---------------------------------------------------------------------------
# Data construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataBundle:
    clients: list
    shared: SharedSet
    speed_factors: dict[int, float]
    dropout_prob: float
    union_test_x: np.ndarray
    union_test_y: np.ndarray


def build_data(cfg: ExperimentConfig) -> DataBundle:
    """Pool, partition, shared set, and per-client conditions from the config."""
    master = cfg.seed
    if cfg.data.source == "synthetic":
        pool = datamod.synth_har(
            num_classes=cfg.data.num_classes,
            samples_per_class=cfg.data.samples_per_class,
            dim=cfg.data.feature_dim,
            seed=derive_seed(master, "data"),
            noise_sigma=cfg.data.noise_sigma,
        )
    else:
        recordings = datamod.load_csv(
            cfg.data.csv_path, CsvSchema(sample_rate_hz=cfg.data.sample_rate_hz)
        )
        pool = datamod.pool_from_recordings(
            recordings,
            num_classes=cfg.data.num_classes,
            window_seconds=cfg.data.window_seconds,
            stride_seconds=cfg.data.stride_seconds,
        )
    plan = PartitionPlan(
        num_clients=cfg.partition.num_clients,
        per_client_train=cfg.partition.train_per_client,
        per_client_test=cfg.partition.test_per_client,
        skew=cfg.partition.skew,
        alpha=cfg.partition.dirichlet_alpha,
        seed=derive_seed(master, "partition"),
        client_shift=cfg.partition.client_shift,
    )
    clients, leftover = partition(pool, plan)
    shared = build_shared_set(
        leftover,
        size=cfg.shared_set.size,
        balanced=cfg.shared_set.balanced,
        seed=derive_seed(master, "shared"),
    )
    if cfg.data_sharing_fraction > 0:
        clients = datamod.apply_data_sharing(
            clients, cfg.data_sharing_fraction, shared, seed=derive_seed(master, "sharing")
        )

    lo, hi = cfg.clients.speed_factor_min, cfg.clients.speed_factor_max
    rng = stream(master, "speed")
    speed = {}
    for client in clients:
        speed[client.client_id] = (
            lo if lo == hi else float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        )
    union_x = np.vstack([c.test_x for c in clients])
    union_y = np.concatenate([c.test_y for c in clients])
    return DataBundle(
        clients=clients,
        shared=shared,
        speed_factors=speed,
        dropout_prob=cfg.clients.dropout_prob,
        union_test_x=union_x,
        union_test_y=union_y,
    )


def client_states(cfg: ExperimentConfig, bundle: DataBundle) -> list[ClientState]:
    return [
        ClientState(
            client_id=c.client_id,
            dataset=c,
            speed_factor=bundle.speed_factors[c.client_id],
            dropout_prob=bundle.dropout_prob,
        )
        for c in bundle.clients
    ]


def client_spec_assignment(cfg: ExperimentConfig) -> dict[int, ModelSpec]:
    """Client id -> model spec; groups cover clients in id order."""
    specs: dict[int, ModelSpec] = {}
    if cfg.client_models is None:
        for cid in range(cfg.partition.num_clients):
            specs[cid] = cfg.model
        return specs
    cid = 0
    for group in cfg.client_models:
        for _ in range(group.count):
            specs[cid] = group.model
            cid += 1
    return specs


# ---------------------------------------------------------------------------
# Per-repeat execution
# ---------------------------------------------------------------------------


@dataclass
class StrategyRepeat:
    accuracies: list[float]  # per client, id order
    curve: list[float]  # per round
    records: list[RoundRecord]
    personalization: list[dict]
    extras_mean: dict


def _outcome_rows(outcomes: list[PersonalizedOutcome]) -> tuple[list[float], list[dict], dict]:
    ordered = sorted(outcomes, key=lambda o: o.client_id)
    extras_mean: dict = {}
    keys = {k for o in ordered for k in o.extras}
    for key in sorted(keys):
        values = [o.extras[key] for o in ordered if key in o.extras]
        extras_mean[key] = float(np.mean(values))
    return (
        [o.test_accuracy for o in ordered],
        [o.to_json_obj() for o in ordered],
        extras_mean,
    )


def run_repeat(cfg: ExperimentConfig, bundle: DataBundle, repeat: int) -> dict[str, StrategyRepeat]:
    run_seed = derive_seed(cfg.seed, "repeat", repeat)
    rcfg = RoundConfig(
        k=cfg.round.k,
        local_epochs=cfg.round.local_epochs,
        batch_size=cfg.round.batch_size,
        lr=cfg.round.lr,
        seed=run_seed,
    )
    states = client_states(cfg, bundle)

    fed_global: Model | None = None
    fed_records: list[RoundRecord] = []
    if any(isinstance(s, _FEDAVG_FAMILY) for s in cfg.strategies):
        metric = lambda params: evaluate(  # noqa: E731
            model_from_params(cfg.model, params), bundle.union_test_x, bundle.union_test_y
        )
        final, fed_records = run_federation(states, cfg.model, rcfg, cfg.rounds, metric)
        fed_global = model_from_params(cfg.model, final)

    results: dict[str, StrategyRepeat] = {}
    for strategy in cfg.strategies:
        if isinstance(strategy, GlobalOnly):
            outcomes = [
                personalize_global_only(fed_global, c, strategy.name) for c in bundle.clients
            ]
            records, curve = fed_records, [r.global_accuracy for r in fed_records]
        elif isinstance(strategy, FineTune):
            mask = finetune_mask(cfg.model, strategy.layers)
            outcomes = [
                personalize_finetune(
                    fed_global,
                    c,
                    mask=mask,
                    epochs=strategy.epochs,
                    lr=strategy.lr,
                    batch_size=strategy.batch_size,
                    seed=run_seed,
                    strategy_name=strategy.name,
                )
                for c in bundle.clients
            ]
            records, curve = fed_records, [r.global_accuracy for r in fed_records]
        elif isinstance(strategy, MamlFineTune):
            outcomes = [
                personalize_maml(
                    fed_global,
                    c,
                    inner_lr=strategy.inner_lr,
                    inner_steps=strategy.inner_steps,
                    support_fraction=strategy.support_fraction,
                    seed=run_seed,
                    strategy_name=strategy.name,
                )
                for c in bundle.clients
            ]
            records, curve = fed_records, [r.global_accuracy for r in fed_records]
        elif isinstance(strategy, FedPer):

            def fedper_metric(base, personal):
                accs = []
                for c in bundle.clients:
                    params = personal[c.client_id].copy()
                    params[: base.size] = base
                    accs.append(
                        evaluate(model_from_params(cfg.model, params), c.test_x, c.test_y)
                    )
                return float(np.mean(accs))

            outcomes, records = train_fedper(
                states,
                cfg.model,
                strategy.base_layers,
                cfg.rounds,
                rcfg,
                local_epochs=strategy.local_epochs,
                round_metric=fedper_metric,
                strategy_name=strategy.name,
            )
            curve = [r.global_accuracy for r in records]
        elif isinstance(strategy, FedDistill):
            specs = client_spec_assignment(cfg)
            fd_states = build_client_models(states, specs, seed=run_seed)
            shared = bundle.shared

            def fd_metric(consensus, models):
                if consensus is None:
                    return 0.0
                return float(np.mean(consensus.mean.argmax(axis=1) == shared.y))

            outcomes, records = train_feddistill(
                fd_states,
                shared,
                cfg.rounds,
                rcfg,
                options=FdOptions(
                    digest_epochs=strategy.digest_epochs,
                    revisit_epochs=strategy.revisit_epochs,
                    exclude_self=strategy.exclude_self,
                ),
                round_metric=fd_metric,
                strategy_name=strategy.name,
            )
            curve = [r.global_accuracy for r in records]
        else:
            raise TypeError(f"unhandled strategy {strategy!r}")

        accs, entries, extras_mean = _outcome_rows(outcomes)
        results[strategy.name] = StrategyRepeat(
            accuracies=accs,
            curve=[float(v) for v in curve],
            records=list(records),
            personalization=entries,
            extras_mean=extras_mean,
        )
    return results


# ---------------------------------------------------------------------------
# Experiment-level aggregation
# ---------------------------------------------------------------------------


@dataclass
class StrategyResult:
    kind: str
    per_repeat_accuracy: list[list[float]]  # repeats x clients
    per_client_mean_accuracy: list[float]
    summary: SixNumberSummary
    curves: list[list[float]]  # repeats x rounds
    comm: list[CommReport]  # per repeat
    records: list[list[RoundRecord]]  # per repeat
    personalization: list[list[dict]]  # per repeat
    extras_mean: list[dict]


@dataclass
class ExperimentReport:
    config: dict
    client_ids: list[int]
    strategies: dict[str, StrategyResult]

    def to_json_dict(self) -> dict:
        out: dict = {
            "schema": "perfed/v1-report",
            "config": self.config,
            "client_ids": self.client_ids,
            "strategies": {},
        }
        for name, res in self.strategies.items():
            out["strategies"][name] = {
                "kind": res.kind,
                "per_repeat_accuracy": res.per_repeat_accuracy,
                "per_client_mean_accuracy": res.per_client_mean_accuracy,
                "summary": res.summary.to_json_obj(),
                "curves": res.curves,
                "comm": [
                    {
                        "per_round_uplink": list(c.per_round_uplink),
                        "per_round_downlink": list(c.per_round_downlink),
                        "per_round_simulated_time_s": [
                            r.simulated_time_s for r in res.records[i]
                        ],
                        "cumulative_uplink": c.cumulative_uplink,
                        "cumulative_downlink": c.cumulative_downlink,
                        "total_simulated_time_s": c.total_simulated_time_s,
                    }
                    for i, c in enumerate(res.comm)
                ],
                "extras_mean": res.extras_mean,
            }
        return out


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Run every configured strategy ``repeats`` times; deterministic given cfg."""
    bundle = build_data(cfg)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            repeat_results = list(
                pool.map(lambda r: run_repeat(cfg, bundle, r), range(cfg.repeats))
            )
    else:
        repeat_results = [run_repeat(cfg, bundle, r) for r in range(cfg.repeats)]

    strategies: dict[str, StrategyResult] = {}
    for strategy in cfg.strategies:
        reps = [res[strategy.name] for res in repeat_results]
        acc_matrix = [r.accuracies for r in reps]
        per_client_mean = [float(v) for v in np.mean(np.asarray(acc_matrix), axis=0)]
        strategies[strategy.name] = StrategyResult(
            kind=strategy.kind,
            per_repeat_accuracy=acc_matrix,
            per_client_mean_accuracy=per_client_mean,
            summary=summarize(per_client_mean),
            curves=[r.curve for r in reps],
            comm=[comm_totals(r.records) for r in reps],
            records=[r.records for r in reps],
            personalization=[r.personalization for r in reps],
            extras_mean=[r.extras_mean for r in reps],
        )
    return ExperimentReport(
        config=canonical_dict(cfg),
        client_ids=[c.client_id for c in bundle.clients],
        strategies=strategies,
    )


# ---------------------------------------------------------------------------
# K sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    ks: list[int]
    curves: dict[int, list[float]]
    total_times: dict[int, float]
    records: dict[int, list[RoundRecord]]

    def to_json_dict(self) -> dict:
        return {
            "schema": "perfed/v1-sweep",
            "ks": self.ks,
            "curves": {str(k): self.curves[k] for k in self.ks},
            "total_simulated_time_s": {str(k): self.total_times[k] for k in self.ks},
        }


def sweep_k(cfg: ExperimentConfig, ks: list[int] | None = None) -> SweepResult:
    """Accuracy-vs-round curve and total simulated time per participation count."""
    ks = list(ks) if ks is not None else [3, 5, 10, 30]
    for k in ks:
        if not 1 <= k <= cfg.partition.num_clients:
            raise ValueError(f"invalid K={k}: must be in [1, {cfg.partition.num_clients}]")
    bundle = build_data(cfg)
    states = client_states(cfg, bundle)
    metric = lambda params: evaluate(  # noqa: E731
        model_from_params(cfg.model, params), bundle.union_test_x, bundle.union_test_y
    )
    curves: dict[int, list[float]] = {}
    times: dict[int, float] = {}
    all_records: dict[int, list[RoundRecord]] = {}
    for k in ks:
        rcfg = RoundConfig(
            k=k,
            local_epochs=cfg.round.local_epochs,
            batch_size=cfg.round.batch_size,
            lr=cfg.round.lr,
            seed=derive_seed(cfg.seed, "repeat", 0),
        )
        _, records = run_federation(states, cfg.model, rcfg, cfg.rounds, metric)
        curves[k] = [float(r.global_accuracy) for r in records]
        times[k] = comm_totals(records).total_simulated_time_s
        all_records[k] = records
    return SweepResult(ks=ks, curves=curves, total_times=times, records=all_records)


# ---------------------------------------------------------------------------
# File emission
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def write_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_report(report: ExperimentReport, out_dir) -> list[str]:
    """Write report.json plus the plot-ready CSV views; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    obj = report.to_json_dict()
    path = os.path.join(out_dir, "report.json")
    write_json(obj, path)
    return [path] + write_csv_views(obj, out_dir)


def write_csv_views(report_obj: dict, out_dir) -> list[str]:
    """Regenerate the CSV views from a report.json object alone."""
    os.makedirs(out_dir, exist_ok=True)
    client_ids = report_obj["client_ids"]
    strategies = report_obj["strategies"]
    paths = []

    path = os.path.join(out_dir, "accuracy.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("client_id,strategy,repeat,accuracy\n")
        for name, res in strategies.items():
            for repeat, row in enumerate(res["per_repeat_accuracy"]):
                for cid, acc in zip(client_ids, row):
                    fh.write(f"{cid},{name},{repeat},{_fmt(acc)}\n")
    paths.append(path)

    path = os.path.join(out_dir, "comm.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            "strategy,repeat,round,uplink_scalars,downlink_scalars,"
            "cumulative_uplink_scalars,cumulative_downlink_scalars,simulated_time_s\n"
        )
        for name, res in strategies.items():
            for repeat, comm in enumerate(res["comm"]):
                cum_up = 0
                cum_down = 0
                rows = zip(
                    comm["per_round_uplink"],
                    comm["per_round_downlink"],
                    comm["per_round_simulated_time_s"],
                )
                for rnd, (up, down, t) in enumerate(rows):
                    cum_up += up
                    cum_down += down
                    fh.write(
                        f"{name},{repeat},{rnd},{up},{down},{cum_up},{cum_down},{_fmt(t)}\n"
                    )
    paths.append(path)

    path = os.path.join(out_dir, "curves.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("strategy,repeat,round,accuracy\n")
        for name, res in strategies.items():
            for repeat, curve in enumerate(res["curves"]):
                for rnd, acc in enumerate(curve):
                    fh.write(f"{name},{repeat},{rnd},{_fmt(acc)}\n")
    paths.append(path)

    path = os.path.join(out_dir, "boxplot.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("strategy,min,lower_quartile,median,upper_quartile,max,mean\n")
        for name, res in strategies.items():
            s = res["summary"]
            fh.write(
                f"{name},{_fmt(s['min'])},{_fmt(s['lower_quartile'])},{_fmt(s['median'])},"
                f"{_fmt(s['upper_quartile'])},{_fmt(s['max'])},{_fmt(s['mean'])}\n"
            )
    paths.append(path)
    return paths


def emit_round_logs(report: ExperimentReport, out_dir) -> list[str]:
    """One NDJSON log per (strategy, repeat): round records then outcomes."""
    log_dir = os.path.join(out_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    paths = []
    for name, res in report.strategies.items():
        for repeat, records in enumerate(res.records):
            path = os.path.join(log_dir, f"{name}.repeat{repeat}.ndjson")
            write_round_log(path, records, res.personalization[repeat])
            paths.append(path)
    return paths


def emit_sweep(sweep: SweepResult, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    path = os.path.join(out_dir, "sweep.json")
    write_json(sweep.to_json_dict(), path)
    paths.append(path)

    path = os.path.join(out_dir, "sweep_curves.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,round,accuracy\n")
        for k in sweep.ks:
            for rnd, acc in enumerate(sweep.curves[k]):
                fh.write(f"{k},{rnd},{_fmt(acc)}\n")
    paths.append(path)

    path = os.path.join(out_dir, "sweep_times.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,total_simulated_time_s\n")
        for k in sweep.ks:
            fh.write(f"{k},{_fmt(sweep.total_times[k])}\n")
    paths.append(path)
    return paths
