"""Command-line entry point.

Subcommands: gen-data, partition, run, sweep-k, report, validate-config.
Exit codes: 0 success, 1 configuration/usage error, 2 runtime error. Errors
go to stderr; results go to files (validate-config prints the canonical
config to stdout). All randomness flows from the config's master seed (or
--seed); nothing reads the clock or OS entropy.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import (
    ConfigError,
    apply_override,
    canonical_dict,
    load_raw_config,
    parse_config,
)
from .data import synth_recordings, write_csv
from .harness import (
    build_data,
    emit_report,
    emit_round_logs,
    emit_sweep,
    run_experiment,
    sweep_k,
    write_csv_views,
    write_json,
)
from .presets import bench_config


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); remap to exit code 1
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="perfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p: _Parser) -> None:
        p.add_argument("--config", required=True, help="config JSON path, or 'bench'")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key with a dotted path (repeatable)",
        )
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides config seed)")
        p.add_argument("--threads", type=int, default=1, help="parallel repeats")

    common(sub.add_parser("validate-config", help="parse, validate, and print the config"))
    p = sub.add_parser("gen-data", help="write synthetic data files")
    common(p)
    p.add_argument(
        "--format",
        choices=("pool", "csv"),
        default="pool",
        help="pool: feature pool npz; csv: recording rows in the documented schema",
    )
    common(sub.add_parser("partition", help="write the partition manifest"))
    common(sub.add_parser("run", help="run the experiment and write reports"))
    p = sub.add_parser("sweep-k", help="run the participation-count sweep")
    common(p)
    p.add_argument("--ks", default="3,5,10,30", help="comma-separated K values")
    p = sub.add_parser("report", help="regenerate CSV views from report.json")
    p.add_argument("--out", required=True, help="directory containing report.json")
    return parser


def _load_config(args):
    if args.config == "bench":
        raw = bench_config()
    else:
        raw = load_raw_config(args.config)
    for assignment in args.set:
        raw = apply_override(raw, assignment)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out_dir"] = args.out
    return parse_config(raw)


def _cmd_validate(args) -> int:
    cfg = _load_config(args)
    print(json.dumps(canonical_dict(cfg), indent=2, sort_keys=True))
    return 0


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.format == "csv":
        recordings = synth_recordings(
            num_subjects=cfg.partition.num_clients,
            num_classes=cfg.data.num_classes,
            sample_rate_hz=cfg.data.sample_rate_hz,
            seed=cfg.seed,
            noise_sigma=cfg.data.noise_sigma,
        )
        path = os.path.join(cfg.out_dir, "recordings.csv")
        write_csv(recordings, path)
    else:
        bundle = build_data(cfg)
        path = os.path.join(cfg.out_dir, "pool.npz")
        np.savez(
            path,
            shared_x=bundle.shared.X,
            shared_y=bundle.shared.y,
            **{f"client{c.client_id}_train_x": c.train_x for c in bundle.clients},
            **{f"client{c.client_id}_train_y": c.train_y for c in bundle.clients},
            **{f"client{c.client_id}_test_x": c.test_x for c in bundle.clients},
            **{f"client{c.client_id}_test_y": c.test_y for c in bundle.clients},
        )
    print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_partition(args) -> int:
    from .data import partition_manifest

    cfg = _load_config(args)
    bundle = build_data(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "manifest.json")
    write_json(partition_manifest(bundle.clients, bundle.shared), path)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg, threads=max(1, args.threads))
    paths = emit_report(report, cfg.out_dir)
    paths += emit_round_logs(report, cfg.out_dir)
    print(f"wrote {len(paths)} files under {cfg.out_dir}", file=sys.stderr)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    try:
        ks = [int(part) for part in args.ks.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {args.ks!r}") from None
    if not ks:
        raise UsageError("--ks must name at least one K")
    try:
        sweep = sweep_k(cfg, ks)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    paths = emit_sweep(sweep, cfg.out_dir)
    print(f"wrote {len(paths)} files under {cfg.out_dir}", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    path = os.path.join(args.out, "report.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    paths = write_csv_views(obj, args.out)
    print(f"wrote {len(paths)} files under {args.out}", file=sys.stderr)
    return 0


_COMMANDS = {
    "validate-config": _cmd_validate,
    "gen-data": _cmd_gen_data,
    "partition": _cmd_partition,
    "run": _cmd_run,
    "sweep-k": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
