"""Command-line entry point: ``etcomm <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .comm import TriggerLog, summarize_log
from .config import ConfigError, Configs, load_config
from .mappo import TrainingDivergedError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key-value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("runs"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etcomm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant at one communication range")
    _common(p)
    p.add_argument("--variant", default="full", choices=harness.VARIANTS)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--comm-range", type=float, default=None)

    p = sub.add_parser("ablate", help="train every variant across the comm-range sweep")
    _common(p)
    p.add_argument("--variant", action="append", choices=harness.VARIANTS,
                   help="restrict to these variants (repeatable)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-seeds", type=int, default=None)
    p.add_argument("--sweep", type=float, nargs="+", default=None)

    p = sub.add_parser("eval", help="deterministic rollout of a checkpoint")
    _common(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--variant", default=None, choices=harness.VARIANTS)

    p = sub.add_parser("table", help="message/consensus volume table from finished runs")
    _common(p)
    p.add_argument("--runs", type=Path, default=None, help="run directory (default: --out)")
    p.add_argument("--metric", default="total_message_volume",
                   choices=["total_message_volume", "total_consensus_volume",
                            "mean_reward_last10", "final_h_kl"])
    p.add_argument("--variant", default=None, choices=harness.VARIANTS)

    p = sub.add_parser("plot", help="learning curves from finished runs")
    _common(p)
    p.add_argument("--runs", type=Path, default=None)
    p.add_argument("--key", default="episode_return")
    p.add_argument("--variant", default=None, choices=harness.VARIANTS)

    p = sub.add_parser("inspect-comm", help="print a trigger log as a per-step table")
    _common(p)
    p.add_argument("log", type=Path, help="trigger_log.jsonl")
    p.add_argument("--variant", default=None, choices=harness.VARIANTS)
    return parser


def _configs(args) -> Configs:
    cfgs = load_config(args.config)
    if args.seed is not None:
        cfgs = replace(cfgs, train=replace(cfgs.train, seed=args.seed))
    return cfgs


def cmd_train(args) -> int:
    cfgs = _configs(args)
    if args.comm_range is not None:
        cfgs = replace(cfgs, env=replace(cfgs.env, comm_range=args.comm_range))
    spec = harness.ExperimentSpec(
        cfgs=cfgs, variants=(args.variant,), comm_range_sweep=(cfgs.env.comm_range,),
        output_dir=str(args.out), epochs=args.epochs,
    )
    spec.validate()
    rec = harness.run(spec)[0]
    print(json.dumps({"run": rec.path, **rec.summary}, indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfgs = _configs(args)
    exp = cfgs.experiment
    spec = harness.ExperimentSpec(
        cfgs=cfgs,
        variants=tuple(args.variant or exp.get("variants", harness.VARIANTS)),
        comm_range_sweep=tuple(args.sweep or exp.get("comm_range_sweep", harness.DEFAULT_SWEEP)),
        n_seeds=args.n_seeds or exp.get("n_seeds", 1),
        output_dir=str(args.out),
        epochs=args.epochs,
    )
    spec.validate()
    records = harness.run(spec)
    tab = harness.table(records)
    harness.write_table(tab, args.out)
    print(tab.text())
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    res = harness.evaluate_checkpoint(args.checkpoint, _configs(args), seed=args.seed or 0,
                                        variant=args.variant)
    args.out.mkdir(parents=True, exist_ok=True)
    res.pop("trigger_log").write(args.out / "eval_trigger_log.jsonl")
    print(json.dumps(res, indent=2))
    return 0


def _records(args) -> list[harness.RunRecord]:
    root = args.runs or args.out
    records = harness.load_records(root)
    if args.variant:
        records = [r for r in records if r.variant == args.variant]
    if not records:
        raise ConfigError(f"no finished runs under {root}")
    return records


def cmd_table(args) -> int:
    tab = harness.table(_records(args), args.metric)
    harness.write_table(tab, args.out)
    print(tab.text())
    return 0


def cmd_plot(args) -> int:
    png, data = harness.plot(_records(args), args.out, args.key)
    print(f"wrote {png} and {data}")
    return 0


def cmd_inspect(args) -> int:
    if not args.log.is_file():
        raise ConfigError(f"trigger log not found: {args.log}")
    rows = TriggerLog.read(args.log).rows
    n = max((r["agent"] for r in rows), default=-1) + 1
    print(summarize_log(rows, n))
    return 0


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "table": cmd_table,
    "plot": cmd_plot,
    "inspect-comm": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"etcomm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"etcomm {args.command}: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
