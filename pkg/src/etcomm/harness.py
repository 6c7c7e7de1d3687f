"""Ablation runs, persisted metrics, volume tables and learning curves."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mappo
from .comm import TriggerConfig, TriggerLog
from .config import Configs, dump_config
from .losses import batch_moments, kl_to_standard_normal

VARIANTS = ("full", "no_etm", "no_gib", "no_etm_no_gib")
DEFAULT_SWEEP = (2.1, 2.4, 2.7, 2.8)

AGGREGATORS: dict[str, mappo.Aggregator] = {"consensus": mappo.consensus_aggregator}


def register_aggregator(name: str, fn: mappo.Aggregator) -> None:
    """Plug in an alternative message aggregator (e.g. a baseline)."""
    AGGREGATORS[name] = fn


def variant_configs(cfgs: Configs, variant: str) -> Configs:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    loss, trigger = cfgs.loss, cfgs.trigger
    if variant in ("no_gib", "no_etm_no_gib"):
        loss = replace(loss, rho=0.0)
    if variant in ("no_etm", "no_etm_no_gib"):
        trigger = replace(trigger, always_send=True)
    return replace(cfgs, loss=loss, trigger=trigger)


@dataclass
class ExperimentSpec:
    cfgs: Configs = field(default_factory=Configs)
    variants: tuple[str, ...] = ("full",)
    comm_range_sweep: tuple[float, ...] = DEFAULT_SWEEP
    n_seeds: int = 1
    output_dir: str = "runs"
    epochs: int | None = None
    aggregator: str = "consensus"

    def validate(self) -> None:
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
        if not self.comm_range_sweep or any(d <= 0 for d in self.comm_range_sweep):
            raise ValueError("comm_range_sweep values must be positive")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        out = Path(self.output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write_probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ValueError(f"output directory not writable: {out} ({exc})") from exc


@dataclass
class RunRecord:
    variant: str
    comm_range: float
    seed: int
    rows: list[dict]
    config: str
    summary: dict = field(default_factory=dict)
    path: str | None = None

    @staticmethod
    def summarize(rows: list[dict], window: int = 10) -> dict:
        returns = [r["episode_return"] for r in rows]
        return {
            "epochs": len(rows),
            "mean_reward_last10": float(np.mean(returns[-window:])) if rows else None,
            "total_message_volume": float(sum(r["message_volume"] for r in rows)),
            "total_consensus_volume": float(sum(r["consensus_volume"] for r in rows)),
        }


def run_dir(root: str | Path, variant: str, comm_range: float, seed: int) -> Path:
    return Path(root) / variant / f"comm_{comm_range:g}" / f"seed_{seed}"


def train_one(cfgs: Configs, variant: str, out: Path | None, epochs: int | None = None,
              aggregator: str = "consensus") -> RunRecord:
    cfgs = variant_configs(cfgs, variant)
    trainer = mappo.Trainer(
        cfgs.env, cfgs.net, cfgs.train, cfgs.loss, cfgs.trigger, AGGREGATORS[aggregator]
    )
    metrics_path = None
    if out is not None:
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        (out / "config.ini").write_text(dump_config(cfgs))
        metrics_path = out / "metrics.jsonl"
    rows = trainer.train(epochs, metrics_path=metrics_path, checkpoint_dir=out)
    final = final_evaluation(trainer)
    record = RunRecord(
        variant=variant,
        comm_range=cfgs.env.comm_range,
        seed=cfgs.train.seed,
        rows=rows,
        config=dump_config(cfgs),
        summary={**RunRecord.summarize(rows), **final["summary"]},
        path=str(out) if out else None,
    )
    if out is not None:
        trainer.save(out / "final.pt")
        final["trigger_log"].write(out / "trigger_log.jsonl")
        (out / "summary.json").write_text(json.dumps(record.summary, indent=2))
    return record


def final_evaluation(trainer: mappo.Trainer) -> dict:
    """Roll out the trained parameters once and measure the consensus statistics."""
    batch = trainer.rollout(trainer.params, episode=10_000)
    h = batch.h.reshape(-1, batch.h.shape[-1])
    h_kl = float(kl_to_standard_normal(batch_moments(h, trainer.loss_cfg.sigma_floor)))
    return {
        "summary": {
            "final_h_kl": h_kl,
            "final_return": float(batch.rewards.sum()),
            "final_message_volume": batch.message_volume,
        },
        "trigger_log": batch.trigger_log,
        "batch": batch,
    }


def run(spec: ExperimentSpec) -> list[RunRecord]:
    spec.validate()
    records = []
    base_seed = spec.cfgs.train.seed
    for variant in spec.variants:
        for comm_range in spec.comm_range_sweep:
            for k in range(spec.n_seeds):
                seed = base_seed + k
                cfgs = replace(
                    spec.cfgs,
                    env=replace(spec.cfgs.env, comm_range=comm_range),
                    train=replace(spec.cfgs.train, seed=seed),
                )
                out = run_dir(spec.output_dir, variant, comm_range, seed)
                records.append(train_one(cfgs, variant, out, spec.epochs, spec.aggregator))
    return records


def load_records(root: str | Path) -> list[RunRecord]:
    """Read every completed run (one with a summary file) under ``root``."""
    records = []
    for summary in sorted(Path(root).glob("*/comm_*/seed_*/summary.json")):
        d = summary.parent
        rows = [json.loads(line) for line in (d / "metrics.jsonl").read_text().splitlines() if line]
        records.append(
            RunRecord(
                variant=d.parent.parent.name,
                comm_range=float(d.parent.name.removeprefix("comm_")),
                seed=int(d.name.removeprefix("seed_")),
                rows=rows,
                config=(d / "config.ini").read_text(),
                summary=json.loads(summary.read_text()),
                path=str(d),
            )
        )
    return records


# ---------------------------------------------------------------------------
# Tables and plots


@dataclass
class VolumeTable:
    metric: str
    variants: list[str]
    comm_ranges: list[float]
    cells: dict[tuple[str, float], float | None]

    def text(self) -> str:
        head = f"{'range (m)':<16}" + "".join(f"{d:>12g}" for d in self.comm_ranges)
        lines = [head]
        for v in self.variants:
            cells = []
            for d in self.comm_ranges:
                val = self.cells.get((v, d))
                cells.append(f"{'-':>12}" if val is None else f"{val:>12.2f}")
            lines.append(f"{v:<16}" + "".join(cells))
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "variants": self.variants,
            "comm_ranges": self.comm_ranges,
            "cells": [
                {"variant": v, "comm_range": d, "value": self.cells.get((v, d))}
                for v in self.variants
                for d in self.comm_ranges
            ],
        }


def table(records: list[RunRecord], metric: str = "total_message_volume") -> VolumeTable:
    variants = [v for v in VARIANTS if any(r.variant == v for r in records)]
    ranges = sorted({r.comm_range for r in records})
    cells: dict[tuple[str, float], float | None] = {}
    for v in variants:
        for d in ranges:
            vals = [r.summary[metric] for r in records if r.variant == v and r.comm_range == d]
            cells[(v, d)] = float(np.mean(vals)) if vals else None
    return VolumeTable(metric, variants, ranges, cells)


def write_table(tab: VolumeTable, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, js = out / f"table_{tab.metric}.txt", out / f"table_{tab.metric}.json"
    txt.write_text(tab.text() + "\n")
    js.write_text(json.dumps(tab.to_json(), indent=2))
    return txt, js


def curve_data(records: list[RunRecord], key: str = "episode_return") -> dict:
    """Per-variant mean and across-seed std of ``key`` at each epoch."""
    data = {}
    for v in [v for v in VARIANTS if any(r.variant == v for r in records)]:
        runs = [r for r in records if r.variant == v]
        n = min(len(r.rows) for r in runs)
        mat = np.array([[row[key] for row in r.rows[:n]] for r in runs])
        data[v] = {
            "epoch": list(range(n)),
            "mean": mat.mean(0).tolist(),
            "std": mat.std(0).tolist(),
            "n_runs": len(runs),
        }
    return {"metric": key, "curves": data}


def render_curves(data: dict, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, c in data["curves"].items():
        x, m, s = np.array(c["epoch"]), np.array(c["mean"]), np.array(c["std"])
        ax.plot(x, m, label=name)
        ax.fill_between(x, m - s, m + s, alpha=0.25)
    ax.set_xlabel("epoch")
    ax.set_ylabel(data["metric"])
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot(records: list[RunRecord], out_dir: str | Path, key: str = "episode_return") -> tuple[Path, Path]:
    if not records:
        raise ValueError("plot needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = curve_data(records, key)
    data_path = out / f"curves_{key}.json"
    data_path.write_text(json.dumps(data, indent=2))
    return render_curves(data, out / f"curves_{key}.png"), data_path


# ---------------------------------------------------------------------------
# Checkpoint evaluation


def evaluate_checkpoint(ckpt: str | Path, cfgs: Configs, seed: int = 0,
                        variant: str | None = None) -> dict:
    """Deterministic (mean-action) rollout of a saved parameter set.

    The environment and trigger settings stored in the checkpoint win over
    ``cfgs``; ``variant`` then switches the trigger like a training variant.
    """
    from .nets import load_checkpoint

    params, payload = load_checkpoint(ckpt)
    saved = payload.get("configs", {})
    env_cfg = cfgs.env
    trig = cfgs.trigger
    if "env" in saved:
        env_cfg = type(cfgs.env)(**saved["env"])
    if "trigger" in saved:
        trig = TriggerConfig(**saved["trigger"])
    if variant is not None:
        trig = variant_configs(replace(cfgs, trigger=trig), variant).trigger
    batch = mappo.collect_rollout(
        env_cfg, params, trig, sigma=params.cfg.sigma_min, seed=seed, deterministic=True
    )
    return {
        "return": float(batch.rewards.sum()),
        "message_volume": batch.message_volume,
        "consensus_volume": batch.consensus_volume,
        "n_triggers": int(batch.valid.sum()),
        "trigger_log": batch.trigger_log,
    }


__all__ = [
    "AGGREGATORS",
    "DEFAULT_SWEEP",
    "ExperimentSpec",
    "RunRecord",
    "TriggerLog",
    "VARIANTS",
    "VolumeTable",
    "curve_data",
    "evaluate_checkpoint",
    "load_records",
    "plot",
    "register_aggregator",
    "render_curves",
    "run",
    "table",
    "train_one",
    "variant_configs",
    "write_table",
]

