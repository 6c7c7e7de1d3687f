"""Communication graph, variable-threshold event trigger and message routing.

Everything here operates on plain numpy arrays.  A sender that does not
trigger at step ``t`` delivers nothing: the receiver's slot is filled with
an exact zero vector instead of any remembered message.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

VALID = True
VOID = False


def build_adjacency(positions: np.ndarray, comm_range: float) -> np.ndarray:
    p = np.asarray(positions, dtype=float)
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    adj = (dist < comm_range).astype(np.int8)
    np.fill_diagonal(adj, 1)
    return adj


@dataclass(frozen=True)
class TriggerConfig:
    c: float = 0.9
    zeta: float = 0.99
    force_first_step: bool = True
    # send when similarity falls *below* the threshold instead of above it
    invert: bool = False
    # bypass the trigger entirely, every agent transmits every step
    always_send: bool = False

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if not 0 < self.zeta < 1:
            raise ValueError(f"zeta must lie in (0, 1), got {self.zeta}")


def threshold(t: int, cfg: TriggerConfig) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    return cfg.c * cfg.zeta**t


def trigger_decision(kappa: float, t: int, cfg: TriggerConfig) -> bool:
    if cfg.always_send or (cfg.force_first_step and t == 0):
        return VALID
    g = threshold(t, cfg)
    if cfg.invert:
        return bool(kappa < g)
    return bool(kappa > g)


@dataclass(frozen=True)
class TriggerRecord:
    """Zero-order-hold memory of one agent's event history."""

    trigger_times: tuple[int, ...] = ()
    held_obs: np.ndarray | None = None

    @property
    def last_trigger(self) -> int | None:
        return self.trigger_times[-1] if self.trigger_times else None


def zoh_update(rec: TriggerRecord, obs: np.ndarray, decision: bool, t: int) -> TriggerRecord:
    if rec.last_trigger is not None and t <= rec.last_trigger:
        raise ValueError(f"step {t} does not follow last trigger {rec.last_trigger}")
    if not decision:
        return rec
    return replace(rec, trigger_times=rec.trigger_times + (t,), held_obs=np.array(obs, copy=True))


@dataclass
class MessageFrame:
    sent: np.ndarray  # (N, d_m)
    valid: np.ndarray  # (N,) bool
    received: np.ndarray  # (N, N, d_m), receiver x slot x message
    delivered: np.ndarray | None = None  # (N, N) bool, slot actually filled

    def heard_neighbor(self) -> np.ndarray:
        """Receivers that got at least one message besides their own."""
        return self.delivered[:, 1:].any(axis=1)


def route(
    sent: np.ndarray, valid: np.ndarray, adjacency: np.ndarray, neighbor_order: np.ndarray
) -> MessageFrame:
    """Deliver messages into each receiver's observation slots.

    ``neighbor_order[i, j]`` is the sender shown in receiver ``i``'s slot ``j``
    (-1 for an empty slot); slot 0 is always the receiver itself.
    """
    sent = np.asarray(sent, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    order = np.asarray(neighbor_order, dtype=int)
    n = sent.shape[0]
    if valid.shape != (n,) or adjacency.shape != (n, n) or order.shape != (n, n):
        raise ValueError(
            f"inconsistent shapes: sent {sent.shape}, valid {valid.shape}, "
            f"adjacency {adjacency.shape}, order {order.shape}"
        )
    if np.any(order[:, 0] != np.arange(n)):
        raise ValueError("slot 0 of every receiver must be the receiver itself")
    src = np.where(order >= 0, order, 0)
    rows = np.arange(n)[:, None]
    delivered = (order >= 0) & valid[src] & (adjacency[rows, src] == 1)
    delivered[:, 0] = True
    received = np.where(delivered[..., None], sent[src], 0.0)
    return MessageFrame(sent=sent, valid=valid, received=received, delivered=delivered)


@dataclass
class VolumeCounter:
    message_volume: float = 0.0
    consensus_volume: float = 0.0


def account(
    frame: MessageFrame, counter: VolumeCounter, d_m: int, d_h: int, n_consensus: int
) -> VolumeCounter:
    return VolumeCounter(
        message_volume=counter.message_volume + int(np.count_nonzero(frame.valid)) * d_m,
        consensus_volume=counter.consensus_volume + n_consensus * d_h,
    )


@dataclass
class TriggerLog:
    rows: list[dict] = field(default_factory=list)

    def record(self, t: int, agent: int, kappa: float, thresh: float, decision: bool) -> None:
        self.rows.append(
            {
                "t": int(t),
                "agent": int(agent),
                "kappa": float(kappa),
                "threshold": float(thresh),
                "decision": "VALID" if decision else "VOID",
            }
        )

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TriggerLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def valid_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for row in self.rows:
            counts.setdefault(row["t"], 0)
            counts[row["t"]] += row["decision"] == "VALID"
        return counts


def summarize_log(rows: Iterable[dict], n_agents: int) -> str:
    """Text view of a trigger log: one line per step, one column per agent."""
    by_t: dict[int, dict[int, dict]] = {}
    for row in rows:
        by_t.setdefault(row["t"], {})[row["agent"]] = row
    lines = ["   t  thresh  " + " ".join(f"a{i:<6d}" for i in range(n_agents)) + " sent"]
    for t in sorted(by_t):
        agents = by_t[t]
        thresh = next(iter(agents.values()))["threshold"]
        cells = []
        n_valid = 0
        for i in range(n_agents):
            r = agents.get(i)
            if r is None:
                cells.append("   -   ")
                continue
            mark = "*" if r["decision"] == "VALID" else " "
            n_valid += r["decision"] == "VALID"
            cells.append(f"{r['kappa']:+.3f}{mark}")
        lines.append(f"{t:4d}  {thresh:6.4f}  " + " ".join(cells) + f" {n_valid:4d}")
    return "\n".join(lines)
