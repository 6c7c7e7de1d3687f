"""Decentralized formation-control particle environment.

Agents are point masses in the plane driven by bounded accelerations.  The
shared reward mixes a task term (formation shape, navigation toward a common
destination, collisions) with a penalty on the number of transmissions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

OBS_FEATURES = 5  # (px, py, vx, vy, presence)


def polygon_offsets(n: int, radius: float = 1.0) -> tuple[tuple[float, float], ...]:
    """Vertices of a regular ``n``-gon centred at the origin."""
    angles = 2.0 * np.pi * np.arange(n) / n
    return tuple((float(radius * np.cos(a)), float(radius * np.sin(a))) for a in angles)


@dataclass
class EnvConfig:
    n_agents: int = 7
    comm_range: float = 3.0
    destination: tuple[float, float] = (0.0, 10.0)
    init_pos_range: tuple[float, float] = (-2.0, 2.0)
    accel_range: tuple[float, float] = (-0.5, 0.5)
    dt: float = 0.5  # s
    episode_len: int = 50
    reward_weights: tuple[float, float] = (1.0, 0.1)
    formation_offsets: tuple[tuple[float, float], ...] | None = None
    collision_radius: float = 0.2
    velocity_cap: float = 1.0

    def __post_init__(self):
        self.destination = tuple(float(x) for x in self.destination)
        self.init_pos_range = tuple(float(x) for x in self.init_pos_range)
        self.accel_range = tuple(float(x) for x in self.accel_range)
        self.reward_weights = tuple(float(x) for x in self.reward_weights)
        if self.formation_offsets is None:
            self.formation_offsets = polygon_offsets(self.n_agents)
        self.formation_offsets = tuple(tuple(float(c) for c in o) for o in self.formation_offsets)
        if self.n_agents < 2:
            raise ValueError(f"n_agents must be >= 2, got {self.n_agents}")
        if self.comm_range <= 0:
            raise ValueError(f"comm_range must be positive, got {self.comm_range}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        lo, hi = self.accel_range
        if not (lo < 0 < hi and np.isclose(lo, -hi)):
            raise ValueError(f"accel_range must be symmetric about 0, got {self.accel_range}")
        if len(self.formation_offsets) != self.n_agents:
            raise ValueError(
                f"formation_offsets needs {self.n_agents} entries, got {len(self.formation_offsets)}"
            )
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")

    @property
    def accel_max(self) -> float:
        return self.accel_range[1]

    @property
    def obs_dim(self) -> int:
        return self.n_agents * OBS_FEATURES

    @property
    def global_dim(self) -> int:
        return 4 * self.n_agents


@dataclass
class WorldState:
    positions: np.ndarray  # (N, 2)
    velocities: np.ndarray  # (N, 2)
    t: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.positions.copy(), self.velocities.copy(), self.t)


@dataclass
class AgentObservation:
    """Slot 0 is the agent itself, slots 1.. its neighbours by ascending distance.

    ``order[j]`` is the agent index in slot ``j`` or -1 when the slot is empty.
    """

    slots: np.ndarray  # (N, 5)
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def flat(self) -> np.ndarray:
        return self.slots.reshape(-1)


class ActionRangeError(ValueError):
    pass


def reset(config: EnvConfig, seed: int) -> WorldState:
    rng = np.random.default_rng(seed)
    lo, hi = config.init_pos_range
    positions = rng.uniform(lo, hi, size=(config.n_agents, 2))
    return WorldState(positions, np.zeros((config.n_agents, 2)), 0)


def formation_error(positions: np.ndarray, offsets: np.ndarray) -> float:
    """Mean distance of agents from template vertices around the centroid.

    Agents are matched to vertices by minimum-cost assignment: parameters are
    shared and agents carry no identity, so a fixed labelling is unobservable.
    """
    rel = positions - positions.mean(axis=0)
    cost = np.linalg.norm(rel[:, None, :] - offsets[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def task_reward(state: WorldState, config: EnvConfig) -> float:
    p = state.positions
    centroid = p.mean(axis=0)
    formation = formation_error(p, np.asarray(config.formation_offsets))
    dest = np.asarray(config.destination)
    navigation = np.linalg.norm(centroid - dest) / np.linalg.norm(dest)
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    iu = np.triu_indices(config.n_agents, k=1)
    collisions = np.count_nonzero(dist[iu] < config.collision_radius)
    return float(-formation - navigation - collisions)


def step(
    state: WorldState, actions: Sequence, n_triggers: int, config: EnvConfig
) -> tuple[WorldState, float, bool]:
    """Advance one step with semi-implicit Euler integration.

    Returns the next state, the shared reward and the episode-done flag.
    """
    u = np.asarray(actions, dtype=float).reshape(-1, 2)
    if u.shape != (config.n_agents, 2):
        raise ActionRangeError(f"expected {config.n_agents} actions, got shape {u.shape}")
    lo, hi = config.accel_range
    if not np.all(np.isfinite(u)) or np.any(u < lo) or np.any(u > hi):
        raise ActionRangeError(f"action outside {config.accel_range}: {u.min()}, {u.max()}")
    if state.t >= config.episode_len:
        raise ValueError("episode already finished")
    cap = config.velocity_cap
    v = np.clip(state.velocities + u * config.dt, -cap, cap)
    p = state.positions + v * config.dt
    nxt = WorldState(p, v, state.t + 1)
    w_task, w_msg = config.reward_weights
    comm_penalty = -n_triggers / config.n_agents
    reward = w_task * task_reward(nxt, config) + w_msg * comm_penalty
    return nxt, float(reward), nxt.t == config.episode_len


def _neighbor_order(dist: np.ndarray, agent: int) -> np.ndarray:
    others = [j for j in range(len(dist)) if j != agent]
    # stable sort keeps ascending index on ties
    return np.array(sorted(others, key=lambda j: dist[agent, j]), dtype=int)


def observe_all(state: WorldState, config: EnvConfig) -> list[AgentObservation]:
    p, v = state.positions, state.velocities
    n = config.n_agents
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    out = []
    for i in range(n):
        slots = np.zeros((n, OBS_FEATURES))
        order = np.full(n, -1, dtype=int)
        slots[0] = (*p[i], *v[i], 1.0)
        order[0] = i
        for k, j in enumerate(_neighbor_order(dist, i), start=1):
            if dist[i, j] < config.comm_range:
                slots[k] = (*p[j], *v[j], 1.0)
                order[k] = j
        out.append(AgentObservation(slots, order))
    return out


def observe(state: WorldState, agent: int, config: EnvConfig) -> AgentObservation:
    if not 0 <= agent < config.n_agents:
        raise IndexError(f"agent {agent} out of range")
    return observe_all(state, config)[agent]


def global_observe(state: WorldState) -> np.ndarray:
    return np.concatenate([state.positions, state.velocities], axis=1).reshape(-1)


def parse_global(vec: np.ndarray, t: int = 0) -> WorldState:
    """Inverse of :func:`global_observe`."""
    blocks = np.asarray(vec, dtype=float).reshape(-1, 4)
    return WorldState(blocks[:, :2].copy(), blocks[:, 2:].copy(), t)
