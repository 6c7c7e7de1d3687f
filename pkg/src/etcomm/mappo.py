"""MAPPO training loop over the event-triggered consensus pipeline.

Each epoch clones the live parameters, rolls out one or more episodes with
the frozen clone, then replays the recorded local states under the live
parameters to form the composite loss and takes Adam steps on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import comm, env, nets
from .losses import (
    LossConfig,
    batch_moments,
    bound_condition_log,
    ce_loss,
    etm_loss,
    gib_alternate_layout,
    gib_terms,
    kl_to_standard_normal,
    total_loss,
)
from .nets import DTYPE, NetConfig, ParamSet


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.8
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 1e-3
    ppo_epochs: int = 4
    epochs: int = 200
    minibatch: int | None = None  # None = full batch
    seed: int = 0
    episodes_per_epoch: int = 1
    normalize_advantages: bool = True
    max_grad_norm: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.ppo_epochs < 1 or self.episodes_per_epoch < 1:
            raise ValueError("ppo_epochs and episodes_per_epoch must be >= 1")


# ---------------------------------------------------------------------------
# Advantage estimation and PPO objectives


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates by backward recursion.

    ``values`` carries one extra trailing entry, the bootstrap value of the
    state after the last reward (0 for a terminal state).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape != (len(r) + 1,):
        raise ValueError(f"values must have length {len(r) + 1}, got {v.shape}")
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def normalize(adv: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return (adv - adv.mean()) / (adv.std(unbiased=False) + eps)


def actor_objective(new_logp, old_logp, advantage, clip_eps: float) -> torch.Tensor:
    ratio = torch.exp(new_logp - old_logp)
    clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps)
    return torch.minimum(ratio * advantage, clipped * advantage).mean()


def value_objective(v_new, v_old, advantage) -> torch.Tensor:
    return -((v_new - (advantage + v_old)) ** 2).mean()


def mappo_objective(actor, value, entropy, alpha: float):
    return actor + value + alpha * entropy


# ---------------------------------------------------------------------------
# Rollouts

Aggregator = Callable[[torch.Tensor, ParamSet], torch.Tensor]


def consensus_aggregator(E: torch.Tensor, params: ParamSet) -> torch.Tensor:
    return nets.aggregate(E, params.psi_A)


@dataclass
class RolloutBatch:
    """One episode; per-step arrays are (T, N, ...) unless noted."""

    obs: torch.Tensor
    obs_held: torch.Tensor
    e_prev: torch.Tensor
    m_self: torch.Tensor
    received: torch.Tensor  # (T, N, N, d_m)
    rel_pos: torch.Tensor  # (T, N, N, 2)
    present: torch.Tensor  # (T, N, N) bool
    actions: torch.Tensor  # (T, N, 2) raw Gaussian samples
    old_logp: torch.Tensor
    kappa: torch.Tensor
    valid: torch.Tensor  # (T, N) bool
    e_hat: torch.Tensor
    h: torch.Tensor
    o_g: torch.Tensor  # (T, 4N), divided by input_scale like every network input
    global_state: torch.Tensor  # (T, 4N + N d_m)
    values: torch.Tensor  # (T,)
    rewards: np.ndarray  # (T,)
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    env_actions: np.ndarray = field(default_factory=lambda: np.zeros(0))  # clamped, fed to env
    seed: int = 0
    message_volume: float = 0.0
    consensus_volume: float = 0.0
    trigger_log: comm.TriggerLog = field(default_factory=comm.TriggerLog)

    @property
    def T(self) -> int:
        return len(self.rewards)

    @property
    def n_records(self) -> int:
        return int(self.valid.numel())


@torch.no_grad()
def collect_rollout(
    env_cfg: env.EnvConfig,
    params_old: ParamSet,
    trig_cfg: comm.TriggerConfig,
    sigma: float,
    seed: int,
    generator: torch.Generator | None = None,
    gamma: float = 0.8,
    lam: float = 0.95,
    deterministic: bool = False,
    aggregator: Aggregator = consensus_aggregator,
) -> RolloutBatch:
    p = params_old
    cfg = p.cfg
    n, d_m = env_cfg.n_agents, cfg.d_m
    if cfg.n_agents != n:
        raise ValueError("network and environment disagree on the number of agents")
    state = env.reset(env_cfg, seed)
    records = [comm.TriggerRecord() for _ in range(n)]
    counter = comm.VolumeCounter()
    log = comm.TriggerLog()
    m = torch.zeros(n, d_m, dtype=DTYPE)
    hidden = torch.zeros(n, d_m, dtype=DTYPE)
    e_prev = torch.zeros(n, cfg.est_dim, dtype=DTYPE)
    zero_obs = np.zeros(env_cfg.obs_dim)
    steps: dict[str, list] = {k: [] for k in RolloutBatch.__dataclass_fields__}
    rewards, env_actions = [], []

    for t in range(env_cfg.episode_len):
        observations = env.observe_all(state, env_cfg)
        obs_np = np.stack([o.flat() for o in observations])
        order = np.stack([o.order for o in observations])
        held_np = np.stack([r.held_obs if r.held_obs is not None else zero_obs for r in records])
        obs = torch.from_numpy(obs_np / cfg.input_scale)
        held = torch.from_numpy(held_np / cfg.input_scale)

        kappa = nets.trigger_score(obs, held, e_prev, p.psi_T)
        g = comm.threshold(t, trig_cfg)
        valid = np.array([comm.trigger_decision(float(k), t, trig_cfg) for k in kappa])
        for i in range(n):
            log.record(t, i, float(kappa[i]), g, bool(valid[i]))
            records[i] = comm.zoh_update(records[i], obs_np[i], bool(valid[i]), t)

        adj = comm.build_adjacency(state.positions, env_cfg.comm_range)
        frame = comm.route(m.numpy(), valid, adj, order)
        present = order >= 0
        src = np.where(present, order, np.arange(n)[:, None])
        rel = np.where(present[..., None], state.positions[src] - state.positions[:, None, :], 0.0)
        received = torch.from_numpy(frame.received)
        rel_t = torch.from_numpy(rel)
        present_t = torch.from_numpy(present)

        self_embed, hidden = nets.memory_embed(m, obs, hidden, p.psi_M)
        E = nets.assemble_embedding(self_embed, received, rel_t, present_t, p.psi_D)
        h = aggregator(E, p)
        e_hat = nets.estimate_global(h, p.psi_E)
        m_next = nets.next_message(obs, h, p.theta_O, p.theta_W)
        mu = nets.policy_mean(m_next, p.theta_E, cfg.accel_max)
        if deterministic:
            raw = mu
        else:
            raw = mu + sigma * torch.randn(mu.shape, generator=generator, dtype=DTYPE)
        logp = nets.gaussian_log_prob(raw, mu, sigma)
        u = raw.clamp(-cfg.accel_max, cfg.accel_max)

        o_g = torch.from_numpy(env.global_observe(state) / cfg.input_scale)
        s = torch.cat([o_g, m.reshape(-1)])
        value = nets.critic_value(s, p.phi)

        # consensus counts only agents that actually heard from a neighbour
        heard = frame.heard_neighbor()
        counter = comm.account(frame, counter, d_m, cfg.consensus_dim, int(heard.sum()))

        state, reward, _ = env.step(state, u.numpy(), int(valid.sum()), env_cfg)
        rewards.append(reward)
        env_actions.append(u.numpy().copy())
        for key, val in (
            ("obs", obs), ("obs_held", held), ("e_prev", e_prev), ("m_self", m),
            ("received", received), ("rel_pos", rel_t), ("present", present_t),
            ("actions", raw), ("old_logp", logp), ("kappa", kappa),
            ("valid", torch.from_numpy(valid)), ("e_hat", e_hat), ("h", h),
            ("o_g", o_g), ("global_state", s), ("values", value),
        ):
            steps[key].append(val)
        e_prev = e_hat
        m = m_next

    values = torch.stack(steps["values"])
    rewards_np = np.asarray(rewards)
    adv = gae(rewards_np, np.append(values.numpy(), 0.0), gamma, lam)
    tensors = {
        k: torch.stack(v) for k, v in steps.items() if v and k not in ("values",)
    }
    return RolloutBatch(
        **tensors,
        values=values,
        rewards=rewards_np,
        advantages=adv,
        returns=adv + values.numpy(),
        env_actions=np.stack(env_actions),
        seed=seed,
        message_volume=counter.message_volume,
        consensus_volume=counter.consensus_volume,
        trigger_log=log,
    )


def replay_rewards(env_cfg: env.EnvConfig, batch: RolloutBatch) -> np.ndarray:
    """Re-run the recorded actions and trigger counts through a fresh environment."""
    state = env.reset(env_cfg, batch.seed)
    out = []
    for t in range(batch.T):
        state, r, _ = env.step(state, batch.env_actions[t], int(batch.valid[t].sum()), env_cfg)
        out.append(r)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# Re-evaluation under live parameters


@dataclass
class Evaluation:
    logp: torch.Tensor  # (T, N)
    e_hat: torch.Tensor  # (T, N, 4N)
    h: torch.Tensor  # (T, N, d_m)
    kappa: torch.Tensor  # (T, N)
    values: torch.Tensor  # (T,)


def evaluate(
    params: ParamSet, batch: RolloutBatch, sigma: float, aggregator: Aggregator = consensus_aggregator
) -> Evaluation:
    """Recompute policy, estimates, trigger scores and values from recorded local states.

    The recurrent memory is replayed from the start of the episode, so the
    first evaluation after cloning reproduces the rollout exactly.
    """
    cfg = params.cfg
    T, N = batch.valid.shape
    hidden = torch.zeros(N, cfg.d_m, dtype=DTYPE)
    embeds = []
    for t in range(T):
        out, hidden = nets.memory_embed(batch.m_self[t], batch.obs[t], hidden, params.psi_M)
        embeds.append(out)
    self_embed = torch.stack(embeds).reshape(T * N, cfg.d_m)
    flat = lambda x: x.reshape(T * N, *x.shape[2:])  # noqa: E731
    E = nets.assemble_embedding(
        self_embed, flat(batch.received), flat(batch.rel_pos), flat(batch.present), params.psi_D
    )
    h = aggregator(E, params)
    e_hat = nets.estimate_global(h, params.psi_E)
    obs = flat(batch.obs)
    m_next = nets.next_message(obs, h, params.theta_O, params.theta_W)
    mu = nets.policy_mean(m_next, params.theta_E, cfg.accel_max)
    logp = nets.gaussian_log_prob(flat(batch.actions), mu, sigma)
    kappa = nets.trigger_score(obs, flat(batch.obs_held), flat(batch.e_prev), params.psi_T)
    values = nets.critic_value(batch.global_state, params.phi)
    return Evaluation(
        logp=logp.reshape(T, N),
        e_hat=e_hat.reshape(T, N, -1),
        h=h.reshape(T, N, -1),
        kappa=kappa.reshape(T, N),
        values=values,
    )


@dataclass
class LossBreakdown:
    total: torch.Tensor
    j_mappo: float
    actor: float
    value: float
    entropy: float
    ce: float
    etm: float
    gib_match: float
    gib_compress: float
    gib: float
    ratio_mean: float

    def as_row(self) -> dict:
        row = {f: float(getattr(self, f)) for f in self.__dataclass_fields__ if f != "total"}
        row["total"] = float(self.total.detach())
        return row


def composite_loss(
    ev: Evaluation,
    batches: list[RolloutBatch],
    sigma: float,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    index: torch.Tensor | None = None,
    epoch: int | None = None,
) -> LossBreakdown:
    """Composite loss over concatenated episodes; ``index`` selects agent-records.

    ``epoch`` gates the GIB weight (see ``LossConfig.gib_start_epoch``);
    ``None`` always applies it.
    """
    N = batches[0].valid.shape[1]
    adv_t = torch.from_numpy(np.concatenate([b.advantages for b in batches]))
    v_old = torch.cat([b.values for b in batches])
    old_logp = torch.cat([b.old_logp for b in batches]).reshape(-1)
    o_g = torch.cat([b.o_g for b in batches])
    adv = adv_t.unsqueeze(1).expand(-1, N).reshape(-1)
    if train_cfg.normalize_advantages and adv.numel() > 1:
        adv = normalize(adv)
    o_g_rows = o_g.unsqueeze(1).expand(-1, N, -1).reshape(-1, o_g.shape[-1])
    logp = ev.logp.reshape(-1)
    e_hat = ev.e_hat.reshape(len(logp), -1)
    h = ev.h.reshape(len(logp), -1)
    kappa = ev.kappa.reshape(-1)
    if index is not None:
        logp, old_logp, adv = logp[index], old_logp[index], adv[index]
        e_hat, h, kappa, o_g_rows = e_hat[index], h[index], kappa[index], o_g_rows[index]
    actor = actor_objective(logp, old_logp, adv, train_cfg.clip_eps)
    value = value_objective(ev.values, v_old, adv_t)
    entropy = nets.gaussian_entropy(sigma)
    j = mappo_objective(actor, value, entropy, loss_cfg.alpha)
    ce = ce_loss(e_hat, o_g_rows)
    etm = etm_loss(kappa)
    match, compress = gib_terms(o_g_rows, e_hat, h, loss_cfg)
    gib = match + loss_cfg.eta * compress
    total = total_loss(j, ce, etm, gib, replace(loss_cfg, rho=loss_cfg.rho_at(epoch)))
    return LossBreakdown(
        total=total,
        j_mappo=j.item(),
        actor=actor.item(),
        value=value.item(),
        entropy=entropy,
        ce=ce.item(),
        etm=etm.item(),
        gib_match=match.item(),
        gib_compress=compress.item(),
        gib=gib.item(),
        ratio_mean=torch.exp(logp - old_logp).mean().item(),
    )


# ---------------------------------------------------------------------------
# Trainer


def episode_seed(seed: int, epoch: int, episode: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, episode]).generate_state(1)[0])


class Trainer:
    def __init__(
        self,
        env_cfg: env.EnvConfig,
        net_cfg: NetConfig,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig,
        trig_cfg: comm.TriggerConfig,
        aggregator: Aggregator = consensus_aggregator,
    ):
        if net_cfg.n_agents != env_cfg.n_agents:
            raise ValueError("net_cfg.n_agents must equal env_cfg.n_agents")
        self.env_cfg = env_cfg
        self.net_cfg = net_cfg
        self.train_cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.trig_cfg = trig_cfg
        self.aggregator = aggregator
        self.params = nets.build_params(net_cfg, train_cfg.seed)
        self.optimizer = torch.optim.Adam(self.params.parameters(), lr=train_cfg.lr)
        self.generator = torch.Generator().manual_seed(train_cfg.seed)
        self.epoch = 0
        self.last_old: ParamSet | None = None
        self.last_batches: list[RolloutBatch] = []

    @property
    def sigma(self) -> float:
        return self.net_cfg.sigma(self.epoch)

    def rollout(self, params: ParamSet, episode: int = 0) -> RolloutBatch:
        return collect_rollout(
            self.env_cfg,
            params,
            self.trig_cfg,
            self.sigma,
            episode_seed(self.train_cfg.seed, self.epoch, episode),
            self.generator,
            gamma=self.train_cfg.gamma,
            lam=self.train_cfg.lam,
            aggregator=self.aggregator,
        )

    def update(self, batches: list[RolloutBatch]) -> LossBreakdown:
        """Run the PPO passes on fixed data; returns the first pass's loss breakdown."""
        cfg = self.train_cfg
        sigma = self.sigma
        n_rec = sum(b.n_records for b in batches)
        mb = cfg.minibatch or n_rec
        first: LossBreakdown | None = None
        for _ in range(cfg.ppo_epochs):
            if mb >= n_rec:
                chunks = [None]
            else:
                perm = torch.randperm(n_rec, generator=self.generator)
                chunks = [perm[i : i + mb] for i in range(0, n_rec, mb)]
            for index in chunks:
                evs = [evaluate(self.params, b, sigma, self.aggregator) for b in batches]
                ev = _concat_evaluations(evs)
                loss = composite_loss(ev, batches, sigma, cfg, self.loss_cfg, index, self.epoch)
                if not torch.isfinite(loss.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {self.epoch}: {loss.as_row()}"
                    )
                if first is None:
                    first = loss
                self.optimizer.zero_grad()
                loss.total.backward()
                if cfg.max_grad_norm is not None:
                    torch.nn.utils.clip_grad_norm_(self.params.parameters(), cfg.max_grad_norm)
                self.optimizer.step()
        assert first is not None
        return first

    def train_epoch(self) -> dict:
        old = self.params.clone_frozen()
        batches = [self.rollout(old, k) for k in range(self.train_cfg.episodes_per_epoch)]
        loss = self.update(batches)
        self.last_old, self.last_batches = old, batches
        h = torch.cat([b.h.reshape(-1, b.h.shape[-1]) for b in batches])
        o_g = torch.cat([b.o_g.unsqueeze(1).expand(-1, b.h.shape[1], -1) for b in batches])
        e_hat = torch.cat([b.e_hat for b in batches])
        o_g = o_g.reshape(-1, o_g.shape[-1])
        e_hat = e_hat.reshape(-1, e_hat.shape[-1])
        row = {
            "epoch": self.epoch,
            "sigma": self.sigma,
            "episode_return": float(np.mean([b.rewards.sum() for b in batches])),
            "mean_reward": float(np.mean([b.rewards.mean() for b in batches])),
            "message_volume": float(sum(b.message_volume for b in batches)),
            "consensus_volume": float(sum(b.consensus_volume for b in batches)),
            "n_triggers": int(sum(int(b.valid.sum()) for b in batches)),
            **loss.as_row(),
            "h_kl": float(kl_to_standard_normal(batch_moments(h, self.loss_cfg.sigma_floor))),
            "gib_alternate_layout": gib_alternate_layout(o_g, e_hat, h, self.loss_cfg),
            "bound_condition_log": bound_condition_log(o_g, e_hat, self.loss_cfg.sigma_floor),
        }
        for k, v in row.items():
            if isinstance(v, float) and not math.isfinite(v):
                row[k] = None
        self.epoch += 1
        return row

    def train(self, epochs: int | None = None, metrics_path: str | Path | None = None,
              checkpoint_dir: str | Path | None = None) -> list[dict]:
        rows = []
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            for _ in range(epochs if epochs is not None else self.train_cfg.epochs):
                row = self.train_epoch()
                rows.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
                every = self.train_cfg.checkpoint_every
                if checkpoint_dir and every and self.epoch % every == 0:
                    self.save(Path(checkpoint_dir) / f"ckpt_{self.epoch:05d}.pt")
        finally:
            if fh:
                fh.close()
        return rows

    def save(self, path: str | Path) -> None:
        nets.save_checkpoint(
            path,
            self.params,
            optimizer=self.optimizer.state_dict(),
            epoch=self.epoch,
            generator=self.generator.get_state(),
            configs={
                "env": asdict(self.env_cfg),
                "train": asdict(self.train_cfg),
                "loss": asdict(self.loss_cfg),
                "trigger": asdict(self.trig_cfg),
            },
        )

    def load(self, path: str | Path) -> None:
        params, payload = nets.load_checkpoint(path)
        self.params.load_state_dict(params.state_dict())
        self.optimizer.load_state_dict(payload["optimizer"])
        self.epoch = payload["epoch"]
        self.generator.set_state(payload["generator"])


def _concat_evaluations(evs: list[Evaluation]) -> Evaluation:
    if len(evs) == 1:
        return evs[0]
    return Evaluation(
        logp=torch.cat([e.logp for e in evs]),
        e_hat=torch.cat([e.e_hat for e in evs]),
        h=torch.cat([e.h for e in evs]),
        kappa=torch.cat([e.kappa for e in evs]),
        values=torch.cat([e.values for e in evs]),
    )
