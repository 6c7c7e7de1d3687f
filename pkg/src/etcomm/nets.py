"""Learnable blocks of the consensus pipeline.

Every block is a small torch module living inside one :class:`ParamSet`
shared by all agents.  The free functions take the relevant sub-module
explicitly so each stage can be exercised (and gradient-checked) alone.
All tensors are float64.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    n_agents: int = 7
    obs_features: int = 5
    d_m: int = 32
    d_pe: int = 16
    n_heads: int = 4
    d_hidden: int = 64
    sigma_start: float = 0.5
    sigma_decay: float = 0.995
    sigma_min: float = 0.05
    accel_max: float = 0.5
    input_scale: float = 10.0  # metres; env observations are divided by it before any network

    def __post_init__(self):
        for name in ("n_agents", "obs_features", "d_m", "d_pe", "n_heads", "d_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if (self.d_m + self.d_pe) % self.n_heads:
            raise ValueError("d_m + d_pe must be divisible by n_heads")
        if self.sigma_start <= 0 or self.sigma_min <= 0 or not 0 < self.sigma_decay <= 1:
            raise ValueError("sigma schedule must stay positive")

    @property
    def obs_dim(self) -> int:
        return self.n_agents * self.obs_features

    @property
    def est_dim(self) -> int:
        return 4 * self.n_agents

    @property
    def consensus_dim(self) -> int:
        return self.d_m

    @property
    def d_embed(self) -> int:
        return self.d_m + self.d_pe

    @property
    def critic_dim(self) -> int:
        return self.est_dim + self.n_agents * self.d_m

    def sigma(self, epoch: int) -> float:
        return max(self.sigma_min, self.sigma_start * self.sigma_decay**epoch)


def mlp(d_in: int, d_hidden: int, d_out: int, depth: int = 1) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = d_in
    for _ in range(depth):
        layers += [nn.Linear(d, d_hidden, dtype=DTYPE), nn.Tanh()]
        d = d_hidden
    layers.append(nn.Linear(d, d_out, dtype=DTYPE))
    return nn.Sequential(*layers)


class PositionalWeights(nn.Module):
    def __init__(self, d_pe: int):
        super().__init__()
        self.w = nn.Parameter(torch.empty(d_pe, dtype=DTYPE))
        nn.init.uniform_(self.w, 0.0, 2.0)


class SelfAttention(nn.Module):
    """Multi-head self-attention whose self row is projected down to ``d_out``."""

    def __init__(self, d_embed: int, n_heads: int, d_out: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_embed, 3 * d_embed, dtype=DTYPE)
        self.out = nn.Linear(d_embed, d_embed, dtype=DTYPE)
        self.proj = nn.Linear(d_embed, d_out, dtype=DTYPE)

    def attend(self, E: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, N, D = E.shape
        H = self.n_heads
        q, k, v = self.qkv(E).view(B, N, 3, H, D // H).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // H)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, N, D)
        return self.out(out), weights


class ParamSet(nn.Module):
    """All learnable parameters: consensus blocks, encoders/executor and critic."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.psi_D = PositionalWeights(cfg.d_pe)
        self.psi_M = nn.GRUCell(cfg.d_m + cfg.obs_dim, cfg.d_m, dtype=DTYPE)
        self.psi_A = SelfAttention(cfg.d_embed, cfg.n_heads, cfg.d_m)
        self.psi_E = mlp(cfg.d_m, cfg.d_hidden, cfg.est_dim)
        self.psi_T = mlp(2 * cfg.obs_dim, cfg.d_hidden, cfg.est_dim)
        self.theta_O = mlp(cfg.obs_dim, cfg.d_hidden, cfg.d_m)
        self.theta_W = mlp(cfg.obs_dim, cfg.d_hidden, 1)
        self.theta_E = mlp(cfg.d_m, cfg.d_hidden, 2)
        self.phi = mlp(cfg.critic_dim, cfg.d_hidden, 1, depth=2)

    def clone_frozen(self) -> "ParamSet":
        old = copy.deepcopy(self)
        old.requires_grad_(False)
        return old


def build_params(cfg: NetConfig, seed: int) -> ParamSet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ParamSet(cfg)


def _check_last(x: torch.Tensor, size: int, what: str) -> None:
    if x.shape[-1] != size:
        raise ValueError(f"{what}: expected trailing dimension {size}, got {tuple(x.shape)}")


def positional_encode(p: torch.Tensor, psi_D: PositionalWeights) -> torch.Tensor:
    w = psi_D.w
    dist = torch.linalg.vector_norm(p, dim=-1, keepdim=True)
    return torch.cos(dist * w) / math.sqrt(w.shape[0])


def memory_embed(
    m_self: torch.Tensor, obs: torch.Tensor, hidden: torch.Tensor, psi_M: nn.GRUCell
) -> tuple[torch.Tensor, torch.Tensor]:
    """One gated recurrent step on ``[m_self || obs]``; the output is the new hidden state."""
    _check_last(m_self, psi_M.hidden_size, "m_self")
    _check_last(hidden, psi_M.hidden_size, "hidden")
    _check_last(obs, psi_M.input_size - psi_M.hidden_size, "obs")
    new_hidden = psi_M(torch.cat([m_self, obs], dim=-1), hidden)
    return new_hidden, new_hidden


def assemble_embedding(
    self_embed: torch.Tensor,
    received: torch.Tensor,
    rel_pos: torch.Tensor,
    present: torch.Tensor,
    psi_D: PositionalWeights,
) -> torch.Tensor:
    """Stack the per-slot rows ``[message || positional code]``.

    ``received`` is (B, N, d_m) with slot 0 ignored (replaced by ``self_embed``),
    ``rel_pos`` is (B, N, 2) neighbour offsets and ``present`` (B, N) marks
    occupied slots.  Empty slots give all-zero rows.
    """
    msgs = torch.cat([self_embed.unsqueeze(1), received[:, 1:]], dim=1)
    pe = positional_encode(rel_pos, psi_D)
    mask = present.to(DTYPE).unsqueeze(-1)
    return torch.cat([msgs * mask, pe * mask], dim=-1)


def aggregate(E: torch.Tensor, psi_A: SelfAttention) -> torch.Tensor:
    out, _ = psi_A.attend(E)
    return psi_A.proj(out[:, 0])


def estimate_global(h: torch.Tensor, psi_E: nn.Module) -> torch.Tensor:
    return psi_E(h)


def mixing_weight(obs: torch.Tensor, theta_W: nn.Module) -> torch.Tensor:
    return torch.sigmoid(theta_W(obs))


def next_message(
    obs: torch.Tensor, h: torch.Tensor, theta_O: nn.Module, theta_W: nn.Module
) -> torch.Tensor:
    return theta_O(obs) + mixing_weight(obs, theta_W) * h


def policy_mean(m_next: torch.Tensor, theta_E: nn.Module, accel_max: float) -> torch.Tensor:
    return accel_max * torch.tanh(theta_E(m_next))


def gaussian_log_prob(u: torch.Tensor, mu: torch.Tensor, sigma: float) -> torch.Tensor:
    """Log-density of an isotropic Gaussian, summed over the last axis."""
    k = u.shape[-1]
    sq = ((u - mu) ** 2).sum(-1)
    return -0.5 * sq / sigma**2 - k * math.log(sigma) - 0.5 * k * math.log(2 * math.pi)


def gaussian_entropy(sigma: float, k: int = 2) -> float:
    return 0.5 * k * (1.0 + math.log(2 * math.pi * sigma**2))


def act(
    m_next: torch.Tensor,
    theta_E: nn.Module,
    sigma: float,
    generator: torch.Generator | None,
    accel_max: float,
    deterministic: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Sample a bounded acceleration.

    The log-probability is that of the unclamped Gaussian sample.  With
    ``deterministic`` the mean is returned and the log-probability is the
    density at the mean.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = policy_mean(m_next, theta_E, accel_max)
    if deterministic:
        raw = mu
    else:
        noise = torch.randn(mu.shape, generator=generator, dtype=DTYPE)
        raw = mu + sigma * noise
    logp = gaussian_log_prob(raw, mu, sigma)
    return raw.clamp(-accel_max, accel_max), logp, mu


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    ok = (na >= eps) & (nb >= eps)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    cos = (a * b).sum(-1) / denom
    return torch.where(ok, cos.clamp(-1.0, 1.0), torch.zeros_like(cos))


def trigger_prediction(obs_now: torch.Tensor, obs_held: torch.Tensor, psi_T: nn.Module) -> torch.Tensor:
    return psi_T(torch.cat([obs_now, obs_held], dim=-1))


def trigger_score(
    obs_now: torch.Tensor, obs_held: torch.Tensor, e_hat_prev: torch.Tensor, psi_T: nn.Module
) -> torch.Tensor:
    return cosine_similarity(trigger_prediction(obs_now, obs_held, psi_T), e_hat_prev)


def critic_value(global_state: torch.Tensor, phi: nn.Sequential) -> torch.Tensor:
    _check_last(global_state, phi[0].in_features, "critic input")
    return phi(global_state).squeeze(-1)


def save_checkpoint(path: str | Path, params: ParamSet, **extra) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": asdict(params.cfg),
        "params": params.state_dict(),
        **extra,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    params = ParamSet(NetConfig(**payload["net_config"]))
    params.load_state_dict(payload["params"])
    return params, payload
