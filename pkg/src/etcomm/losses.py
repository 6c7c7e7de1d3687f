"""Loss terms: consensus reconstruction, trigger sparsity and the Gaussian GIB bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossConfig:
    eta: float = 0.1
    varrho: float = 0.1
    rho: float = 0.1
    alpha: float = 0.01
    sigma_floor: float = 1e-6
    # epochs trained on the reconstruction loss alone before the GIB term is switched on
    gib_start_epoch: int = 20

    def __post_init__(self):
        for name in ("eta", "varrho", "rho", "alpha", "gib_start_epoch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")

    def rho_at(self, epoch: int | None) -> float:
        if epoch is not None and epoch < self.gib_start_epoch:
            return 0.0
        return self.rho


@dataclass
class GaussianMoments:
    mu: torch.Tensor
    sigma: torch.Tensor

    @classmethod
    def standard(cls, k: int, dtype=torch.float64) -> "GaussianMoments":
        return cls(torch.zeros(k, dtype=dtype), torch.ones(k, dtype=dtype))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def ce_loss(e_hat: torch.Tensor, o_g: torch.Tensor) -> torch.Tensor:
    _same_shape(e_hat, o_g, "ce_loss")
    return ((o_g - e_hat) ** 2).sum(-1).mean()


def etm_loss(kappa: torch.Tensor) -> torch.Tensor:
    return (kappa**2).mean()


def batch_moments(samples: torch.Tensor, sigma_floor: float = 1e-6) -> GaussianMoments:
    """Per-dimension mean and (biased) standard deviation of a (B, K) batch."""
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError(f"need a (B, K) batch with B >= 2, got {tuple(samples.shape)}")
    mu = samples.mean(0)
    var = ((samples - mu) ** 2).mean(0)
    # clamp before the sqrt so a zero-variance column has a finite gradient
    sigma = torch.sqrt(var.clamp_min(sigma_floor**2))
    return GaussianMoments(mu, sigma)


def gaussian_kl(m: GaussianMoments, l: GaussianMoments) -> torch.Tensor:
    """KL(N(mu_m, diag sigma_m^2) || N(mu_l, diag sigma_l^2))."""
    _same_shape(m.mu, l.mu, "gaussian_kl")
    _same_shape(m.sigma, l.sigma, "gaussian_kl")
    terms = (
        torch.log(l.sigma / m.sigma)
        + (m.sigma**2 + (m.mu - l.mu) ** 2) / (2 * l.sigma**2)
        - 0.5
    )
    return terms.sum()


def kl_to_standard_normal(m: GaussianMoments) -> torch.Tensor:
    return (-torch.log(m.sigma) + (m.sigma**2 + m.mu**2) / 2 - 0.5).sum()


def gib_terms(
    o_g: torch.Tensor, e_hat: torch.Tensor, h: torch.Tensor, cfg: LossConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """(distribution-matching KL, compression KL) before any weighting."""
    _same_shape(o_g, e_hat, "gib_loss")
    m_obs = batch_moments(o_g, cfg.sigma_floor)
    m_est = batch_moments(e_hat, cfg.sigma_floor)
    m_h = batch_moments(h, cfg.sigma_floor)
    return gaussian_kl(m_obs, m_est), kl_to_standard_normal(m_h)


def gib_loss(o_g: torch.Tensor, e_hat: torch.Tensor, h: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    match, compress = gib_terms(o_g, e_hat, h, cfg)
    return match + cfg.eta * compress


def gib_alternate_layout(o_g: torch.Tensor, e_hat: torch.Tensor, h: torch.Tensor, cfg: LossConfig) -> float:
    """The bound with an alternative sign and constant layout.

    Relative to ``gib_loss`` at eta=1: the log-ratio of the matching term is
    flipped, the compression sum uses ``+log sigma``, neither sum carries the
    per-dimension -1/2, and a trailing -1 is added.  Logged for comparison,
    never optimised.
    """
    m_obs = batch_moments(o_g, cfg.sigma_floor)
    m_est = batch_moments(e_hat, cfg.sigma_floor)
    m_h = batch_moments(h, cfg.sigma_floor)
    first = (
        torch.log(m_obs.sigma / m_est.sigma)
        + (m_obs.sigma**2 + (m_obs.mu - m_est.mu) ** 2) / (2 * m_est.sigma**2)
    ).sum()
    second = (torch.log(m_h.sigma) + (m_h.sigma**2 + m_h.mu**2) / 2).sum()
    return float(first + second - 1.0)


def _diag_log_density(x: torch.Tensor, m: GaussianMoments) -> torch.Tensor:
    z = (x - m.mu) / m.sigma
    k = x.shape[-1]
    return -0.5 * (z**2).sum(-1) - torch.log(m.sigma).sum() - 0.5 * k * math.log(2 * math.pi)


def bound_condition_log(o_g: torch.Tensor, e_hat: torch.Tensor, sigma_floor: float = 1e-6) -> float:
    """log E_{p(o_g)p(e)}[p(e) / p(o_g)] under the batch Gaussian fits.

    The variational bound's second step needs this expectation below one,
    i.e. a negative return value.  Diagnostic only.
    """
    m_obs = batch_moments(o_g, sigma_floor)
    m_est = batch_moments(e_hat, sigma_floor)
    log_num = _diag_log_density(e_hat, m_est)
    log_den = _diag_log_density(o_g, m_obs)
    n = math.log(len(o_g))
    return float(torch.logsumexp(log_num, 0) - n + torch.logsumexp(-log_den, 0) - n)


def total_loss(
    j_mappo: torch.Tensor | float,
    ce: torch.Tensor | float,
    etm: torch.Tensor | float,
    gib: torch.Tensor | float,
    cfg: LossConfig,
):
    return -j_mappo + ce + cfg.varrho * etm + cfg.rho * gib
