"""Training objectives: reconstruction, Gaussian KL, the decomposed domain KL
(index-code MI, total correlation, dimension-wise KL), exemplar loss and the
joint objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import torch

from .errors import TrainingError
from .model import GaussianLatent

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EstimatorContext:
    dataset_size: int  # N: training samples over all domains
    batch_size: int  # M

    def __post_init__(self):
        if not self.dataset_size >= self.batch_size >= 2:
            raise ValueError(f"need N >= M >= 2, got N={self.dataset_size}, M={self.batch_size}")


@dataclass
class LossBreakdown:
    """Per-batch means in nats. ``kl_domain`` is the domain-branch penalty
    actually applied (``mi + beta*tc + xi*dimkl``, or the closed-form KL when
    disentanglement is switched off)."""

    recon: float = 0.0
    kl_sample: float = 0.0
    mi_domain: float = 0.0
    tc_domain: float = 0.0
    dimkl_domain: float = 0.0
    kl_domain: float = 0.0
    vae: float = 0.0
    exemplar: float = 0.0
    source_ce: float = 0.0
    target_entropy: float = 0.0
    pseudo_ce: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).flatten(1).sum(1).mean()


def gaussian_kl(latent: GaussianLatent) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)), summed over dims, batch mean."""
    mu, ls = latent.mean, latent.log_std
    return 0.5 * (mu.pow(2) + (2 * ls).exp() - 2 * ls - 1).sum(-1).mean()


def gaussian_log_density(z, mean, log_std):
    return -0.5 * ((z - mean) * torch.exp(-log_std)).pow(2) - log_std - 0.5 * LOG_2PI


def domain_kl_decomposition(
    latent: GaussianLatent, ctx: EstimatorContext
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Minibatch estimates of (index-code MI, total correlation, dimension-wise KL).

    The aggregate posterior q(z) = 1/N sum_n q(z|n) is estimated at each
    sampled ``z_i`` from the batch with stratified weights: the row's own
    posterior gets weight 1/N, every other row (N-1)/(N(M-1)). Both the joint
    and the per-dimension marginals use the same weights, so the three terms
    sum to the batch mean of log q(z|n) - log p(z) exactly.
    """
    z, mu, ls = latent.value, latent.mean, latent.log_std
    m = z.shape[0]
    if m < 2:
        raise ValueError(f"decomposition needs a batch of at least 2, got {m}")
    n = ctx.dataset_size
    if n < m:
        raise ValueError(f"dataset size {n} smaller than batch {m}")

    # log q(z_i,k | j): (M, M, K)
    log_q = gaussian_log_density(z[:, None, :], mu[None, :, :], ls[None, :, :])
    log_w = torch.full((m, m), math.log((n - 1) / (n * (m - 1))) if n > 1 else 0.0,
                       dtype=z.dtype, device=z.device)
    log_w.fill_diagonal_(-math.log(n))

    log_qz_cond = log_q.diagonal(dim1=0, dim2=1).sum(0)  # log q(z_i | i)
    log_qz = torch.logsumexp(log_q.sum(2) + log_w, dim=1)
    log_qz_marg = torch.logsumexp(log_q + log_w[:, :, None], dim=1)  # (M, K)
    log_pz = -0.5 * z.pow(2) - 0.5 * LOG_2PI

    mi = (log_qz_cond - log_qz).mean()
    tc = (log_qz - log_qz_marg.sum(1)).mean()
    dimkl = (log_qz_marg - log_pz).sum(1).mean()
    return mi, tc, dimkl


def _domain_penalty(z_d, beta, xi, ctx, disentangle):
    if disentangle and z_d.value.shape[0] >= 2:
        mi, tc, dimkl = domain_kl_decomposition(z_d, ctx)
        return mi + beta * tc + xi * dimkl, (mi, tc, dimkl)
    # single-row batches and the "w/o disent" ablation use the closed form
    zero = z_d.value.new_zeros(())
    return gaussian_kl(z_d), (zero, zero, zero)


def vae_terms(x, x_hat, z_s: GaussianLatent, z_d: GaussianLatent, beta: float, xi: float,
              ctx: EstimatorContext, disentangle: bool = True) -> dict[str, torch.Tensor]:
    recon = reconstruction_loss(x, x_hat)
    kl_s = gaussian_kl(z_s)
    kl_d, (mi, tc, dimkl) = _domain_penalty(z_d, beta, xi, ctx, disentangle)
    return {
        "recon": recon, "kl_sample": kl_s, "mi": mi, "tc": tc, "dimkl": dimkl,
        "kl_domain": kl_d, "total": recon + kl_s + kl_d,
    }


def vae_loss(x, x_hat, z_s, z_d, beta: float, xi: float, ctx: EstimatorContext,
             disentangle: bool = True) -> torch.Tensor:
    """Reconstruction + sample-branch KL + weighted domain-branch decomposition."""
    return vae_terms(x, x_hat, z_s, z_d, beta, xi, ctx, disentangle)["total"]


def exemplar_loss(v, v_hat, z_s: GaussianLatent, z_dprime: GaussianLatent, beta: float, xi: float,
                  ctx: EstimatorContext, mask: torch.Tensor | None = None,
                  disentangle: bool = True) -> tuple[torch.Tensor, bool]:
    """VAE-form loss with the exemplar as reconstruction target.

    Rows where ``mask`` is False (no exemplar resolved) are dropped. Returns
    ``(loss, empty)``; an empty effective batch gives a zero loss.
    """
    if mask is not None:
        if not bool(mask.any()):
            return v_hat.new_zeros(()), True
        v, v_hat, z_s, z_dprime = v[mask], v_hat[mask], z_s[mask], z_dprime[mask]
    elif v.shape[0] == 0:
        return v_hat.new_zeros(()), True
    return vae_loss(v, v_hat, z_s, z_dprime, beta, xi, ctx, disentangle), False


WEIGHTED_PARTS = ("source_ce", "target_entropy", "vae", "exemplar", "pseudo_ce")


def combine_objective(parts: Mapping[str, torch.Tensor | float], lam: float, gamma: float,
                      alpha: float):
    """lam*L_s + L_t + gamma*L_vae + alpha*L_exe + L_pseudo."""
    for name in WEIGHTED_PARTS:
        val = parts[name]
        finite = torch.isfinite(val).all() if torch.is_tensor(val) else math.isfinite(val)
        if not finite:
            raise TrainingError(f"non-finite loss component: {name}")
    return (lam * parts["source_ce"] + parts["target_entropy"] + gamma * parts["vae"]
            + alpha * parts["exemplar"] + parts["pseudo_ce"])
