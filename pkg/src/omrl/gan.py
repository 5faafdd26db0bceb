"""Conditional GAN over dataset actions and the entropy-based encoder regularizer.

The generator produces actions from (state, task representation, noise); the
discriminator scores (action, state, task representation) triples. Generated
actions are assumed Gaussian: their sample covariance yields a log-det entropy
estimate, and the encoder-facing loss is its negation (constants dropped),
so minimizing it maximizes the entropy of the imitated behavior policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .envs import ACTION_DIM, STATE_DIM
from .nets import build_mlp

NOISE_DIM = 20
GENERATOR_HIDDEN = (200, 200, 200)
DISCRIMINATOR_HIDDEN = (256, 256)
PROB_CLAMP = 1e-7
COV_JITTER = 1e-5


class ComputationError(ArithmeticError):
    """Raised when a numerical routine cannot produce a finite result."""


class Generator(nn.Module):
    """Maps (state, z, noise) to a tanh-bounded action."""

    def __init__(self, latent_dim: int, noise_dim: int = NOISE_DIM,
                 hidden: tuple[int, ...] = GENERATOR_HIDDEN):
        super().__init__()
        self.latent_dim = latent_dim
        self.noise_dim = noise_dim
        self.net = build_mlp(STATE_DIM + latent_dim + noise_dim, hidden, ACTION_DIM)

    def forward(self, states: torch.Tensor, z: torch.Tensor,
                noise: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(torch.cat([states, z, noise], dim=-1)))


class Discriminator(nn.Module):
    """Scores (action, state, z) with the probability the action is real."""

    def __init__(self, latent_dim: int, hidden: tuple[int, ...] = DISCRIMINATOR_HIDDEN):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = build_mlp(ACTION_DIM + STATE_DIM + latent_dim, hidden, 1)

    def forward(self, actions: torch.Tensor, states: torch.Tensor,
                z: torch.Tensor) -> torch.Tensor:
        logits = self.net(torch.cat([actions, states, z], dim=-1)).squeeze(-1)
        return torch.sigmoid(logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


@dataclass
class CovarianceEstimate:
    """Population covariance of an action batch plus the stabilizing jitter."""

    sigma: torch.Tensor  # (k, k), symmetric
    sample_count: int
    jitter: float = COV_JITTER


def generate_actions(generator: Generator, states: torch.Tensor, z: torch.Tensor,
                     noise: torch.Tensor) -> torch.Tensor:
    """One action per state row; deterministic given (parameters, inputs, noise)."""
    if states.shape[0] != z.shape[0] or states.shape[0] != noise.shape[0]:
        raise ValueError("states, z, and noise must have matching batch sizes")
    if z.shape[-1] != generator.latent_dim or noise.shape[-1] != generator.noise_dim:
        raise ValueError("z or noise dimensionality does not match the generator")
    return generator(states, z, noise)


def discriminator_loss(discriminator, real_actions, fake_actions, states, z):
    """Binary cross-entropy pushing D up on real actions and down on fakes."""
    p_real = discriminator(real_actions, states, z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_fake = discriminator(fake_actions, states, z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (-torch.log(p_real) - torch.log(1.0 - p_fake)).mean()


def generator_loss(discriminator, fake_actions, states, z):
    """Non-saturating generator objective: minimize -log D(fake)."""
    p_fake = discriminator(fake_actions, states, z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (-torch.log(p_fake)).mean()


def sample_covariance(action_batch: torch.Tensor,
                      jitter: float = COV_JITTER) -> CovarianceEstimate:
    """Population (1/N) covariance of the batch; jitter recorded but not added."""
    actions = torch.as_tensor(action_batch)
    if actions.ndim != 2 or actions.shape[0] < 2:
        raise ValueError("covariance needs a 2-D batch with at least 2 rows")
    centered = actions - actions.mean(dim=0, keepdim=True)
    sigma = centered.T @ centered / actions.shape[0]
    return CovarianceEstimate(sigma=sigma, sample_count=actions.shape[0], jitter=jitter)


def _jittered_logdet(sigma: torch.Tensor, jitter: float) -> torch.Tensor:
    k = sigma.shape[0]
    eye = torch.eye(k, dtype=sigma.dtype, device=sigma.device)
    try:
        chol = torch.linalg.cholesky(sigma + jitter * eye)
    except torch.linalg.LinAlgError as exc:
        raise ComputationError(
            "covariance not positive definite after jitter") from exc
    logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()
    if not torch.isfinite(logdet):
        raise ComputationError("log-determinant is not finite")
    return logdet


def entropy_estimate(cov: CovarianceEstimate) -> torch.Tensor:
    """Gaussian differential entropy 0.5*logdet(Sigma + jitter*I) + (k/2)log(2*pi*e)."""
    k = cov.sigma.shape[0]
    return 0.5 * _jittered_logdet(cov.sigma, cov.jitter) + 0.5 * k * math.log(2.0 * math.pi * math.e)


def mi_loss(action_batch: torch.Tensor, jitter: float = COV_JITTER) -> torch.Tensor:
    """Encoder-facing loss -0.5*logdet(Sigma + jitter*I); constants dropped."""
    cov = sample_covariance(action_batch, jitter)
    return -0.5 * _jittered_logdet(cov.sigma, cov.jitter)
