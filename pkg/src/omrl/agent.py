"""Behavior-regularized actor-critic conditioned on task representations.

The critic is trained by TD regression against an EMA target network; the
actor maximizes Q while paying a closed-form KL penalty toward a diagonal
Gaussian behavior model that is fit by maximum likelihood on dataset actions.
Task representations enter all networks as constant inputs: no RL gradient
reaches the context encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .envs import ACTION_DIM, STATE_DIM
from .nets import as_tensor, build_mlp

AGENT_HIDDEN = (256, 256, 256)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class AgentConfig:
    alpha: float = 50.0   # behavior-regularization weight
    gamma: float = 0.99
    tau: float = 0.005

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


class Critic(nn.Module):
    def __init__(self, latent_dim: int, hidden: tuple[int, ...] = AGENT_HIDDEN):
        super().__init__()
        self.net = build_mlp(STATE_DIM + latent_dim + ACTION_DIM, hidden, 1)

    def forward(self, states, z, actions) -> torch.Tensor:
        return self.net(torch.cat([states, z, actions], dim=-1)).squeeze(-1)


class _GaussianHead(nn.Module):
    """MLP trunk producing a diagonal Gaussian (mean, std) over actions."""

    def __init__(self, latent_dim: int, hidden: tuple[int, ...] = AGENT_HIDDEN):
        super().__init__()
        self.net = build_mlp(STATE_DIM + latent_dim, hidden, 2 * ACTION_DIM)

    def head(self, states, z) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(torch.cat([states, z], dim=-1))
        mean, log_std = out.chunk(2, dim=-1)
        log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std.exp()


class Actor(_GaussianHead):
    """Policy head; actions are tanh-squashed samples of the pre-squash Gaussian."""

    def sample(self, states, z, noise=None, generator=None):
        """Reparameterized squashed sample; returns (action, pre_squash)."""
        mean, std = self.head(states, z)
        if noise is None:
            noise = torch.randn(mean.shape, dtype=mean.dtype, generator=generator)
        pre_squash = mean + std * noise
        return torch.tanh(pre_squash), pre_squash

    def deterministic_action(self, states, z) -> torch.Tensor:
        mean, _ = self.head(states, z)
        return torch.tanh(mean)


class BehaviorModel(_GaussianHead):
    """Diagonal-Gaussian model of dataset actions, fit by maximum likelihood."""


def behavior_nll(behavior: BehaviorModel, states, z, actions) -> torch.Tensor:
    """Mean Gaussian negative log-likelihood of the batch actions."""
    mean, std = behavior.head(states, z)
    dist = torch.distributions.Normal(mean, std)
    return -dist.log_prob(actions).sum(dim=-1).mean()


def kl_diag_gaussian(p_mean, p_std, q_mean, q_std) -> torch.Tensor:
    """Closed-form KL(p || q) for diagonal Gaussians, summed over dimensions."""
    p_mean, p_std = torch.as_tensor(p_mean), torch.as_tensor(p_std)
    q_mean, q_std = torch.as_tensor(q_mean), torch.as_tensor(q_std)
    if torch.any(p_std <= 0) or torch.any(q_std <= 0):
        raise ValueError("standard deviations must be positive")
    var_ratio = (p_std / q_std).pow(2)
    mean_term = ((p_mean - q_mean) / q_std).pow(2)
    return 0.5 * (var_ratio + mean_term - 1.0 - var_ratio.log()).sum(dim=-1)


def critic_loss(critic: Critic, target_critic: Critic, actor: Actor,
                states, actions, rewards, next_states, dones, z,
                config: AgentConfig, noise=None, generator=None) -> torch.Tensor:
    """TD regression toward r + gamma * (1 - done) * Q_target(s', a', z).

    The next action is sampled from the current actor; the target carries no
    gradient. `z` is a constant input here: encoder gradients never flow
    through RL losses.
    """
    with torch.no_grad():
        next_actions, _ = actor.sample(next_states, z, noise=noise, generator=generator)
        target_q = target_critic(next_states, z, next_actions)
        y = rewards + config.gamma * (1.0 - dones) * target_q
    q = critic(states, z, actions)
    return (q - y).pow(2).mean()


def actor_loss(critic: Critic, actor: Actor, behavior: BehaviorModel,
               states, z, config: AgentConfig, noise=None,
               generator=None) -> torch.Tensor:
    """Minimized objective -E[Q(s, a~, z)] + alpha * E[KL(pi || behavior)]."""
    mean, std = actor.head(states, z)
    if noise is None:
        noise = torch.randn(mean.shape, dtype=mean.dtype, generator=generator)
    sampled = torch.tanh(mean + std * noise)
    q = critic(states, z, sampled)
    with torch.no_grad():
        b_mean, b_std = behavior.head(states, z)
    kl = kl_diag_gaussian(mean, std, b_mean, b_std)
    return -q.mean() + config.alpha * kl.mean()


def ema_update(target_params, online_params, tau: float) -> None:
    """In-place convex update: target <- tau * online + (1 - tau) * target."""
    if isinstance(target_params, nn.Module):
        target_params = list(target_params.parameters())
    if isinstance(online_params, nn.Module):
        online_params = list(online_params.parameters())
    target_params, online_params = list(target_params), list(online_params)
    if len(target_params) != len(online_params):
        raise ValueError("parameter lists must have equal length")
    with torch.no_grad():
        for t, o in zip(target_params, online_params):
            if t.shape != o.shape:
                raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
            t.mul_(1.0 - tau).add_(tau * o)


def act(actor: Actor, state, z, deterministic: bool = True,
        generator=None) -> np.ndarray:
    """Select one action for a raw state vector; always within (-1, 1)^2."""
    states = as_tensor(np.asarray(state), actor).reshape(1, -1)
    z_row = torch.as_tensor(z, dtype=states.dtype).reshape(1, -1)
    with torch.no_grad():
        if deterministic:
            action = actor.deterministic_action(states, z_row)
        else:
            action, _ = actor.sample(states, z_row, generator=generator)
    return action.squeeze(0).numpy()
