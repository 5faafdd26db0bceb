"""Context encoder and its training losses.

The encoder embeds each (state, action, reward, next_state) transition through
an MLP with a tanh output and pools a context by the arithmetic mean of its
per-transition embeddings, so every task representation lives in (-1, 1)^d.

Pooling uses a canonical summation order: context rows are sorted
lexicographically (by all transition columns) before the mean, which makes
encode_context bit-exact under any permutation of its input rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ContextBatch
from .envs import Transition
from .nets import as_tensor, build_mlp

TRANSITION_DIM = 11  # state(4) + action(2) + reward(1) + next_state(4)
DEFAULT_HIDDEN = (200, 200, 200)
DEFAULT_LATENT_DIM = 20


@dataclass
class EncoderLossConfig:
    """Weights of the combined encoder objective."""

    lambda_dml: float = 0.5
    beta: float = 1.0
    epsilon0: float = 1e-3
    mi_enabled: bool = True

    def __post_init__(self):
        if self.lambda_dml < 0:
            raise ValueError("lambda_dml must be >= 0")
        if self.beta <= 0 or self.epsilon0 <= 0:
            raise ValueError("beta and epsilon0 must be > 0")


class ContextEncoder(nn.Module):
    """Per-transition MLP embedding with tanh bound and mean pooling."""

    def __init__(self, latent_dim: int = DEFAULT_LATENT_DIM,
                 hidden: tuple[int, ...] = DEFAULT_HIDDEN):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = build_mlp(TRANSITION_DIM, hidden, latent_dim)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(rows))

    def encode_transitions(self, transitions) -> torch.Tensor:
        """Embed a (n, 11+) row table; extra columns (done flag) are dropped."""
        rows = _to_rows(transitions)
        if not np.all(np.isfinite(rows)):
            raise ValueError("transition inputs must be finite")
        return self(as_tensor(rows, self))

    def encode_transition(self, transition) -> torch.Tensor:
        return self.encode_transitions(_to_rows(transition))[0]

    def encode_context(self, context) -> torch.Tensor:
        rows = _to_rows(context)
        if rows.shape[0] == 0:
            raise ValueError("context must contain at least one transition")
        return self.encode_context_batch(rows[np.newaxis])[0]

    def encode_context_batch(self, contexts: np.ndarray) -> torch.Tensor:
        """Encode a (n_ctx, H, 11+) stack of contexts in one forward pass."""
        contexts = np.asarray(contexts, dtype=np.float64)[:, :, :TRANSITION_DIM]
        if not np.all(np.isfinite(contexts)):
            raise ValueError("transition inputs must be finite")
        n_ctx, H, _ = contexts.shape
        ordered = np.stack([c[canonical_order(c)] for c in contexts])
        flat = as_tensor(ordered.reshape(n_ctx * H, TRANSITION_DIM), self)
        return self(flat).view(n_ctx, H, self.latent_dim).mean(dim=1)


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Lexicographic row order (first column is the primary key)."""
    return np.lexsort(rows.T[::-1])


def _to_rows(transitions) -> np.ndarray:
    if isinstance(transitions, ContextBatch):
        rows = transitions.transitions
    elif isinstance(transitions, Transition):
        rows = transitions.as_row()[np.newaxis]
    elif isinstance(transitions, (list, tuple)) and transitions and \
            isinstance(transitions[0], Transition):
        rows = np.stack([t.as_row() for t in transitions])
    else:
        rows = np.asarray(transitions, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[np.newaxis]
    return np.asarray(rows, dtype=np.float64)[:, :TRANSITION_DIM]


def dml_loss(z_batch: torch.Tensor, task_ids, config: EncoderLossConfig) -> torch.Tensor:
    """Distance-metric objective over all unordered representation pairs.

    Same-task pairs contribute the squared distance; different-task pairs the
    inverse term beta / (dist^2 + epsilon0).
    """
    n = z_batch.shape[0]
    if n < 2:
        raise ValueError("dml_loss needs at least 2 representations")
    ids = torch.as_tensor(np.asarray(task_ids))
    if ids.shape[0] != n:
        raise ValueError("task_ids length must match z_batch")
    iu, ju = torch.triu_indices(n, n, offset=1)
    d2 = (z_batch[iu] - z_batch[ju]).pow(2).sum(dim=-1)
    same = ids[iu] == ids[ju]
    terms = torch.where(same, d2, config.beta / (d2 + config.epsilon0))
    return terms.mean()


def encoder_loss(mi_loss_value, dml_loss_value, config: EncoderLossConfig):
    """Combined objective: the MI term (if enabled) plus lambda * DML."""
    mi_term = mi_loss_value if config.mi_enabled else 0.0
    return mi_term + config.lambda_dml * dml_loss_value
