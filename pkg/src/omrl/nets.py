"""Small shared helpers for the MLP components."""

from __future__ import annotations

import torch
from torch import nn


def build_mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int) -> nn.Sequential:
    """ReLU MLP with the given hidden widths and a linear output layer."""
    layers: list[nn.Module] = []
    d = in_dim
    for width in hidden:
        layers += [nn.Linear(d, width), nn.ReLU()]
        d = width
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def module_dtype(module) -> torch.dtype:
    params = getattr(module, "parameters", None)
    if params is not None:
        for p in params():
            return p.dtype
    return torch.get_default_dtype()


def as_tensor(array, like: nn.Module) -> torch.Tensor:
    """Convert array-like input to a tensor matching the module's dtype."""
    return torch.as_tensor(array, dtype=module_dtype(like))
