"""Dual-modality alignment losses tying semantic-token and content views.

Two reconstruction terms per tower: an ID-level term between the backbone's
pooled representation of an entity's semantic-token sequence and its content
embedding, and a token-level term summing squared residual norms from the
quantizer cascade. Despite the auto-encoder framing upstream, there is no
sampling or KL term here; both losses are plain deterministic reconstructions.
"""

from __future__ import annotations

import torch


def id_level_loss(x_s: torch.Tensor, x_i: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between the two views; last dim is the feature dim."""
    if x_s.shape != x_i.shape:
        raise ValueError(f"shape mismatch: {tuple(x_s.shape)} vs {tuple(x_i.shape)}")
    return ((x_s - x_i) ** 2).sum(dim=-1)


def token_level_loss(trail: list[torch.Tensor]) -> torch.Tensor:
    """Sum of squared residual norms over quantization levels."""
    if not trail:
        raise ValueError("empty residual trail")
    total = None
    for r in trail:
        term = (r ** 2).sum(dim=-1)
        total = term if total is None else total + term
    return total


def dmvae_loss(
    id_loss: torch.Tensor | float,
    token_loss: torch.Tensor | float,
    beta: float,
) -> torch.Tensor | float:
    """Combined alignment loss: id_loss + beta * token_loss."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return id_loss + beta * token_loss
