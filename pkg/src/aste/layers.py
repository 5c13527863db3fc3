from __future__ import annotations

from collections.abc import Sequence

from torch import nn


def linear_block(d_in: int, d_out: int, dropout: float = 0.1) -> nn.Sequential:
    """LayerNorm -> Linear -> ReLU -> Dropout, the unit every MLP here uses."""
    return nn.Sequential(nn.LayerNorm(d_in), nn.Linear(d_in, d_out), nn.ReLU(), nn.Dropout(dropout))


def block_stack(widths: Sequence[int], dropout: float = 0.1) -> nn.Sequential:
    return nn.Sequential(*(linear_block(a, b, dropout) for a, b in zip(widths[:-1], widths[1:])))
