"""Small network building blocks shared by the generative and inference sides."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .prob import DiagGaussian, positive_variance


def mlp(sizes: Sequence[int]) -> nn.Sequential:
    """ReLU MLP; ``sizes`` lists input, hidden..., output widths."""
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class GaussianHead(nn.Module):
    """Maps an input vector to a diagonal Gaussian.

    ``linear`` mode: mean is a bias-free linear map, variance a learned
    input-independent vector. ``mlp`` mode: one network emits mean and raw
    variance.
    """

    def __init__(self, in_dim: int, out_dim: int, kind: str, hidden: Sequence[int]):
        super().__init__()
        self.kind = kind
        self.out_dim = out_dim
        if kind == "linear":
            self.mean = nn.Linear(in_dim, out_dim, bias=False)
            self.raw_var = nn.Parameter(torch.zeros(out_dim))
        else:
            self.net = mlp([in_dim, *hidden, 2 * out_dim])

    def forward(self, x: torch.Tensor) -> DiagGaussian:
        if self.kind == "linear":
            mean = self.mean(x)
            return DiagGaussian(mean, positive_variance(self.raw_var).expand_as(mean))
        out = self.net(x)
        mean, raw = out.split(self.out_dim, dim=-1)
        return DiagGaussian(mean, positive_variance(raw))
