"""Diagonal Gaussians, categoricals and the tempered softmax."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR = 1e-6


def positive_variance(raw: torch.Tensor) -> torch.Tensor:
    """Map unconstrained head outputs to variances (softplus plus a floor)."""
    return F.softplus(raw) + VARIANCE_FLOOR


def tempered_softmax(logits: torch.Tensor, tau: float, dim: int = -1) -> torch.Tensor:
    return torch.exp(tempered_log_softmax(logits, tau, dim))


def tempered_log_softmax(logits: torch.Tensor, tau: float, dim: int = -1) -> torch.Tensor:
    """``log softmax(logits / tau)`` along ``dim``.

    Masked entries may be passed as -inf; they come back as -inf.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if torch.isnan(logits).any():
        raise ValueError("NaN in logits")
    return torch.log_softmax(logits / tau, dim=dim)


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != variance shape {tuple(self.variance.shape)}"
            )

    @property
    def std(self) -> torch.Tensor:
        return torch.sqrt(self.variance)

    def log_prob(self, value: torch.Tensor) -> torch.Tensor:
        return gaussian_log_prob(self, value)

    def rsample(self, noise: torch.Tensor) -> torch.Tensor:
        return gaussian_rsample(self, noise)


def gaussian_log_prob(g: DiagGaussian, value: torch.Tensor) -> torch.Tensor:
    """Log density summed over the trailing (event) dimension."""
    if value.shape[-1] != g.mean.shape[-1]:
        raise ValueError(f"value has event size {value.shape[-1]}, Gaussian has {g.mean.shape[-1]}")
    diff = value - g.mean
    return -0.5 * torch.sum(LOG_2PI + torch.log(g.variance) + diff * diff / g.variance, dim=-1)


def gaussian_rsample(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape[-1] != g.mean.shape[-1]:
        raise ValueError(f"noise has event size {noise.shape[-1]}, Gaussian has {g.mean.shape[-1]}")
    return g.mean + g.std * noise


@dataclass
class CategoricalDist:
    log_probs: torch.Tensor

    @classmethod
    def from_probs(cls, probs: Sequence[float] | torch.Tensor) -> "CategoricalDist":
        p = torch.as_tensor(probs, dtype=torch.float64)
        return cls(torch.log(p))

    @property
    def probs(self) -> torch.Tensor:
        return torch.exp(self.log_probs)

    def sample(self, uniform: float) -> int:
        return categorical_sample(self, uniform)


def categorical_sample(c: CategoricalDist, uniform: float) -> int:
    """Inverse-CDF draw: the first index whose cumulative mass exceeds ``uniform``.

    Zero-probability categories are never returned.
    """
    probs = c.probs.detach().reshape(-1).tolist()
    acc = 0.0
    last = 0
    for i, p in enumerate(probs):
        if p <= 0.0:
            continue
        acc += p
        last = i
        if uniform < acc:
            return i
    return last
