"""Amortised posterior q(x_{1:T} | y_{1:T}).

A bidirectional GRU embeds the observations; a causal tanh RNN then walks
forward, feeding back the previous sampled state, and a one-hidden-layer
head gives the Gaussian for each x_t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import torch
from torch import nn

from .nets import GaussianHead
from .prob import DiagGaussian, gaussian_log_prob

if TYPE_CHECKING:
    from .model import ModelConfig


@dataclass
class PosteriorSample:
    x: torch.Tensor  # (B, T, m)
    log_q: torch.Tensor  # (B,)
    mean: torch.Tensor  # (B, T, m)
    variance: torch.Tensor  # (B, T, m)


class InferenceNetwork(nn.Module):
    def __init__(self, cfg: "ModelConfig"):
        super().__init__()
        self.state_dim = cfg.state_dim
        self.embedder = nn.GRU(cfg.obs_dim, cfg.embed_hidden, batch_first=True, bidirectional=True)
        self.cell = nn.RNNCell(cfg.state_dim + cfg.control_dim + 2 * cfg.embed_hidden, cfg.rnn_hidden)
        self.head = GaussianHead(cfg.rnn_hidden, cfg.state_dim, "mlp", [cfg.fc_hidden])

    def embed_observations(self, y: torch.Tensor) -> torch.Tensor:
        """h1 (B, T, 2H): forward-direction half first, backward half second."""
        h, _ = self.embedder(y)
        return h

    def rollout(
        self,
        h1: torch.Tensor,
        noise: torch.Tensor,
        u: Optional[torch.Tensor] = None,
    ) -> PosteriorSample:
        """Sample x_{1:T} autoregressively given embeddings and standard-normal noise."""
        B, T, _ = h1.shape
        m = self.state_dim
        if noise.shape != (B, T, m):
            raise ValueError(f"noise must have shape {(B, T, m)}, got {tuple(noise.shape)}")
        if u is None:
            u = h1.new_zeros((B, T, 0))
        x_prev = h1.new_zeros((B, m))
        r = h1.new_zeros((B, self.cell.hidden_size))
        xs, means, variances = [], [], []
        for t in range(T):
            r = self.cell(torch.cat([x_prev, u[:, t], h1[:, t]], dim=-1), r)
            q = self.head(r)
            x_prev = q.rsample(noise[:, t])
            xs.append(x_prev)
            means.append(q.mean)
            variances.append(q.variance)
        x = torch.stack(xs, dim=1)
        mean = torch.stack(means, dim=1)
        var = torch.stack(variances, dim=1)
        log_q = gaussian_log_prob(DiagGaussian(mean, var), x).sum(-1)
        return PosteriorSample(x, log_q, mean, var)

    def forward(self, y: torch.Tensor, noise: torch.Tensor, u: Optional[torch.Tensor] = None) -> PosteriorSample:
        return self.rollout(self.embed_observations(y), noise, u)

