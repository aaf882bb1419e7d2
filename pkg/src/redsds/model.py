"""Generative model: switches, counts, continuous states and emissions.

Switch indices are 0-based; counts are 1-based (column ``j`` of a duration
table is count / duration ``j + 1``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .hsmm import DPInputs
from .inference import InferenceNetwork
from .nets import GaussianHead, mlp
from .prob import DiagGaussian, gaussian_log_prob, positive_variance, tempered_log_softmax
from .substrate import DTYPE, logsumexp

NEG_INF = -math.inf


@dataclass
class ControlConfig:
    n_static: int  # size of the static-id embedding table
    time_dim: int
    static_dim: int = 5  # p
    control_dim: int = 16  # c
    hidden: int = 32
    duration_hidden: int = 64


@dataclass
class ModelConfig:
    K: int = 2
    d_min: int = 1
    d_max: int = 20
    state_dim: int = 4
    obs_dim: int = 1
    transition: str = "mlp"  # "mlp" | "linear"
    emission: str = "mlp"
    transition_hidden: int = 32
    emission_hidden: tuple[int, ...] = (8, 32)
    switch_hidden: Optional[int] = None  # default 4 * K^2
    embed_hidden: int = 4
    rnn_hidden: int = 16
    fc_hidden: int = 32
    control: Optional[ControlConfig] = None

    def __post_init__(self):
        if isinstance(self.control, dict):
            self.control = ControlConfig(**self.control)
        self.emission_hidden = tuple(self.emission_hidden)
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 1 <= self.d_min <= self.d_max:
            raise ValueError(f"need 1 <= d_min <= d_max, got d_min={self.d_min}, d_max={self.d_max}")
        if self.state_dim < 1 or self.obs_dim < 1:
            raise ValueError("state_dim and obs_dim must be >= 1")
        if self.transition not in ("mlp", "linear") or self.emission not in ("mlp", "linear"):
            raise ValueError("transition/emission must be 'mlp' or 'linear'")
        if self.switch_hidden is None:
            self.switch_hidden = 4 * self.K**2

    @property
    def n_durations(self) -> int:
        return self.d_max - self.d_min + 1

    @property
    def control_dim(self) -> int:
        return 0 if self.control is None else self.control.control_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DurationTable:
    """Duration pmf ``rho`` and increment probabilities ``v``, both (..., K, d_max)."""

    rho: torch.Tensor
    v: torch.Tensor


def duration_log_table(logits: torch.Tensor, d_min: int, d_max: int, tau: float):
    """Masked duration log-pmf and log increment/reset probabilities.

    ``logits`` has shape (..., K, d_max - d_min + 1). Returns ``(log_rho,
    log_v, log_1mv)`` each (..., K, d_max), with

        v(c) = 1 - rho(c) / sum_{d >= c} rho(d)

    evaluated as a ratio of tail masses so no log of a difference is taken.
    """
    lead = logits.shape[:-1]
    if d_min > 1:
        mask = logits.new_full(lead + (d_min - 1,), NEG_INF)
        logits = torch.cat([mask, logits], dim=-1)
    log_rho = tempered_log_softmax(logits, tau, dim=-1)
    # log_tail[..., c-1] = log sum_{d >= c} rho(d), right-to-left
    tails = [log_rho[..., -1]]
    for j in range(d_max - 2, -1, -1):
        tails.append(logsumexp(torch.stack([log_rho[..., j], tails[-1]], dim=-1), dim=-1))
    log_tail = torch.stack(tails[::-1], dim=-1)
    next_tail = torch.cat([log_tail[..., 1:], log_tail.new_full(lead + (1,), NEG_INF)], dim=-1)
    empty = torch.isinf(log_tail)
    zero = torch.zeros_like(log_tail)
    safe_tail = torch.where(empty, zero, log_tail)
    log_v = torch.where(empty, zero, next_tail - safe_tail)
    log_1mv = torch.where(empty, torch.full_like(log_tail, NEG_INF), log_rho - safe_tail)
    # the last count always resets, even if rho(d_max) underflowed
    log_v = torch.cat([log_v[..., :-1], log_v.new_full(lead + (1,), NEG_INF)], dim=-1)
    log_1mv = torch.cat([log_1mv[..., :-1], log_1mv.new_zeros(lead + (1,))], dim=-1)
    return log_rho, log_v, log_1mv


class RedSDS(nn.Module):
    """Generative networks plus the amortised posterior over states."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg = config
        gen = torch.Generator().manual_seed(seed)
        K, m, u = cfg.K, cfg.state_dim, cfg.control_dim
        self.tau_z = 1.0
        self.tau_rho = 1.0

        self.pi_logits = nn.Parameter(torch.zeros(K))
        self.init_mean = nn.Parameter(torch.randn(K, m, generator=gen))
        self.init_raw_var = nn.Parameter(torch.zeros(K, m))

        if cfg.control is None:
            self.duration_logits = nn.Parameter(torch.zeros(K, cfg.n_durations))
        else:
            cc = cfg.control
            self.static_embedding = nn.Embedding(cc.n_static, cc.static_dim)
            self.control_net = mlp([cc.static_dim + cc.time_dim, cc.hidden, cc.control_dim])
            self.duration_net = mlp([cc.control_dim, cc.duration_hidden, K * cfg.n_durations])

        self.switch_net = mlp([m + u, cfg.switch_hidden, K * K])
        self.transitions = nn.ModuleList(
            GaussianHead(m + u, m, cfg.transition, [cfg.transition_hidden]) for _ in range(K)
        )
        self.emission = GaussianHead(m, cfg.obs_dim, cfg.emission, cfg.emission_hidden)

        self.inference = InferenceNetwork(cfg)
        self._reinit(gen)
        self.to(DTYPE)

    def _reinit(self, gen: torch.Generator) -> None:
        # torch's default init draws from the global RNG; redo it from ``gen``
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(mod, nn.Embedding):
                with torch.no_grad():
                    mod.weight.normal_(generator=gen)
            elif isinstance(mod, (nn.GRU, nn.RNNCell)):
                bound = 1.0 / math.sqrt(mod.hidden_size)
                with torch.no_grad():
                    for p in mod.parameters():
                        p.uniform_(-bound, bound, generator=gen)

    def set_temperatures(self, tau_z: float, tau_rho: float) -> None:
        if tau_z <= 0 or tau_rho <= 0:
            raise ValueError("temperatures must be positive")
        self.tau_z = float(tau_z)
        self.tau_rho = float(tau_rho)

    # -- controls -------------------------------------------------------

    def control_embed(self, static_id: torch.Tensor | int, time_feats: torch.Tensor) -> torch.Tensor:
        """u_t = f_u([emb(static_id), time_feats]); empty when controls are off.

        ``static_id`` has the batch shape of ``time_feats`` minus its last axis
        (or broadcasts to it).
        """
        if self.config.control is None:
            return time_feats.new_zeros(time_feats.shape[:-1] + (0,))
        static_id = torch.as_tensor(static_id, dtype=torch.long)
        n = self.config.control.n_static
        if (static_id < 0).any() or (static_id >= n).any():
            raise IndexError(f"static id out of range [0, {n})")
        emb = self.static_embedding(static_id)
        emb = emb.expand(time_feats.shape[:-1] + emb.shape[-1:])
        return self.control_net(torch.cat([emb, time_feats.to(DTYPE)], dim=-1))

    def controls_from_raw(self, raw: Optional[torch.Tensor], batch_shape) -> torch.Tensor:
        """Raw control array (..., T, 1 + time_dim) -> u (..., T, c).

        Column 0 holds the integer static id, the rest are time features.
        """
        if self.config.control is None:
            return torch.zeros(tuple(batch_shape) + (0,), dtype=DTYPE)
        if raw is None:
            raise ValueError("model is control-conditioned but no controls were given")
        raw = torch.as_tensor(raw, dtype=DTYPE)
        return self.control_embed(raw[..., 0].round().long(), raw[..., 1:])

    # -- discrete factors -----------------------------------------------

    def duration_logits_at(self, u: Optional[torch.Tensor] = None) -> torch.Tensor:
        K, n = self.config.K, self.config.n_durations
        if self.config.control is None:
            return self.duration_logits
        if u is None:
            raise ValueError("duration network needs controls")
        return self.duration_net(u).reshape(u.shape[:-1] + (K, n))

    def duration_log_table(self, u: Optional[torch.Tensor] = None):
        cfg = self.config
        return duration_log_table(self.duration_logits_at(u), cfg.d_min, cfg.d_max, self.tau_rho)

    def duration_table(self, u: Optional[torch.Tensor] = None) -> DurationTable:
        log_rho, log_v, _ = self.duration_log_table(u)
        return DurationTable(torch.exp(log_rho), torch.exp(log_v))

    def switch_log_matrix(self, x_prev: torch.Tensor, u: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Row-normalised log A_t, shape (..., K, K); row i conditions on z_{t-1} = i."""
        K = self.config.K
        inp = x_prev if u is None or u.shape[-1] == 0 else torch.cat([x_prev, u], dim=-1)
        logits = self.switch_net(inp).reshape(x_prev.shape[:-1] + (K, K))
        return tempered_log_softmax(logits, self.tau_z, dim=-1)

    def log_pi(self) -> torch.Tensor:
        return torch.log_softmax(self.pi_logits, dim=-1)

    # -- continuous factors ---------------------------------------------

    def transition_dists(self, x_prev: torch.Tensor, u: Optional[torch.Tensor] = None) -> DiagGaussian:
        """Per-switch p(x_t | x_{t-1}, z_t = k): mean/variance (..., K, m)."""
        inp = x_prev if u is None or u.shape[-1] == 0 else torch.cat([x_prev, u], dim=-1)
        dists = [head(inp) for head in self.transitions]
        return DiagGaussian(
            torch.stack([d.mean for d in dists], dim=-2),
            torch.stack([d.variance for d in dists], dim=-2),
        )

    def initial_dist(self) -> DiagGaussian:
        return DiagGaussian(self.init_mean, positive_variance(self.init_raw_var))

    def emission_dist(self, x: torch.Tensor) -> DiagGaussian:
        return self.emission(x)

    def joint_conditional_loglik(self, y_t, x_t, x_prev, u_t=None) -> torch.Tensor:
        """b_t[k] = log p(y_t | x_t) + log p(x_t | x_{t-1}, z_t = k)."""
        if y_t.shape[-1] != self.config.obs_dim or x_t.shape[-1] != self.config.state_dim:
            raise ValueError("dimension mismatch in joint_conditional_loglik")
        emit = gaussian_log_prob(self.emission_dist(x_t), y_t)
        trans = gaussian_log_prob(self.transition_dists(x_prev, u_t), x_t.unsqueeze(-2))
        return emit.unsqueeze(-1) + trans

    def initial_loglik(self, y_1, x_1, u_1=None) -> tuple[torch.Tensor, torch.Tensor]:
        """(log pi, b_1) with b_1[k] = log p(y_1 | x_1) + log N(x_1; mu_k, Sigma_k)."""
        emit = gaussian_log_prob(self.emission_dist(x_1), y_1)
        init = gaussian_log_prob(self.initial_dist(), x_1.unsqueeze(-2))
        return self.log_pi(), emit.unsqueeze(-1) + init

    def dp_inputs(self, y: torch.Tensor, x: torch.Tensor, u: Optional[torch.Tensor] = None) -> DPInputs:
        """Assemble DP factors for series ``y`` (B, T, d) at states ``x`` (B, T, m)."""
        B, T, _ = y.shape
        if u is None:
            u = y.new_zeros((B, T, 0))
        log_pi, b1 = self.initial_loglik(y[:, 0], x[:, 0])
        if T > 1:
            bt = self.joint_conditional_loglik(y[:, 1:], x[:, 1:], x[:, :-1], u[:, 1:])
            b = torch.cat([b1.unsqueeze(1), bt], dim=1)
            log_A = self.switch_log_matrix(x[:, :-1], u[:, 1:])
            log_A = torch.cat([torch.zeros_like(log_A[:, :1]), log_A], dim=1)
        else:
            b = b1.unsqueeze(1)
            log_A = y.new_zeros((B, 1, self.config.K, self.config.K))
        if self.config.control is None:
            _, log_v, log_1mv = self.duration_log_table()
            log_v = log_v.expand((B, T) + log_v.shape)
            log_1mv = log_1mv.expand((B, T) + log_1mv.shape)
        else:
            _, log_v, log_1mv = self.duration_log_table(u)
        return DPInputs(log_pi.expand(B, -1), b, log_A, log_v, log_1mv)

    # -- ancestral sampling ---------------------------------------------

    @torch.no_grad()
    def sample_trajectory(self, T: int, controls: Optional[torch.Tensor] = None, seed: int = 0) -> dict:
        """Ancestral sample of (y, x, z, c); z is 0-based, c is 1-based."""
        out = self.sample_batch(1, T, None if controls is None else torch.as_tensor(controls)[None], seed)
        return {k: v[0] for k, v in out.items()}

    @torch.no_grad()
    def sample_batch(self, n: int, T: int, controls: Optional[torch.Tensor] = None, seed: int = 0) -> dict:
        """``n`` independent ancestral samples, arrays with leading axis ``n``.

        ``controls`` is the raw (n, T, 1 + time_dim) array for a
        control-conditioned model.
        """
        if T < 1 or n < 1:
            raise ValueError("n and T must be >= 1")
        rng = np.random.default_rng(seed)
        cfg = self.config
        if cfg.control is not None:
            u = self.controls_from_raw(controls, (n, T))
        else:
            u = torch.zeros((n, T, 0), dtype=DTYPE)
        rows = np.arange(n)
        z = np.zeros((n, T), dtype=np.int64)
        c = np.zeros((n, T), dtype=np.int64)
        x = torch.zeros((n, T, cfg.state_dim), dtype=DTYPE)
        y = torch.zeros((n, T, cfg.obs_dim), dtype=DTYPE)

        z[:, 0] = _draw(torch.exp(self.log_pi()).expand(n, -1).numpy(), rng)
        c[:, 0] = 1
        init = self.initial_dist()
        zt = torch.as_tensor(z[:, 0])
        x[:, 0] = init.mean[zt] + init.std[zt] * _normal(rng, (n, cfg.state_dim))
        y[:, 0] = self._emit(x[:, 0], rng)
        if cfg.control is None:
            v_table = torch.exp(self.duration_log_table()[1]).numpy()
        for t in range(1, T):
            zp, cp = z[:, t - 1], c[:, t - 1]
            if cfg.control is None:
                v = v_table[zp, cp - 1]
            else:
                v = torch.exp(self.duration_log_table(u[:, t])[1]).numpy()[rows, zp, cp - 1]
            stay = rng.random(n) < v
            A = torch.exp(self.switch_log_matrix(x[:, t - 1], u[:, t])).numpy()[rows, zp]
            jump = _draw(A, rng)
            z[:, t] = np.where(stay, zp, jump)
            c[:, t] = np.where(stay, cp + 1, 1)
            tr = self.transition_dists(x[:, t - 1], u[:, t])
            zt = torch.as_tensor(z[:, t])
            x[:, t] = tr.mean[rows, zt] + tr.std[rows, zt] * _normal(rng, (n, cfg.state_dim))
            y[:, t] = self._emit(x[:, t], rng)
        return {"y": y.numpy(), "x": x.numpy(), "z": z, "c": c}

    def _emit(self, x_t: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        em = self.emission_dist(x_t)
        return em.mean + em.std * _normal(rng, em.mean.shape)


def _normal(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(shape), dtype=DTYPE)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row of ``probs`` (n, K); zero-mass categories are skipped."""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    idx = (u[:, None] >= cum).sum(-1)
    # land on the last category with positive mass if rounding pushed past it
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)
