"""Exact forward-backward over (switch, count) pairs given pseudo-observations.

Counts are 1-based in the maths and 0-based in storage: column ``j`` of the
last axis holds count ``j + 1``. Impossible cells hold -inf.

The efficient recursions cost O(T K (K + d_max)): the reset mass of the
previous step and the reset-side inner sum of the backward pass are
computed once per step and shared across counts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch


NEG_INF = -math.inf


@dataclass
class DPInputs:
    """Log-space factors of the discrete chain, batched over series.

    Shapes (leading batch dim ``B`` optional on construction):
      log_pi  (B, K)
      b       (B, T, K)       log p(y_t, x_t | x_{t-1}, z_t = k)
      log_A   (B, T, K, K)    row i = log p(z_t | z_{t-1} = i, c_t = 1); t = 0 unused
      log_v   (B, T, K, D)    log p(count increments | z_{t-1}, c_{t-1}) for the step into t
      log_1mv (B, T, K, D)    log p(count resets | ...)
    """

    log_pi: torch.Tensor
    b: torch.Tensor
    log_A: torch.Tensor
    log_v: torch.Tensor
    log_1mv: torch.Tensor

    def __post_init__(self):
        if self.b.dim() == 2:
            self.log_pi = self.log_pi.unsqueeze(0)
            self.b = self.b.unsqueeze(0)
            self.log_A = self.log_A.unsqueeze(0)
            self.log_v = self.log_v.unsqueeze(0)
            self.log_1mv = self.log_1mv.unsqueeze(0)
            self.batched = False
        else:
            self.batched = True
        B, T, K = self.b.shape
        D = self.log_v.shape[-1]
        self.log_A = self.log_A.expand(B, T, K, K)
        self.log_v = self.log_v.expand(B, T, K, D)
        self.log_1mv = self.log_1mv.expand(B, T, K, D)
        self.log_pi = self.log_pi.expand(B, K)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        B, T, K = self.b.shape
        return B, T, K, self.log_v.shape[-1]

    def numpy(self, i: int = 0) -> dict[str, np.ndarray]:
        """Series ``i`` as float64 arrays (for the oracles)."""
        return {
            "log_pi": self.log_pi[i].detach().cpu().numpy(),
            "b": self.b[i].detach().cpu().numpy(),
            "log_A": self.log_A[i].detach().cpu().numpy(),
            "log_v": self.log_v[i].detach().cpu().numpy(),
            "log_1mv": self.log_1mv[i].detach().cpu().numpy(),
        }


@dataclass
class DiscretePosterior:
    log_alpha: torch.Tensor
    log_beta: torch.Tensor
    gamma: torch.Tensor
    loglik: torch.Tensor

    def switch_marginals(self) -> torch.Tensor:
        """p(z_t | y, x) with counts summed out, shape (..., T, K)."""
        return self.gamma.sum(-1)


def _unbatch(x: torch.Tensor, dp: DPInputs) -> torch.Tensor:
    return x if dp.batched else x.squeeze(0)


def _lse(x: torch.Tensor, dim) -> torch.Tensor:
    # torch.logsumexp returns -inf for all -inf slices; only used without autograd
    return torch.logsumexp(x, dim=dim)


def _alpha_pass(log_pi, b, log_A, log_v, log_1mv):
    B, T, K = b.shape
    D = log_v.shape[-1]
    first = log_pi + b[:, 0]
    alpha = torch.cat([first.unsqueeze(-1), b.new_full((B, K, D - 1), NEG_INF)], dim=-1)
    alphas = [alpha]
    for t in range(1, T):
        bt = b[:, t]
        # count c-1 -> c (c >= 2): same switch
        inc = bt.unsqueeze(-1) + log_v[:, t, :, :-1] + alpha[..., :-1]
        # any count -> 1 through the transition matrix; reset mass R(z') shared by all z
        reset_mass = _lse(log_1mv[:, t] + alpha, dim=-1)
        reset = bt + _lse(log_A[:, t] + reset_mass.unsqueeze(-1), dim=-2)
        alpha = torch.cat([reset.unsqueeze(-1), inc], dim=-1)
        alphas.append(alpha)
    log_alpha = torch.stack(alphas, dim=1)
    return log_alpha, _lse(alpha, dim=(-2, -1))


def _beta_pass(b, log_A, log_v, log_1mv):
    """Also returns the reset-side inner sums, inner[:, t] used for the step into t."""
    B, T, K = b.shape
    D = log_v.shape[-1]
    beta = b.new_zeros((B, K, D))
    betas = [beta]
    inners = []
    for t in range(T - 2, -1, -1):
        bn = b[:, t + 1]
        # stay: (z, c) -> (z, c + 1); the last count cannot increment
        cont = log_v[:, t + 1, :, :-1] + bn.unsqueeze(-1) + beta[..., 1:]
        cont = torch.cat([cont, b.new_full((B, K, 1), NEG_INF)], dim=-1)
        # reset: (z, c) -> (z', 1); 1 - v is zero below d_min so no extra guard
        inner = _lse(log_A[:, t + 1] + (bn + beta[..., 0]).unsqueeze(-2), dim=-1)
        reset = log_1mv[:, t + 1] + inner.unsqueeze(-1)
        beta = torch.logaddexp(cont, reset)
        beta = torch.where(torch.isnan(beta), torch.full_like(beta, NEG_INF), beta)
        betas.append(beta)
        inners.append(inner)
    inners.append(b.new_full((B, K), NEG_INF))  # no step into t = 0
    return torch.stack(betas[::-1], dim=1), torch.stack(inners[::-1], dim=1)


class _LogLikelihood(torch.autograd.Function):
    """log p(y, x) with gradients given by posterior expected counts.

    d loglik / d factor is the posterior probability of the event the factor
    scores: gamma for ``b``, expected increments for ``log_v``, expected
    resets for ``log_1mv`` and expected reset transitions for ``log_A``.
    """

    @staticmethod
    def forward(ctx, log_pi, b, log_A, log_v, log_1mv):
        log_alpha, loglik = _alpha_pass(log_pi, b, log_A, log_v, log_1mv)
        ctx.save_for_backward(log_pi, b, log_A, log_v, log_1mv, log_alpha, loglik)
        ctx.mark_non_differentiable(log_alpha)
        return loglik, log_alpha

    @staticmethod
    def backward(ctx, grad, _grad_alpha):
        log_pi, b, log_A, log_v, log_1mv, log_alpha, loglik = ctx.saved_tensors
        log_beta, inner = _beta_pass(b, log_A, log_v, log_1mv)
        B, T, K = b.shape
        L = loglik.reshape(B, 1, 1, 1)
        g = grad.reshape(B, 1, 1, 1)
        gamma = torch.exp(log_alpha + log_beta - L)
        g_b = gamma.sum(-1) * g.squeeze(-1)
        g_pi = gamma[:, 0, :, 0] * grad.reshape(B, 1)
        g_A = torch.zeros_like(log_A)
        g_v = torch.zeros_like(log_v)
        g_1mv = torch.zeros_like(log_1mv)
        if T > 1:
            a_prev = log_alpha[:, :-1]  # (B, T-1, K, D)
            b_next = b[:, 1:]
            beta_next = log_beta[:, 1:]
            inc = a_prev[..., :-1] + log_v[:, 1:, :, :-1] + b_next.unsqueeze(-1) + beta_next[..., 1:]
            g_v[:, 1:, :, :-1] = torch.exp(inc - L) * g
            res = a_prev + log_1mv[:, 1:] + inner[:, 1:].unsqueeze(-1)
            g_1mv[:, 1:] = torch.exp(res - L) * g
            reset_mass = _lse(a_prev + log_1mv[:, 1:], dim=-1)  # (B, T-1, K)
            trans = reset_mass.unsqueeze(-1) + log_A[:, 1:] + (b_next + beta_next[..., 0]).unsqueeze(-2)
            g_A[:, 1:] = torch.exp(trans - L) * g
        return g_pi, g_b, g_A, g_v, g_1mv


def forward(dp: DPInputs) -> tuple[torch.Tensor, torch.Tensor]:
    """Log forward variables (B, T, K, D) and log p(y_{1:T}, x_{1:T}) (B,).

    The likelihood is differentiable with respect to every DP factor;
    ``log_alpha`` is returned detached.
    """
    if not torch.isfinite(dp.b).all():
        raise ValueError("non-finite per-step log-likelihoods in DP inputs")
    args = (dp.log_pi, dp.b, dp.log_A, dp.log_v, dp.log_1mv)
    loglik, log_alpha = _LogLikelihood.apply(*args)
    return _unbatch(log_alpha, dp), _unbatch(loglik, dp)


def backward(dp: DPInputs) -> torch.Tensor:
    """Log backward variables (B, T, K, D); the last step is all zeros."""
    with torch.no_grad():
        log_beta, _ = _beta_pass(dp.b.detach(), dp.log_A.detach(), dp.log_v.detach(), dp.log_1mv.detach())
    return _unbatch(log_beta, dp)


def smooth(log_alpha: torch.Tensor, log_beta: torch.Tensor, loglik: torch.Tensor) -> torch.Tensor:
    """gamma_t(z, c) = exp(log alpha + log beta - loglik)."""
    shift = loglik.detach().reshape(loglik.shape + (1, 1, 1))
    return torch.exp(log_alpha + log_beta - shift)


def posterior(dp: DPInputs) -> DiscretePosterior:
    log_alpha, loglik = forward(dp)
    log_beta = backward(dp)
    gamma = smooth(log_alpha, log_beta, loglik)
    return DiscretePosterior(log_alpha, log_beta, gamma, loglik)


# ---------------------------------------------------------------------------
# Oracles. These work on float64 numpy arrays for one series and share no code
# with the recursions above.


def _transition_logprob(inp: dict, t: int, zp: int, cp: int, z: int, c: int) -> float:
    """log p(z_t = z, c_t = c | z_{t-1} = zp, c_{t-1} = cp), counts 1-based."""
    if c == cp + 1:
        return float(inp["log_v"][t, zp, cp - 1]) if z == zp else NEG_INF
    if c == 1:
        return float(inp["log_1mv"][t, zp, cp - 1] + inp["log_A"][t, zp, z])
    return NEG_INF


def _logsumexp_list(vals: list[float]) -> float:
    finite = [v for v in vals if v != NEG_INF]
    if not finite:
        return NEG_INF
    m = max(finite)
    return m + math.log(sum(math.exp(v - m) for v in finite))


def _check_size(T: int, K: int, D: int, limit: float = 1e7) -> None:
    if (K * D) ** T > limit:
        raise ValueError(f"instance too large to enumerate: (K*D)^T = {(K * D) ** T:.3g} > {limit:.0e}")


def enumerate_paths(inp: dict):
    """Yield ``(path, logp)`` for every path with nonzero probability.

    ``path`` is a tuple of (z, c) with 0-based switches and 1-based counts;
    ``logp`` is the joint log density including the per-step terms ``b``.
    """
    T, K = inp["b"].shape
    D = inp["log_v"].shape[-1]
    _check_size(T, K, D)

    def extend(prefix, logp):
        t = len(prefix)
        if t == T:
            yield tuple(prefix), logp
            return
        zp, cp = prefix[-1]
        for z in range(K):
            for c in range(1, D + 1):
                lp = _transition_logprob(inp, t, zp, cp, z, c)
                if lp == NEG_INF:
                    continue
                yield from extend(prefix + [(z, c)], logp + lp + float(inp["b"][t, z]))

    for z in range(K):
        lp0 = float(inp["log_pi"][z] + inp["b"][0, z])
        if lp0 == NEG_INF:
            continue
        yield from extend([(z, 1)], lp0)


def brute_force_loglik(inp: dict) -> float:
    """log p(y, x) by summing over every valid (switch, count) path."""
    return _logsumexp_list([lp for _, lp in enumerate_paths(inp)])


def brute_force_posterior(inp: dict) -> np.ndarray:
    """Smoothed marginals (T, K, D) from explicit path sums."""
    T, K = inp["b"].shape
    D = inp["log_v"].shape[-1]
    paths = list(enumerate_paths(inp))
    total = _logsumexp_list([lp for _, lp in paths])
    gamma = np.zeros((T, K, D))
    for path, lp in paths:
        w = math.exp(lp - total)
        for t, (z, c) in enumerate(path):
            gamma[t, z, c - 1] += w
    return gamma


def meta_switch_forward_backward(inp: dict) -> tuple[float, np.ndarray]:
    """HMM forward-backward over the K*D meta states; O(T K^2 D^2).

    Returns ``(loglik, gamma)`` with gamma shaped (T, K, D).
    """
    T, K = inp["b"].shape
    D = inp["log_v"].shape[-1]
    S = K * D
    states = list(itertools.product(range(K), range(1, D + 1)))

    trans = np.full((T, S, S), NEG_INF)
    for t in range(1, T):
        for i, (zp, cp) in enumerate(states):
            for j, (z, c) in enumerate(states):
                trans[t, i, j] = _transition_logprob(inp, t, zp, cp, z, c)
    emit = np.array([[inp["b"][t, z] for (z, _) in states] for t in range(T)])

    def lse(a, axis):
        m = np.max(a, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            return np.squeeze(m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)), axis=axis)

    la = np.full((T, S), NEG_INF)
    for j, (z, c) in enumerate(states):
        if c == 1:
            la[0, j] = inp["log_pi"][z] + emit[0, j]
    for t in range(1, T):
        la[t] = emit[t] + lse(la[t - 1][:, None] + trans[t], axis=0)
    lb = np.zeros((T, S))
    for t in range(T - 2, -1, -1):
        lb[t] = lse(trans[t + 1] + (emit[t + 1] + lb[t + 1])[None, :], axis=1)
    loglik = float(lse(la[-1], axis=0))
    gamma = np.exp(la + lb - loglik).reshape(T, K, D)
    return loglik, gamma
