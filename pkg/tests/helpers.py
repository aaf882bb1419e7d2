"""Shared test utilities."""

import numpy as np
import torch

from redsds.hsmm import DPInputs
from redsds.model import ModelConfig, RedSDS, duration_log_table
from redsds.prob import positive_variance, tempered_log_softmax


def random_dp(rng: np.random.Generator, T: int, K: int, D: int, d_min: int = 1, B: int | None = None) -> DPInputs:
    """Random but valid discrete-chain factors; time-varying duration tables."""
    lead = () if B is None else (B,)
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    log_pi = tempered_log_softmax(t(rng.normal(size=lead + (K,))), 1.0)
    b = t(rng.normal(scale=2.0, size=lead + (T, K)))
    log_A = tempered_log_softmax(t(rng.normal(size=lead + (T, K, K))), 1.0)
    logits = t(rng.normal(size=lead + (T, K, D - d_min + 1)))
    _, log_v, log_1mv = duration_log_table(logits, d_min, D, 1.0)
    return DPInputs(log_pi, b, log_A, log_v, log_1mv)


def rel_err(a, b) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def textbook_hmm(pi, A, emis):
    """Scaled probability-space forward-backward (Rabiner); A[t] is the transition into t."""
    T, K = emis.shape
    alpha = np.zeros((T, K))
    scale = np.zeros(T)
    a = pi * emis[0]
    scale[0] = a.sum()
    alpha[0] = a / scale[0]
    for t in range(1, T):
        a = (alpha[t - 1] @ A[t]) * emis[t]
        scale[t] = a.sum()
        alpha[t] = a / scale[t]
    beta = np.ones((T, K))
    for t in range(T - 2, -1, -1):
        beta[t] = A[t + 1] @ (emis[t + 1] * beta[t + 1]) / scale[t + 1]
    return np.log(scale).sum(), alpha * beta


def kalman_loglik(y, mu0, P0, A, Q, C, R):
    """Marginal log-likelihood of y (T, d) under a time-invariant LGSSM."""
    m, P = mu0, P0
    total = 0.0
    for t in range(len(y)):
        if t > 0:
            m = A @ m
            P = A @ P @ A.T + Q
        S = C @ P @ C.T + R
        resid = y[t] - C @ m
        _, logdet = np.linalg.slogdet(2 * np.pi * S)
        total += -0.5 * (logdet + resid @ np.linalg.solve(S, resid))
        G = P @ C.T @ np.linalg.inv(S)
        m = m + G @ resid
        P = (np.eye(len(m)) - G @ C) @ P
    return total


def linear_gaussian_model(seed, m=2, d=1):
    cfg = ModelConfig(K=1, d_min=1, d_max=1, state_dim=m, obs_dim=d, transition="linear", emission="linear")
    model = RedSDS(cfg, seed=seed)
    gen = np.random.default_rng(seed)
    with torch.no_grad():
        W = gen.normal(size=(m, m))
        W *= 0.9 / max(abs(np.linalg.eigvals(W)))
        model.transitions[0].mean.weight.copy_(torch.as_tensor(W))
        model.transitions[0].raw_var.copy_(torch.as_tensor(gen.normal(size=m) - 1))
        model.emission.mean.weight.copy_(torch.as_tensor(gen.normal(size=(d, m))))
        model.emission.raw_var.copy_(torch.as_tensor(gen.normal(size=d) - 1))
        model.init_raw_var.copy_(torch.as_tensor(gen.normal(size=(1, m))))
    return model


def lgssm_matrices(model):
    with torch.no_grad():
        A = model.transitions[0].mean.weight.numpy()
        Q = np.diag(positive_variance(model.transitions[0].raw_var).numpy())
        C = model.emission.mean.weight.numpy()
        R = np.diag(positive_variance(model.emission.raw_var).numpy())
        mu0 = model.init_mean[0].numpy()
        P0 = np.diag(positive_variance(model.init_raw_var[0]).numpy())
    return mu0, P0, A, Q, C, R
