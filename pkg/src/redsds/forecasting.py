"""Per-series normalisation, future unrolling from the posterior, and CRPS."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import hsmm
from .model import RedSDS
from .substrate import DTYPE

DEFAULT_LEVELS = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class NormalizedSeries:
    values: np.ndarray
    method: str  # "standardization" | "scaling"
    stats: dict
    log_det: float

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.method == "standardization":
            return values * self.stats["std"] + self.stats["mean"]
        return values * self.stats["scale"]

    def metadata(self) -> dict:
        return {"method": self.method, **self.stats, "log_det": self.log_det}

    @classmethod
    def from_metadata(cls, values, meta: dict) -> "NormalizedSeries":
        stats = {k: v for k, v in meta.items() if k not in ("method", "log_det")}
        return cls(np.asarray(values, dtype=np.float64), meta["method"], stats, meta["log_det"])


def normalize(y, method: str = "standardization", series_id=None) -> NormalizedSeries:
    """Standardise (population std) or scale by the mean absolute value.

    ``log_det`` is ``-log`` of the divisor.
    """
    y = np.asarray(y, dtype=np.float64)
    name = "" if series_id is None else f"series {series_id}: "
    if method == "standardization":
        mean = float(y.mean())
        std = float(y.std())
        if not std > 0:
            raise ValueError(f"{name}zero standard deviation, cannot standardise")
        return NormalizedSeries((y - mean) / std, method, {"mean": mean, "std": std}, -math.log(std))
    if method == "scaling":
        scale = float(np.abs(y).mean())
        if not scale > 0:
            raise ValueError(f"{name}all-zero series, cannot scale")
        return NormalizedSeries(y / scale, method, {"scale": scale}, -math.log(scale))
    raise ValueError(f"unknown normalisation {method!r}")


@dataclass
class ForecastResult:
    samples: np.ndarray  # (M, horizon, d), original scale
    switches: np.ndarray  # (M, horizon) 0-based, preceded by the sampled z_T in ``start``
    counts: np.ndarray  # (M, horizon) 1-based
    start: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))  # (M, 2): z_T, c_T

    @property
    def num_paths(self) -> int:
        return self.samples.shape[0]

    def quantiles(self, levels: Sequence[float] = DEFAULT_LEVELS) -> np.ndarray:
        """(len(levels), horizon, d) empirical quantiles."""
        if self.samples.shape[1] == 0:
            return np.zeros((len(levels), 0, self.samples.shape[2]))
        return np.quantile(self.samples, levels, axis=0, method="inverted_cdf")

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


@torch.no_grad()
def forecast_unroll(
    model: RedSDS,
    y: np.ndarray,
    horizon: int,
    num_paths: int = 100,
    seed: int = 0,
    controls: Optional[np.ndarray] = None,
    norm: Optional[NormalizedSeries] = None,
) -> ForecastResult:
    """Sample future paths: posterior state and (switch, count) at T, then
    ancestral sampling of count, switch, state and observation per step.

    ``y`` is the (already normalised) conditioning window (T, d); ``controls``
    must cover T + horizon steps for a control-conditioned model. Samples are
    mapped back through ``norm`` when given.
    """
    cfg = model.config
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    T = len(y)
    M = num_paths
    if cfg.control is not None:
        if controls is None or len(controls) < T + horizon:
            raise ValueError(f"need controls for {T + horizon} steps")
        raw = torch.as_tensor(np.asarray(controls)[: T + horizon], dtype=DTYPE)
        u_all = model.controls_from_raw(raw, (T + horizon,))
    else:
        u_all = torch.zeros((T + horizon, 0), dtype=DTYPE)
    rng = np.random.default_rng(seed)

    yb = torch.as_tensor(y, dtype=DTYPE).unsqueeze(0).expand(M, T, y.shape[1])
    ub = u_all[:T].unsqueeze(0).expand(M, T, u_all.shape[-1])
    noise = torch.as_tensor(rng.standard_normal((M, T, cfg.state_dim)), dtype=DTYPE)
    post = model.inference(yb, noise, ub)
    dp = model.dp_inputs(yb, post.x, ub)
    log_alpha, loglik = hsmm.forward(dp)
    # beta_T = 1, so gamma_T is alpha_T normalised
    gamma_T = torch.exp(log_alpha[:, -1] - loglik.reshape(M, 1, 1)).reshape(M, -1).numpy()
    cum = np.cumsum(gamma_T, axis=1)
    flat = np.minimum((rng.random(M)[:, None] >= cum).sum(1), gamma_T.shape[1] - 1)
    z = flat // cfg.d_max
    c = flat % cfg.d_max + 1
    start = np.stack([z, c], axis=1)
    x = post.x[:, -1]

    ys = np.zeros((M, horizon, cfg.obs_dim))
    zs = np.zeros((M, horizon), dtype=np.int64)
    cs = np.zeros((M, horizon), dtype=np.int64)
    rows = np.arange(M)
    for h in range(horizon):
        u_t = u_all[T + h].unsqueeze(0).expand(M, -1)
        if cfg.control is None:
            _, log_v, _ = model.duration_log_table()
            v = np.exp(log_v.numpy())[z, c - 1]
        else:
            _, log_v, _ = model.duration_log_table(u_t)
            v = np.exp(log_v.numpy())[rows, z, c - 1]
        stay = rng.random(M) < v
        A = torch.exp(model.switch_log_matrix(x, u_t)).numpy()[rows, z]  # (M, K)
        jump = np.minimum((rng.random(M)[:, None] >= np.cumsum(A, axis=1)).sum(1), cfg.K - 1)
        z = np.where(stay, z, jump)
        c = np.where(stay, c + 1, 1)
        tr = model.transition_dists(x, u_t)
        zt = torch.as_tensor(z)
        mean, std = tr.mean[rows, zt], tr.std[rows, zt]
        x = mean + std * torch.as_tensor(rng.standard_normal((M, cfg.state_dim)), dtype=DTYPE)
        em = model.emission_dist(x)
        y_t = em.mean + em.std * torch.as_tensor(rng.standard_normal((M, cfg.obs_dim)), dtype=DTYPE)
        ys[:, h] = y_t.numpy()
        zs[:, h] = z
        cs[:, h] = c
    if norm is not None:
        ys = norm.denormalize(ys)
    return ForecastResult(ys, zs, cs, start)


def quantile_weights(levels: Sequence[float]) -> np.ndarray:
    """Width of each level's cell when [0, 1] is split at midpoints between levels."""
    lv = np.asarray(levels, dtype=np.float64)
    if lv.size == 0:
        raise ValueError("empty quantile grid")
    if np.any(lv <= 0) or np.any(lv >= 1) or np.any(np.diff(lv) <= 0):
        raise ValueError("quantile levels must be sorted and inside (0, 1)")
    edges = np.concatenate([[0.0], 0.5 * (lv[1:] + lv[:-1]), [1.0]])
    return np.diff(edges)


def pinball(q, y, alpha):
    return (alpha - (y < q)) * (y - q)


def crps(samples, y: float, levels: Sequence[float] = DEFAULT_LEVELS) -> float:
    """Quantile-grid CRPS: sum over levels of 2 * pinball(F^-1(alpha), y) * d alpha.

    F^-1 is the empirical (inverse-CDF) quantile function of ``samples``.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ValueError("need at least one sample")
    w = quantile_weights(levels)
    q = np.quantile(samples, levels, method="inverted_cdf")
    return float(np.sum(2.0 * pinball(q, y, np.asarray(levels)) * w))


def crps_energy(samples, y: float) -> float:
    """E|X - y| - E|X - X'| / 2 under the empirical distribution of ``samples``."""
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    n = x.size
    first = np.mean(np.abs(x - y))
    # sum_{i,j} |x_i - x_j| = 2 sum_i (2i - n + 1) x_(i) for sorted x
    pair = 2.0 * np.sum((2 * np.arange(n) - n + 1) * x) / n**2
    return float(first - 0.5 * pair)


def series_crps(result_samples: np.ndarray, truth: np.ndarray, levels: Sequence[float] = DEFAULT_LEVELS) -> float:
    """Mean CRPS over horizon steps (and dimensions) of one forecast."""
    truth = np.asarray(truth, dtype=np.float64).reshape(result_samples.shape[1], -1)
    vals = [
        crps(result_samples[:, h, j], truth[h, j], levels)
        for h in range(truth.shape[0])
        for j in range(truth.shape[1])
    ]
    return float(np.mean(vals)) if vals else 0.0


def persistence_forecast(y: np.ndarray, horizon: int) -> np.ndarray:
    """Naive forecaster as a single 'sample' path repeating the last value."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return np.repeat(y[-1][None, None, :], horizon, axis=1)


def write_forecasts(
    items: Sequence[tuple[int, ForecastResult]],
    path: str | Path,
    levels: Sequence[float] = DEFAULT_LEVELS,
) -> None:
    """One JSON object per series: id, levels, quantiles (levels x horizon), mean."""
    with open(path, "w") as fh:
        for sid, res in items:
            q = res.quantiles(levels)[..., 0]
            fh.write(
                json.dumps(
                    {
                        "id": int(sid),
                        "levels": list(levels),
                        "quantiles": q.tolist(),
                        "mean": res.mean()[:, 0].tolist(),
                    }
                )
                + "\n"
            )


def write_crps_table(rows: Sequence[tuple[int, float]], path: str | Path) -> None:
    vals = np.array([r[1] for r in rows], dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("series_id\tcrps\n")
        for sid, v in rows:
            fh.write(f"{sid}\t{v:.6f}\n")
        if len(vals):
            fh.write(f"mean±std\t{vals.mean():.4f}±{vals.std():.4f}\n")
