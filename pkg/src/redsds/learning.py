"""ELBO objective, temperature annealing and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import hsmm
from .datasets import TimeSeriesRecord
from .model import RedSDS
from .substrate import (
    DTYPE,
    LRSchedule,
    OptimizerState,
    backward,
    load_checkpoint,
    optimizer_step,
    optimizer_tensors,
    param_store,
    restore_optimizer,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A non-finite value appeared during training or evaluation."""


@dataclass
class AnnealSchedule:
    initial: float = 10.0
    minimum: float = 1.0
    decay_rate: float = 0.99
    begin_step: int = 1000
    decay_every: int = 50
    anneal: bool = True  # False: held at ``minimum`` throughout

    def __post_init__(self):
        if not self.initial >= self.minimum > 0:
            raise ValueError("need initial >= minimum > 0")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.begin_step < 0 or self.decay_every < 1:
            raise ValueError("begin_step must be >= 0 and decay_every >= 1")


def temperature_at(schedule: AnnealSchedule, step: int) -> float:
    if not schedule.anneal:
        return schedule.minimum
    if step < schedule.begin_step:
        return schedule.initial
    n = (step - schedule.begin_step) // schedule.decay_every
    return max(schedule.minimum, schedule.initial * schedule.decay_rate**n)


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 20000
    peak_lr: float = 2e-4
    initial_lr: float = 0.0
    warmup_steps: int = 1000
    lr_decay_rate: float = 0.99
    clip_norm: float = 10.0
    weight_decay: float = 1e-5
    seed: int = 0
    num_samples: int = 1
    checkpoint_every: int = 0  # 0: only at the end
    log_every: int = 1

    def __post_init__(self):
        for name in ("batch_size", "steps", "num_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def optimizer_state(self) -> OptimizerState:
        sched = LRSchedule(
            peak_lr=self.peak_lr,
            warmup_steps=self.warmup_steps,
            total_steps=self.steps,
            initial_lr=self.initial_lr,
            decay_rate=self.lr_decay_rate,
        )
        return OptimizerState(schedule=sched, weight_decay=self.weight_decay, clip_norm=self.clip_norm)


@dataclass
class Batch:
    """Equal-length series stacked for one ELBO evaluation."""

    y: torch.Tensor  # (B, T, d)
    controls: Optional[torch.Tensor] = None  # (B, T, 1 + time_dim)
    log_det: Optional[torch.Tensor] = None  # (B,)
    ids: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[TimeSeriesRecord], log_det: bool = False) -> "Batch":
        lengths = {len(r.target) for r in records}
        if len(lengths) != 1:
            raise ValueError(f"batch series must share a length, got {sorted(lengths)}")
        y = torch.as_tensor(np.stack([r.target for r in records]), dtype=DTYPE)
        has_ctrl = [r.controls is not None for r in records]
        if any(has_ctrl) and not all(has_ctrl):
            raise ValueError("controls must be present for all series or none")
        controls = torch.as_tensor(np.stack([r.controls for r in records]), dtype=DTYPE) if all(has_ctrl) else None
        ld = None
        if log_det:
            ld = torch.as_tensor([r.log_det if r.log_det is not None else 0.0 for r in records], dtype=DTYPE)
        return cls(y, controls, ld, [r.id for r in records])


@dataclass
class ElboTerms:
    elbo: torch.Tensor  # scalar, mean over batch and samples
    loglik: torch.Tensor  # (S, B) log p(y, x~)
    log_q: torch.Tensor  # (S, B)
    log_det: Optional[torch.Tensor]


def sample_noise(shape, seed) -> torch.Tensor:
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(shape), dtype=DTYPE)


def elbo_terms(model: RedSDS, batch: Batch, noise: torch.Tensor) -> ElboTerms:
    """Monte Carlo ELBO; ``noise`` is (S, B, T, m) or (B, T, m) for S = 1."""
    if noise.dim() == 3:
        noise = noise.unsqueeze(0)
    S = noise.shape[0]
    B, T, _ = batch.y.shape
    u = model.controls_from_raw(batch.controls, (B, T))
    h1 = model.inference.embed_observations(batch.y)
    # fold samples into the batch axis
    rep = lambda t: t.unsqueeze(0).expand((S,) + t.shape).reshape((S * B,) + t.shape[1:])
    post = model.inference.rollout(rep(h1), noise.reshape((S * B,) + noise.shape[2:]), rep(u))
    dp = model.dp_inputs(rep(batch.y), post.x, rep(u))
    finite = torch.isfinite(dp.b.detach()).reshape(S, B, -1).all(-1).all(0)
    if not finite.all():
        bad = [batch.ids[i] if batch.ids else i for i in range(B) if not finite[i]]
        raise NumericError(f"non-finite per-step likelihoods for series {bad}")
    _, loglik = hsmm.forward(dp)
    loglik = loglik.reshape(S, B)
    log_q = post.log_q.reshape(S, B)
    per = loglik - log_q
    if batch.log_det is not None:
        per = per + batch.log_det
    value = per.mean()
    if not torch.isfinite(value):
        bad = [batch.ids[i] if batch.ids else i for i in range(B) if not torch.isfinite(per[:, i]).all()]
        raise NumericError(f"non-finite ELBO for series {bad}")
    return ElboTerms(value, loglik, log_q, batch.log_det)


def elbo(model: RedSDS, batch: Batch, noise: torch.Tensor) -> torch.Tensor:
    return elbo_terms(model, batch, noise).elbo


def evaluate_elbo(model: RedSDS, batch: Batch, seed: int = 0, num_samples: int = 1) -> float:
    B, T, _ = batch.y.shape
    with torch.no_grad():
        noise = sample_noise((num_samples, B, T, model.config.state_dim), seed)
        return float(elbo(model, batch, noise))


@dataclass
class TrainResult:
    model: RedSDS
    metrics: list[dict]
    optimizer: OptimizerState


METRIC_FIELDS = ("step", "elbo", "tau_z", "tau_rho", "lr", "grad_norm")


def train(
    model: RedSDS,
    dataset: Sequence[TimeSeriesRecord],
    config: TrainConfig,
    tau_z: AnnealSchedule,
    tau_rho: AnnealSchedule,
    out_dir: Optional[str | Path] = None,
    resume: Optional[str | Path] = None,
    use_log_det: bool = False,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Maximise the ELBO with Adam; deterministic given ``config.seed``.

    Batches and posterior noise for step ``s`` are drawn from generators
    seeded by ``(seed, s)``, so a resumed run replays the uninterrupted one.
    ``stop_after`` ends the loop early (the schedule still spans
    ``config.steps``).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = param_store(model)
    opt = config.optimizer_state()
    if resume is not None:
        saved = load_checkpoint(resume)
        load_params(model, saved)
        restore_optimizer(opt, saved)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.tsv", "a")
    metrics: list[dict] = []
    end = config.steps if stop_after is None else min(config.steps, stop_after)
    n = len(dataset)
    B = min(config.batch_size, n)
    try:
        for step in range(opt.step, end):
            tz = temperature_at(tau_z, step)
            tr = temperature_at(tau_rho, step)
            model.set_temperatures(tz, tr)
            rng = np.random.default_rng([config.seed, step])
            idx = np.sort(rng.choice(n, size=B, replace=False))
            records = [dataset[i] for i in idx]
            batch = Batch.from_records(records, log_det=use_log_det)
            T = batch.y.shape[1]
            noise = torch.as_tensor(
                rng.standard_normal((config.num_samples, B, T, model.config.state_dim)), dtype=DTYPE
            )
            try:
                value = elbo(model, batch, noise)
            except NumericError as exc:
                _dump(out, step, records)
                raise NumericError(f"step {step}: {exc}") from exc
            grads = backward(-value, params)
            if not all(torch.isfinite(g).all() for g in grads.values()):
                _dump(out, step, records)
                raise NumericError(f"step {step}: non-finite gradient")
            info = optimizer_step(params, grads, opt)
            row = {
                "step": step,
                "elbo": float(value.detach()),
                "tau_z": tz,
                "tau_rho": tr,
                "lr": info["lr"],
                "grad_norm": info["grad_norm"],
            }
            metrics.append(row)
            if metrics_fh is not None and step % config.log_every == 0:
                metrics_fh.write("\t".join(repr(row[k]) for k in METRIC_FIELDS) + "\n")
                metrics_fh.flush()
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_training_state(model, opt, out / f"checkpoint_{step + 1:07d}.bin")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        save_training_state(model, opt, out / "checkpoint.bin")
    return TrainResult(model, metrics, opt)


def save_training_state(model: RedSDS, opt: OptimizerState, path: Path) -> None:
    tensors = dict(param_store(model))
    tensors.update(optimizer_tensors(opt))
    tensors["temperature.tau_z"] = torch.tensor(model.tau_z, dtype=DTYPE)
    tensors["temperature.tau_rho"] = torch.tensor(model.tau_rho, dtype=DTYPE)
    save_checkpoint(tensors, path)


def load_params(model: RedSDS, tensors: dict) -> None:
    params = param_store(model)
    missing = [n for n in params if n not in tensors]
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            if tensors[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.copy_(tensors[name])
    if "temperature.tau_z" in tensors:
        model.set_temperatures(float(tensors["temperature.tau_z"]), float(tensors["temperature.tau_rho"]))


def _dump(out: Optional[Path], step: int, records: Iterable[TimeSeriesRecord]) -> None:
    if out is None:
        return
    path = out / f"nan_batch_step{step}.json"
    with open(path, "w") as fh:
        json.dump({"step": step, "series": [r.to_json() for r in records]}, fh)
    log.error("non-finite value at step %d; batch written to %s", step, path)
