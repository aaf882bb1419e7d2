"""Tensor plumbing: parameter stores, gradients, Adam with warmup/cosine
schedule, finite-difference checks and the binary checkpoint format.

Tensors are ``torch.Tensor`` in float64; reverse-mode differentiation is
torch autograd. Everything here operates on plain ``{name: tensor}`` maps so
the rest of the package never touches ``torch.optim``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64

ParamStore = Dict[str, torch.Tensor]

CHECKPOINT_MAGIC = b"RSDSCKPT"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


def param_store(module: nn.Module) -> ParamStore:
    """Sorted ``{dotted.name: parameter}`` view of a module's parameters."""
    return dict(sorted(module.named_parameters()))


def logsumexp(x: torch.Tensor, dim: int | tuple[int, ...]) -> torch.Tensor:
    """Log-sum-exp that returns -inf (with zero gradient) for all -inf slices.

    ``torch.logsumexp`` back-propagates NaN through slices that are entirely
    -inf; the DP recursions produce such slices for structurally impossible
    (switch, count) cells.
    """
    m = x.detach().amax(dim=dim, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    s = torch.exp(x - m).sum(dim=dim, keepdim=True)
    pos = s > 0
    out = torch.where(pos, m + torch.log(torch.where(pos, s, torch.ones_like(s))), torch.full_like(s, -math.inf))
    if isinstance(dim, int):
        dim = (dim,)
    return out.squeeze(dim)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> ParamStore:
    """Gradients of a scalar ``loss`` with respect to every entry of ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.dim() != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: (torch.zeros_like(t) if g is None else g.detach())
        for n, t, g in zip(names, tensors, grads)
    }


def global_norm(grads: Mapping[str, torch.Tensor]) -> float:
    total = 0.0
    for name in sorted(grads):
        total += float(torch.sum(grads[name] * grads[name]))
    return math.sqrt(total)


def clip_by_global_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> tuple[ParamStore, float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the clipped map and the norm before clipping.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}, norm


@dataclass
class LRSchedule:
    """Linear warmup from ``initial_lr`` to ``peak_lr`` then cosine decay.

    ``decay_rate`` is the fraction of the peak removed by the final step:
    the rate at ``total_steps`` is ``peak_lr * (1 - decay_rate)``.
    """

    peak_lr: float = 2e-4
    warmup_steps: int = 1000
    total_steps: int = 20000
    initial_lr: float = 0.0
    decay_rate: float = 0.99

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            frac = (step + 1) / self.warmup_steps
            return self.initial_lr + (self.peak_lr - self.initial_lr) * frac
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / span, 1.0)
        floor = self.peak_lr * (1.0 - self.decay_rate)
        return floor + (self.peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    schedule: LRSchedule = field(default_factory=LRSchedule)
    weight_decay: float = 1e-5
    clip_norm: float | None = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: ParamStore = field(default_factory=dict)
    exp_avg_sq: ParamStore = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
    ascend: bool = False,
) -> dict:
    """One Adam update with global-norm clipping and decoupled weight decay.

    Parameters are updated in place (under ``no_grad``) and ``state`` is
    advanced. ``grads`` are gradients of a loss to minimise unless
    ``ascend`` is set. Returns ``{"lr": ..., "grad_norm": ...}``.
    """
    if set(grads) != set(params):
        raise ContractError("gradient keys do not match parameter keys")
    for name in params:
        if grads[name].shape != params[name].shape:
            raise ContractError(
                f"gradient for {name!r} has shape {tuple(grads[name].shape)}, "
                f"parameter has {tuple(params[name].shape)}"
            )
    clipped, norm = clip_by_global_norm(grads, state.clip_norm)
    lr = state.schedule(state.step)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    sign = -1.0 if ascend else 1.0
    with torch.no_grad():
        for name in sorted(params):
            p = params[name]
            g = clipped[name] * sign
            m = state.exp_avg.get(name)
            v = state.exp_avg_sq.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.exp_avg[name] = m
            state.exp_avg_sq[name] = v
            if state.weight_decay:
                p.mul_(1.0 - lr * state.weight_decay)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps))
    return {"lr": lr, "grad_norm": norm}


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst per-coordinate relative gap between autograd and central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar.
    The relative error of a coordinate is ``|a - b| / max(|a|, |b|, floor)``;
    a constant function gives 0.
    """
    analytic = backward(f(), params)
    worst = 0.0
    with torch.no_grad():
        for name in sorted(params):
            p = params[name]
            flat = p.view(-1)
            g = analytic[name].reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up = float(f())
                flat[i] = orig - step
                down = float(f())
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                a = float(g[i])
                denom = max(abs(a), abs(numeric), floor)
                worst = max(worst, abs(a - numeric) / denom)
    return worst


def save_checkpoint(tensors: Mapping[str, torch.Tensor], path: str | Path) -> None:
    """Write tensors in the documented binary layout.

    Header: 8-byte magic, uint32 version, uint32 count. Then per tensor in
    name order: uint32 name length, UTF-8 name, uint32 rank, rank x uint64
    shape, little-endian float64 payload (row-major).
    """
    names = sorted(tensors)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            t = tensors[name].detach().to(torch.float64).contiguous().cpu()
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.dim()))
            fh.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            fh.write(t.numpy().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ParamStore:
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data, path)
    except struct.error as exc:
        raise ContractError(f"{path}: truncated checkpoint") from exc


def _parse_checkpoint(data: bytes, path) -> ParamStore:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: ParamStore = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        numel = math.prod(shape)
        payload = data[off : off + 8 * numel]
        if len(payload) != 8 * numel:
            raise ContractError(f"{path}: truncated payload for {name!r}")
        off += 8 * numel
        out[name] = torch.from_numpy(np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape))
    return out


def optimizer_tensors(state: OptimizerState) -> ParamStore:
    """Flatten the Adam moments and step counter for checkpointing."""
    out: ParamStore = {"optim.step": torch.tensor(float(state.step), dtype=DTYPE)}
    for name, t in state.exp_avg.items():
        out[f"optim.m.{name}"] = t
    for name, t in state.exp_avg_sq.items():
        out[f"optim.v.{name}"] = t
    return out


def restore_optimizer(state: OptimizerState, tensors: Mapping[str, torch.Tensor]) -> None:
    state.step = int(tensors["optim.step"])
    state.exp_avg = {k[len("optim.m."):]: v.clone() for k, v in tensors.items() if k.startswith("optim.m.")}
    state.exp_avg_sq = {k[len("optim.v."):]: v.clone() for k, v in tensors.items() if k.startswith("optim.v.")}
