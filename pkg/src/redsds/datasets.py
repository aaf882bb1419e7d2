"""Synthetic generators, JSON-lines I/O and the dancing-bees preprocessing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

WALL = 10.0


@dataclass
class TimeSeriesRecord:
    id: int
    target: np.ndarray  # (T, d)
    controls: Optional[np.ndarray] = None  # (T, 1 + time_dim); column 0 is the static id
    labels: Optional[np.ndarray] = None  # (T,)
    start: Optional[str] = None
    freq: Optional[str] = None
    norm: Optional[dict] = None  # normalisation metadata, see forecasting.normalize

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.ndim == 1:
            self.target = self.target[:, None]
        if self.target.ndim != 2:
            raise ValueError(f"series {self.id}: target must be (T, d)")
        T = len(self.target)
        if self.controls is not None:
            self.controls = np.asarray(self.controls, dtype=np.float64)
            if self.controls.ndim != 2 or len(self.controls) != T:
                raise ValueError(f"series {self.id}: controls must have {T} rows, got shape {self.controls.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (T,):
                raise ValueError(f"series {self.id}: labels have length {len(self.labels)}, target has {T}")

    def __len__(self) -> int:
        return len(self.target)

    @property
    def log_det(self) -> Optional[float]:
        return None if self.norm is None else self.norm["log_det"]

    def to_json(self) -> dict:
        out: dict = {"id": int(self.id), "target": self.target.tolist()}
        if self.controls is not None:
            out["controls"] = self.controls.tolist()
        if self.labels is not None:
            out["labels"] = self.labels.tolist()
        if self.start is not None:
            out["start"] = self.start
        if self.freq is not None:
            out["freq"] = self.freq
        if self.norm is not None:
            out["norm"] = self.norm
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TimeSeriesRecord":
        unknown = set(obj) - {"id", "target", "controls", "labels", "start", "freq", "norm"}
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)}")
        return cls(
            id=int(obj["id"]),
            target=obj["target"],
            controls=obj.get("controls"),
            labels=obj.get("labels"),
            start=obj.get("start"),
            freq=obj.get("freq"),
            norm=obj.get("norm"),
        )


def write_jsonl(records: Iterable[TimeSeriesRecord], path: str | Path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_jsonl(path: str | Path) -> list[TimeSeriesRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(TimeSeriesRecord.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


# -- bouncing ball ------------------------------------------------------------


def bouncing_ball_paths(position: np.ndarray, velocity: np.ndarray, T: int):
    """Noiseless positions and velocities (N, T) with reflection at 0 and 10."""
    N = len(position)
    pos = np.empty((N, T))
    vel = np.empty((N, T))
    p = position.astype(np.float64).copy()
    v = velocity.astype(np.float64).copy()
    pos[:, 0], vel[:, 0] = p, v
    for t in range(1, T):
        p = p + v
        hi = p > WALL
        lo = p < 0.0
        p = np.where(hi, 2 * WALL - p, p)
        p = np.where(lo, -p, p)
        v = np.where(hi | lo, -v, v)
        pos[:, t], vel[:, t] = p, v
    return pos, vel


def gen_bouncing_ball(n_series: int, T: int = 100, seed: int = 0, noise_std: float = 0.1) -> list[TimeSeriesRecord]:
    """Ball between walls at 0 and 10, |velocity| < 0.5; label 1 while moving up."""
    if n_series < 1 or T < 1:
        raise ValueError("n_series and T must be >= 1")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0.0, WALL, size=n_series)
    while np.any(start == 0.0):
        start = np.where(start == 0.0, rng.uniform(0.0, WALL, size=n_series), start)
    velocity = rng.uniform(-0.5, 0.5, size=n_series)
    pos, vel = bouncing_ball_paths(start, velocity, T)
    obs = pos + noise_std * rng.standard_normal(pos.shape)
    labels = (vel > 0).astype(np.int64)
    return [TimeSeriesRecord(id=i, target=obs[i][:, None], labels=labels[i]) for i in range(n_series)]


# -- 3 mode switching linear system ------------------------------------------

THREE_MODE_D_MIN = 6
THREE_MODE_D_MAX = 20

# duration pmfs over d = 6..20
_RHO = [
    {6: Fraction(2, 17), 11: Fraction(5, 17), 16: Fraction(7, 17), 20: Fraction(3, 17)},
    {8: Fraction(1, 4), 17: Fraction(2, 5), 19: Fraction(3, 10), 20: Fraction(1, 20)},
    {13: Fraction(3, 17), 16: Fraction(7, 17), 18: Fraction(5, 17), 20: Fraction(2, 17)},
]

THREE_MODE_SWITCH = np.array([[0.1, 0.2, 0.7], [0.3, 0.5, 0.2], [0.3, 0.3, 0.4]])


def three_mode_rho() -> list[list[Fraction]]:
    """Exact duration pmfs as K rows of d_max entries (index j is duration j + 1)."""
    return [[row.get(d, Fraction(0)) for d in range(1, THREE_MODE_D_MAX + 1)] for row in _RHO]


def increment_probs(rho: Sequence) -> list:
    """v(c) = 1 - rho(c) / sum_{d >= c} rho(d); 1 where the tail is empty, 0 at d_max."""
    out = []
    D = len(rho)
    for c in range(D):
        tail = sum(rho[c:])
        out.append(1 - rho[c] / tail if tail else 1)
    out[-1] = 0
    return out


@dataclass
class ThreeModeSystem:
    """Ground-truth parameters (shared across all series of a dataset)."""

    rho: np.ndarray  # (3, 20)
    v: np.ndarray  # (3, 20)
    switch: np.ndarray  # (3, 3)
    A: np.ndarray  # (3, 2, 2)
    b: np.ndarray  # (3, 2)
    c: np.ndarray  # (3, 2)
    d: np.ndarray  # (3,)
    state_var: float = 0.01
    obs_var: float = 0.04
    init_mean: np.ndarray = field(default_factory=lambda: np.array([2.0, 0.0]))
    init_var: float = 0.01

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "ThreeModeSystem":
        rho = np.array([[float(p) for p in row] for row in three_mode_rho()])
        v = np.array([[float(p) for p in increment_probs(row)] for row in three_mode_rho()])
        angles = [0.0, math.pi / 8, math.pi / 4]
        A = np.stack([0.99 * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]) for a in angles])
        eps = rng.standard_normal((2, 2))
        b = np.stack([np.zeros(2), 0.25 * eps[0], 0.25 * eps[1]])
        c = rng.standard_normal((3, 2))
        d = rng.integers(0, 3, size=3).astype(np.float64)
        return cls(rho=rho, v=v, switch=THREE_MODE_SWITCH.copy(), A=A, b=b, c=c, d=d)


def gen_three_mode(
    n_series: int,
    T: int = 180,
    seed: int = 0,
    system: Optional[ThreeModeSystem] = None,
    trend: float = 0.0,
    return_latents: bool = False,
):
    """Sample the 3-mode explicit-duration SLDS; labels are the 0-based modes.

    ``system`` defaults to one drawn from ``seed``; pass the same system to
    get train and test splits of one dataset. ``trend`` adds ``trend * t`` to
    every observation. With ``return_latents`` also returns a dict with the
    states ``x``, switches ``z`` and 1-based counts ``c`` (each (N, T, ...)).
    """
    if n_series < 1 or T < 1:
        raise ValueError("n_series and T must be >= 1")
    rng = np.random.default_rng(seed)
    sys_ = system if system is not None else ThreeModeSystem.draw(np.random.default_rng([seed, 0]))
    N = n_series
    z = np.empty((N, T), dtype=np.int64)
    cnt = np.empty((N, T), dtype=np.int64)
    x = np.empty((N, T, 2))
    z[:, 0] = rng.integers(0, 3, size=N)
    cnt[:, 0] = 1
    x[:, 0] = sys_.init_mean + math.sqrt(sys_.init_var) * rng.standard_normal((N, 2))
    cum_switch = np.cumsum(sys_.switch, axis=1)
    for t in range(1, T):
        zp, cp = z[:, t - 1], cnt[:, t - 1]
        inc = rng.random(N) < sys_.v[zp, cp - 1]
        u = rng.random(N)
        jumped = (u[:, None] >= cum_switch[zp]).sum(axis=1).clip(max=2)
        z[:, t] = np.where(inc, zp, jumped)
        cnt[:, t] = np.where(inc, cp + 1, 1)
        mean = np.einsum("nij,nj->ni", sys_.A[z[:, t]], x[:, t - 1]) + sys_.b[z[:, t]]
        x[:, t] = mean + math.sqrt(sys_.state_var) * rng.standard_normal((N, 2))
    y = np.einsum("nti,nti->nt", sys_.c[z], x) + sys_.d[z]
    y = y + math.sqrt(sys_.obs_var) * rng.standard_normal((N, T))
    if trend:
        y = y + trend * np.arange(T)[None, :]
    records = [TimeSeriesRecord(id=i, target=y[i][:, None], labels=z[i]) for i in range(N)]
    if return_latents:
        return records, {"x": x, "z": z, "c": cnt, "system": sys_}
    return records


def segment_lengths(labels: Sequence[int], drop_edges: bool = True) -> list[tuple[int, int]]:
    """(label, run length) for each maximal constant run.

    With ``drop_edges`` the first and last runs, which may be truncated by the
    window, are left out.
    """
    runs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            runs.append((int(labels[start]), t - start))
            start = t
    if drop_edges:
        runs = runs[1:-1]
    return runs


# -- dancing bees -------------------------------------------------------------

BEE_CHUNK = 120


@dataclass
class RawBeeTrack:
    id: int
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    labels: np.ndarray


def preprocess_bees(tracks: Sequence[RawBeeTrack], chunk: int = BEE_CHUNK) -> list[TimeSeriesRecord]:
    """Standardise (x, y) per track, build [x, y, sin theta, cos theta] and cut
    fixed-length chunks starting at the first step and every label change.

    Chunks that would run past the end of the track are dropped.
    """
    out = []
    next_id = 0
    for tr in tracks:
        n = len(tr.labels)
        if n < chunk:
            log.warning("bee track %s has %d < %d steps; skipped", tr.id, n, chunk)
            continue
        xs = (tr.x - tr.x.mean()) / tr.x.std()
        ys = (tr.y - tr.y.mean()) / tr.y.std()
        feats = np.stack([xs, ys, np.sin(tr.theta), np.cos(tr.theta)], axis=1)
        labels = np.asarray(tr.labels, dtype=np.int64)
        starts = [0] + [t for t in range(1, n) if labels[t] != labels[t - 1]]
        for s in starts:
            if s + chunk > n:
                continue
            out.append(TimeSeriesRecord(id=next_id, target=feats[s : s + chunk], labels=labels[s : s + chunk]))
            next_id += 1
    return out


def gen_bee_standin(n_tracks: int = 2, T: int = 400, seed: int = 0) -> list[RawBeeTrack]:
    """Small synthetic tracks with the raw bee layout, for exercising the pipeline."""
    rng = np.random.default_rng(seed)
    tracks = []
    for i in range(n_tracks):
        labels = np.empty(T, dtype=np.int64)
        t = 0
        lab = int(rng.integers(0, 3))
        while t < T:
            d = int(rng.integers(20, 60))
            labels[t : t + d] = lab
            t += d
            lab = int((lab + rng.integers(1, 3)) % 3)
        turn = np.array([0.0, 0.08, -0.08])[labels]
        theta = np.cumsum(turn + 0.02 * rng.standard_normal(T))
        step = np.where(labels == 0, 1.0, 0.5)
        x = 50 + np.cumsum(step * np.cos(theta))
        y = 80 + np.cumsum(step * np.sin(theta))
        tracks.append(RawBeeTrack(id=i, x=x, y=y, theta=theta, labels=labels))
    return tracks
