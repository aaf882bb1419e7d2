"""Per-step switch labelling and label-permutation-invariant scores."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import hsmm
from .substrate import DTYPE


def segment(gamma: torch.Tensor | np.ndarray) -> np.ndarray:
    """Most likely switch per step after summing out the count.

    ``gamma`` is (..., T, K, D). Ties go to the smaller switch index.
    """
    g = gamma.detach().cpu().numpy() if isinstance(gamma, torch.Tensor) else np.asarray(gamma)
    return np.argmax(g.sum(-1), axis=-1)


def _check(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"label lengths differ: {pred.size} vs {truth.size}")
    return pred, truth


def confusion(pred, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contingency table with rows = predicted labels, cols = true labels."""
    pred, truth = _check(pred, truth)
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((len(p_vals), len(t_vals)), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    return table, p_vals, t_vals


def matched_accuracy(pred, truth) -> float:
    """Accuracy under the one-to-one relabelling of ``pred`` that maximises it."""
    pred, truth = _check(pred, truth)
    if pred.size == 0:
        return 1.0
    table, _, _ = confusion(pred, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / pred.size


def label_matching(pred, truth) -> dict[int, int]:
    """Predicted label -> true label under the accuracy-maximising assignment.

    Predicted labels left unassigned (more predicted than true labels) are
    absent from the result.
    """
    table, p_vals, t_vals = confusion(pred, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return {int(p_vals[r]): int(t_vals[c]) for r, c in zip(rows, cols)}


def matched_duration_tv(learned_rho, true_rho, pred, truth) -> np.ndarray:
    """Total variation between each true mode's duration pmf and the learned
    pmf of the switch matched to it; modes with no matched switch get 1.0.

    ``learned_rho`` and ``true_rho`` are (K, d_max) with rows indexed by the
    switch / mode label.
    """
    learned = np.asarray(learned_rho, dtype=np.float64)
    true = np.asarray(true_rho, dtype=np.float64)
    if learned.shape[-1] != true.shape[-1]:
        raise ValueError(f"duration supports differ: {learned.shape[-1]} vs {true.shape[-1]}")
    tv = np.ones(len(true))
    for k_pred, k_true in label_matching(pred, truth).items():
        tv[k_true] = 0.5 * np.abs(learned[k_pred] - true[k_true]).sum()
    return tv


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Two constant labelings describe the same one-block partition and score
    1.0; if only one is constant the score is 0.0.
    """
    pred, truth = _check(pred, truth)
    n = pred.size
    table, _, _ = confusion(pred, truth)
    h_p = _entropy(table.sum(1), n)
    h_t = _entropy(table.sum(0), n)
    if h_p == 0.0 and h_t == 0.0:
        return 1.0
    joint = table[table > 0] / n
    outer = np.outer(table.sum(1), table.sum(0))[table > 0] / n**2
    mi = float(np.sum(joint * np.log(joint / outer)))
    denom = 0.5 * (h_p + h_t)
    return max(0.0, min(1.0, mi / denom))


def _comb2(x):
    return x * (x - 1) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index from pair counts."""
    pred, truth = _check(pred, truth)
    n = pred.size
    table, _, _ = confusion(pred, truth)
    index = _comb2(table.astype(np.float64)).sum()
    a = _comb2(table.sum(1).astype(np.float64)).sum()
    b = _comb2(table.sum(0).astype(np.float64)).sum()
    total = _comb2(float(n))
    if total == 0:
        return 1.0
    expected = a * b / total
    max_index = 0.5 * (a + b)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def score(pred, truth) -> dict[str, float]:
    return {"accuracy": matched_accuracy(pred, truth), "nmi": nmi(pred, truth), "ari": ari(pred, truth)}


def posterior_labels(model, records, batch_size: int = 256) -> list[np.ndarray]:
    """Switch labels from the smoothed posterior given the posterior-mean state path.

    Records of equal length are scored together in chunks of ``batch_size``.
    """
    from .learning import Batch

    out: list = [None] * len(records)
    by_len: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_len.setdefault(len(r), []).append(i)
    with torch.no_grad():
        for T, idx in sorted(by_len.items()):
            for start in range(0, len(idx), batch_size):
                chunk = idx[start : start + batch_size]
                batch = Batch.from_records([records[i] for i in chunk])
                u = model.controls_from_raw(batch.controls, (len(chunk), T))
                noise = torch.zeros((len(chunk), T, model.config.state_dim), dtype=DTYPE)
                post = model.inference(batch.y, noise, u)
                labels = segment(hsmm.posterior(model.dp_inputs(batch.y, post.mean, u)).gamma)
                for j, i in enumerate(chunk):
                    out[i] = labels[j]
    return out


def write_labels(labelings: Sequence[Sequence[int]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for labels in labelings:
            fh.write(" ".join(str(int(v)) for v in labels) + "\n")


def read_labels(path: str | Path) -> list[np.ndarray]:
    with open(path) as fh:
        return [np.array([int(v) for v in line.split()], dtype=np.int64) for line in fh if line.strip()]


def write_metrics_table(rows: Sequence[tuple], path: str | Path) -> None:
    """Tab-separated ``series_id accuracy nmi ari`` plus a mean +- std footer."""
    arr = np.array([[r[1], r[2], r[3]] for r in rows], dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("series_id\taccuracy\tnmi\tari\n")
        for sid, acc, n, a in rows:
            fh.write(f"{sid}\t{acc:.6f}\t{n:.6f}\t{a:.6f}\n")
        mean, std = arr.mean(0), arr.std(0)
        fh.write("mean±std\t" + "\t".join(f"{m:.2f}±{s:.2f}" for m, s in zip(mean, std)) + "\n")
