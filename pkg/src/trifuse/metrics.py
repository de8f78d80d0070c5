"""Evaluation metrics: binary accuracy, weighted F1, MAE, Pearson correlation.

Binary accuracy and F1 binarize at zero. The default convention drops samples
whose true label is exactly zero and classifies the rest as negative vs
positive; `zero_exclusion=False` switches to the negative vs non-negative
convention that keeps every sample. MAE and correlation always use all
samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(Exception):
    """Metrics undefined for the given inputs."""


@dataclass
class MetricReport:
    acc2: float
    f1: float
    mae: float
    corr: float
    n_eval: int

    def to_dict(self) -> dict:
        return {"acc2": self.acc2, "f1": self.f1, "mae": self.mae,
                "corr": self.corr, "n_eval": self.n_eval}


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        raise MetricError("Pearson correlation undefined for a constant vector")
    r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return min(1.0, max(-1.0, r))


def _weighted_f1(true_pos_class: np.ndarray, pred_pos_class: np.ndarray) -> float:
    """Support-weighted mean of the per-class F1 scores over {neg, pos}."""
    total = true_pos_class.size
    score = 0.0
    for cls in (False, True):
        t = true_pos_class == cls
        p = pred_pos_class == cls
        support = int(t.sum())
        if support == 0:
            continue
        tp = int((t & p).sum())
        precision = tp / p.sum() if p.sum() > 0 else 0.0
        recall = tp / support
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        score += support / total * f1
    return float(score)


def compute_metrics(y_hat, y, zero_exclusion: bool = True) -> MetricReport:
    """Full report for predictions against true labels."""
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y_hat.shape != y.shape:
        raise MetricError(f"length mismatch: {y_hat.shape} vs {y.shape}")
    if y.size == 0:
        raise MetricError("empty evaluation set")

    mae = float(np.mean(np.abs(y_hat - y)))
    corr = _pearson(y_hat, y)

    if zero_exclusion:
        keep = y != 0.0
        if not keep.any():
            raise MetricError("all labels are exactly zero; Acc-2/F1 undefined")
        true_pos = y[keep] > 0.0
        pred_pos = y_hat[keep] > 0.0
        n_eval = int(keep.sum())
    else:
        true_pos = y >= 0.0
        pred_pos = y_hat >= 0.0
        n_eval = y.size

    acc2 = float(np.mean(true_pos == pred_pos))
    f1 = _weighted_f1(true_pos, pred_pos)
    return MetricReport(acc2=acc2, f1=f1, mae=mae, corr=corr, n_eval=n_eval)
