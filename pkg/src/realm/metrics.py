"""Binary-classification metrics and the bootstrap report.

All four metrics live in [0, 1] internally; rendered tables multiply by
100. AUROC is the tie-aware Mann-Whitney probability, AUPRC is step-wise
average precision (no interpolation), min(+P, Se) is the best balanced
single-threshold operating point, and F1 is evaluated at a fixed 0.5
threshold. The bootstrap report resamples the evaluation set with
replacement, redrawing any resample that lost one of the classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("auroc", "auprc", "min_p_se", "f1")


class MetricError(ValueError):
    pass


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"length mismatch: {scores.shape[0]} scores, {labels.shape[0]} labels")
    if scores.size == 0:
        raise MetricError("empty inputs")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def bce_loss(y_hat: Sequence[float], y: Sequence[int]) -> float:
    """Mean binary cross-entropy; probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    p, labels = _validate(y_hat, y)
    p = np.clip(p, 1e-7, 1.0 - 1e-7)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1.0 - p)))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative), ties counted half."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("undefined AUROC: needs both classes")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: sum of precision times recall increment over
    descending distinct-score thresholds."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("undefined AUPRC: no positives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # Group tied scores: all members of a tie enter together.
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    boundaries = np.append(distinct, s.size - 1)
    tp = np.cumsum(y)[boundaries].astype(np.float64)
    n_at = (boundaries + 1).astype(np.float64)
    precision = tp / n_at
    recall_step = np.diff(np.concatenate([[0.0], tp])) / n_pos
    return float(np.sum(precision * recall_step))


def min_p_se(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Max over decision thresholds of min(precision, sensitivity)."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("undefined min(+P, Se): needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    boundaries = np.append(distinct, s.size - 1)
    tp = np.cumsum(y)[boundaries].astype(np.float64)
    n_at = (boundaries + 1).astype(np.float64)
    precision = tp / n_at
    sensitivity = tp / n_pos
    return float(np.max(np.minimum(precision, sensitivity)))


def f1(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    """F1 at a fixed threshold (predict positive when score >= threshold);
    0 by convention when precision + recall is 0."""
    s, y = _validate(scores, labels)
    pred = s >= threshold
    tp = float(np.sum(pred & (y == 1)))
    fp = float(np.sum(pred & (y == 0)))
    fn = float(np.sum(~pred & (y == 1)))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def compute_all(scores: Sequence[float], labels: Sequence[int]) -> dict[str, float]:
    return {
        "auroc": auroc(scores, labels),
        "auprc": auprc(scores, labels),
        "min_p_se": min_p_se(scores, labels),
        "f1": f1(scores, labels),
    }


@dataclass
class MetricReport:
    """Per-metric mean and std over B bootstrap resamples."""

    mean: dict[str, float]
    std: dict[str, float]
    b: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "metrics": {
                name: {"mean": self.mean[name], "std": self.std[name]} for name in METRIC_NAMES
            },
            "metrics_x100": {
                name: {
                    "mean": round(100 * self.mean[name], 2),
                    "std": round(100 * self.std[name], 2),
                }
                for name in METRIC_NAMES
            },
            "bootstrap": {"b": self.b, "seed": self.seed},
        }

    def render(self, name: str) -> str:
        """Table cell rendering, metrics scaled by 100: e.g. '86.22±0.81'."""
        return f"{100 * self.mean[name]:.2f}±{100 * self.std[name]:.2f}"


def bootstrap_metrics(
    scores: Sequence[float],
    labels: Sequence[int],
    b: int = 10,
    seed: int = 0,
    max_retries: int = 100,
) -> MetricReport:
    """B with-replacement resamples of (score, label) pairs, each of the
    original size. Resamples holding a single class are redrawn; the retry
    budget is per draw."""
    if b < 1:
        raise MetricError(f"b must be >= 1, got {b}")
    s, y = _validate(scores, labels)
    rng = np.random.default_rng(seed)
    values = {name: [] for name in METRIC_NAMES}
    for _ in range(b):
        for attempt in range(max_retries + 1):
            idx = rng.integers(0, s.size, size=s.size)
            if 0 < y[idx].sum() < s.size:
                break
        else:
            raise MetricError(f"could not draw a two-class resample in {max_retries} retries")
        for name, value in compute_all(s[idx], y[idx]).items():
            values[name].append(value)
    mean = {name: float(np.mean(v)) for name, v in values.items()}
    ddof = 1 if b > 1 else 0
    std = {name: float(np.std(v, ddof=ddof)) for name, v in values.items()}
    return MetricReport(mean=mean, std=std, b=b, seed=seed)
