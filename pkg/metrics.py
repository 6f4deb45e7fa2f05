"""Saliency evaluation metrics: KLD, CC, SIM, NSS, AUC-Judd and shuffled AUC.

Metrics that are undefined for an input (no fixations, empty negative pool)
return ``None`` and show up as missing values in reports.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.metrics import auc, roc_auc_score

from error_handler import ShapeError

logger = logging.getLogger(__name__)

METRIC_NAMES = ("kld", "cc", "sim", "nss", "auc_j", "auc_s")
DEFAULT_EPSILON = 1e-7
STD_FLOOR = 1e-12


@dataclass
class MetricsReport:
    kld: Optional[float]
    cc: Optional[float]
    sim: Optional[float]
    nss: Optional[float]
    auc_j: Optional[float]
    auc_s: Optional[float]

    def as_row(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def _as_map(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D map, got shape {arr.shape}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")


def _normalized(values: np.ndarray, name: str) -> Optional[np.ndarray]:
    total = values.sum()
    if total <= 0:
        return None
    if abs(total - 1.0) > 1e-6:
        # predictions are sigmoid maps and never sum to 1
        log = logger.debug if name == "prediction" else logger.warning
        log(f"Normalizing {name} (sum {total:.6g})")
        return values / total
    return values


def kld(Y_hat, Y, epsilon: float = DEFAULT_EPSILON) -> Optional[float]:
    """Σ Y·log(ε + Y/(ε + Ŷ)) on sum-normalized maps; lower is better."""
    pred, target = _as_map(Y_hat, "prediction"), _as_map(Y, "saliency")
    _check_same_shape(pred, target)
    pred_n, target_n = _normalized(pred, "prediction"), _normalized(target, "saliency")
    if pred_n is None or target_n is None:
        logger.warning("⚠️ KLD undefined for a zero-sum map")
        return None
    return float(np.sum(target_n * np.log(epsilon + target_n / (epsilon + pred_n))))


def cc(Y_hat, Y) -> float:
    """Pearson correlation with population standard deviations."""
    pred, target = _as_map(Y_hat, "prediction"), _as_map(Y, "saliency")
    _check_same_shape(pred, target)
    pred_std, target_std = pred.std(), target.std()
    if pred_std < STD_FLOOR or target_std < STD_FLOOR:
        logger.warning("⚠️ CC of a constant map is defined as 0")
        return 0.0
    cov = np.mean((pred - pred.mean()) * (target - target.mean()))
    return float(np.clip(cov / (pred_std * target_std), -1.0, 1.0))


def sim(Y_hat, Y) -> float:
    """Histogram intersection of the two normalized maps."""
    pred, target = _as_map(Y_hat, "prediction"), _as_map(Y, "saliency")
    _check_same_shape(pred, target)
    pred_n, target_n = _normalized(pred, "prediction"), _normalized(target, "saliency")
    if pred_n is None or target_n is None:
        logger.warning("⚠️ SIM of a zero-sum map is defined as 0")
        return 0.0
    return float(np.minimum(pred_n, target_n).sum())


def nss(Y_hat, P) -> Optional[float]:
    pred, fixations = _as_map(Y_hat, "prediction"), _as_map(P, "fixations")
    _check_same_shape(pred, fixations)
    mask = fixations > 0
    if not mask.any():
        return None
    std = pred.std()
    if std < STD_FLOOR:
        logger.warning("⚠️ NSS of a constant map is defined as 0")
        return 0.0
    return float(((pred - pred.mean()) / std)[mask].mean())


def auc_judd(Y_hat, P) -> Optional[float]:
    """ROC area, fixations against all other pixels.

    Thresholds sweep the distinct saliency values found at fixations; pixels
    tied with a threshold count as above it, and the curve is closed at (1, 1).
    """
    pred, fixations = _as_map(Y_hat, "prediction"), _as_map(P, "fixations")
    _check_same_shape(pred, fixations)
    mask = fixations > 0
    n_pos, n_neg = int(mask.sum()), int((~mask).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    positives = pred[mask]
    negatives = pred[~mask]
    thresholds = np.unique(positives)[::-1]
    tpr = [0.0] + [np.count_nonzero(positives >= t) / n_pos for t in thresholds] + [1.0]
    fpr = [0.0] + [np.count_nonzero(negatives >= t) / n_neg for t in thresholds] + [1.0]
    return float(auc(fpr, tpr))


def auc_shuffled(Y_hat, P, other_fixations: Sequence, seed: int = 0, n_splits: int = 10) -> Optional[float]:
    """ROC area of fixations against fixation locations borrowed from other frames.

    Each of ``n_splits`` rounds draws as many negatives as there are fixations
    from the pooled other-frame fixation locations.
    """
    pred, fixations = _as_map(Y_hat, "prediction"), _as_map(P, "fixations")
    _check_same_shape(pred, fixations)
    mask = fixations > 0
    if not mask.any():
        return None
    pool = np.zeros(pred.shape, dtype=bool)
    for other in other_fixations:
        other = _as_map(other, "shuffle fixations")
        _check_same_shape(pred, other)
        pool |= other > 0
    pool_scores = pred[pool]
    if pool_scores.size == 0:
        logger.warning("⚠️ Shuffled AUC has an empty negative pool")
        return None

    positives = pred[mask]
    n = positives.size
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(n_splits):
        negatives = rng.choice(pool_scores, size=n, replace=pool_scores.size < n)
        scores.append(roc_auc_score(labels, np.concatenate([positives, negatives])))
    return float(np.mean(scores))


def metrics_report(Y_hat, Y, P, shuffle_pool: Sequence = (), seed: int = 0, n_splits: int = 10,
                   epsilon: float = DEFAULT_EPSILON) -> MetricsReport:
    pred = _as_map(Y_hat, "prediction")
    target = _as_map(Y, "saliency")
    fixations = _as_map(P, "fixations")
    _check_same_shape(pred, target)
    _check_same_shape(pred, fixations)
    return MetricsReport(
        kld=kld(pred, target, epsilon),
        cc=cc(pred, target),
        sim=sim(pred, target),
        nss=nss(pred, fixations),
        auc_j=auc_judd(pred, fixations),
        auc_s=auc_shuffled(pred, fixations, shuffle_pool, seed=seed, n_splits=n_splits) if len(shuffle_pool) else None,
    )


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of each metric over the reports that define it."""
    means = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        means[name] = float(np.mean(values)) if values else None
    return MetricsReport(**means)
