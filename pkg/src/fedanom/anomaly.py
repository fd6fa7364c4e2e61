"""Threshold-based anomaly scoring on reconstruction errors.

A detector is a trained autoencoder plus a scalar cutoff. The cutoff is
derived from the distribution of reconstruction errors on held-out benign
traffic: mean plus ``alpha`` population standard deviations. Scores strictly
above the cutoff are flagged as anomalous.
"""

from dataclasses import dataclass

import numpy as np

from fedanom.errors import ConfigError

DEFAULT_ALPHA = 3.0


@dataclass(frozen=True)
class DetectionThreshold:
    """Scalar anomaly cutoff plus the score statistics it came from."""

    tr: float
    mean_mse: float
    std_mse: float
    alpha: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigError("threshold needs at least 2 samples")
        if not (self.std_mse >= 0.0):
            raise ConfigError("std_mse must be non-negative")
        if self.tr != self.mean_mse + self.alpha * self.std_mse:
            raise ConfigError("tr does not equal mean_mse + alpha * std_mse")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with the malicious class as positive."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ConfigError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class Metrics:
    """Detection ratios; a ratio with an empty denominator is NaN."""

    acc: float
    fpr: float
    tpr: float
    tnr: float


def _check_scores(scores, minimum=None):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"expected a 1-d score vector, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if minimum is not None and scores.size and scores.min() < minimum:
        raise ValueError(f"scores must be >= {minimum}")
    return scores


def compute_threshold(mse_scores, alpha: float = DEFAULT_ALPHA) -> DetectionThreshold:
    """Cutoff at mean plus alpha population standard deviations.

    The standard deviation divides by N, not N-1.
    """
    scores = _check_scores(mse_scores, minimum=0.0)
    if scores.size < 2:
        raise ValueError("need at least 2 scores to fit a threshold")
    if not np.isfinite(alpha) or alpha < 0.0:
        raise ValueError("alpha must be finite and non-negative")
    mean = float(np.mean(scores))
    std = float(np.std(scores))
    return DetectionThreshold(
        tr=mean + alpha * std,
        mean_mse=mean,
        std_mse=std,
        alpha=float(alpha),
        n_samples=int(scores.size),
    )


def detect(scores, threshold: DetectionThreshold):
    """Label each score: 1 if strictly above the cutoff, else 0."""
    scores = _check_scores(scores)
    return (scores > threshold.tr).astype(np.int64)


def confusion(pred, truth) -> ConfusionMatrix:
    """Tally predictions against ground truth (1 = malicious)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("pred and truth must be 1-d vectors of equal length")
    for name, v in (("pred", pred), ("truth", truth)):
        if not np.all((v == 0) | (v == 1)):
            raise ValueError(f"{name} must contain only 0 and 1")
    p = pred.astype(bool)
    t = truth.astype(bool)
    return ConfusionMatrix(
        tp=int(np.sum(p & t)),
        tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy and the three rate metrics from a confusion matrix.

    Rates with no samples in their denominator come back as NaN so the
    caller can report them as not applicable instead of a silent zero.
    """
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")

    def ratio(num, den):
        return num / den if den > 0 else float("nan")

    return Metrics(
        acc=(cm.tp + cm.tn) / cm.total,
        fpr=ratio(cm.fp, cm.tn + cm.fp),
        tpr=ratio(cm.tp, cm.tp + cm.fn),
        tnr=ratio(cm.tn, cm.tn + cm.fp),
    )
