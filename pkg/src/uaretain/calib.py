"""Calibration and discrimination metrics, plus attention-vs-ground-truth scoring."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    count: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.count)

    @property
    def n(self) -> int:
        return int(self.count.sum())


@dataclass
class CalibrationReport:
    bins: ReliabilityBins
    ece: float
    auroc: float


def confidence_and_correct(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    """Binary confidence ``max(p, 1-p)`` and whether the hard label (p >= 0.5) is right."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    return np.maximum(p, 1.0 - p), (p >= 0.5).astype(int) == y


def reliability_bins(confidences, correct, n_bins: int = 10, lo: float = 0.0, hi: float = 1.0) -> ReliabilityBins:
    """Equal-width bins on ``[lo, hi]``, half-open except the last, which is closed."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if conf.shape != ok.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if conf.size and (conf.min() < lo or conf.max() > hi):
        raise ValueError(f"confidences must lie in [{lo}, {hi}]")
    edges = lo + (hi - lo) * (np.arange(n_bins + 1) / n_bins)  # k/n is correctly rounded, unlike linspace
    # membership decided against the reported edges; the last bin also takes hi
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    ok_sum = np.bincount(idx, weights=ok, minlength=n_bins)
    occupied = count > 0
    mean_conf = np.divide(conf_sum, count, out=np.zeros(n_bins), where=occupied)
    acc = np.divide(ok_sum, count, out=np.zeros(n_bins), where=occupied)
    return ReliabilityBins(edges, count, mean_conf, acc)


def ece(bins: ReliabilityBins) -> float:
    """Occupancy-weighted mean of |accuracy - confidence| over non-empty bins."""
    n = bins.n
    if n == 0:
        raise ValueError("ECE is undefined for zero predictions")
    occupied = bins.count > 0
    gaps = np.abs(bins.accuracy[occupied] - bins.mean_confidence[occupied])
    return float(np.sum(bins.count[occupied] / n * gaps))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def calibration_report(probs, labels, n_bins: int = 10) -> CalibrationReport:
    conf, ok = confidence_and_correct(probs, labels)
    bins = reliability_bins(conf, ok, n_bins)
    return CalibrationReport(bins, ece(bins), auroc(probs, labels))


def write_reliability_csv(bins: ReliabilityBins, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_lo", "bin_hi", "count", "mean_confidence", "accuracy"))
        for i in range(bins.n_bins):
            w.writerow((repr(float(bins.edges[i])), repr(float(bins.edges[i + 1])), int(bins.count[i]),
                        repr(float(bins.mean_confidence[i])), repr(float(bins.accuracy[i]))))


def attention_match(report, ground_truth, weight_threshold: float = 0.01) -> tuple[float, float]:
    """Sensitivity and specificity of ``|contribution| >= weight_threshold`` against a relevance mask.

    ``report`` is anything with a ``contribution`` array, or the array itself.
    """
    contrib = np.asarray(getattr(report, "contribution", report), dtype=np.float64)
    truth = np.asarray(ground_truth, dtype=bool)
    if contrib.shape != truth.shape:
        raise ValueError(f"contribution shape {contrib.shape} != ground truth shape {truth.shape}")
    if not truth.any() or truth.all():
        raise ValueError("need at least one relevant and one irrelevant cell")
    selected = np.abs(contrib) >= weight_threshold
    sensitivity = (selected & truth).sum() / truth.sum()
    specificity = (~selected & ~truth).sum() / (~truth).sum()
    return float(sensitivity), float(specificity)


def attention_match_summary(contributions, ground_truths, weight_threshold: float = 0.01) -> dict[str, float]:
    """Micro (pooled cells) and macro (per-record mean) sensitivity/specificity."""
    tp = fn = tn = fp = 0
    sens, spec = [], []
    for contrib, truth in zip(contributions, ground_truths):
        truth = np.asarray(truth, dtype=bool)
        s, p = attention_match(contrib, truth, weight_threshold)
        sens.append(s)
        spec.append(p)
        selected = np.abs(np.asarray(contrib)) >= weight_threshold
        tp += int((selected & truth).sum())
        fn += int((~selected & truth).sum())
        tn += int((~selected & ~truth).sum())
        fp += int((selected & ~truth).sum())
    if not sens:
        raise ValueError("no records to score")
    return {
        "micro_sensitivity": tp / (tp + fn),
        "micro_specificity": tn / (tn + fp),
        "macro_sensitivity": float(np.mean(sens)),
        "macro_specificity": float(np.mean(spec)),
        "n_records": len(sens),
    }
