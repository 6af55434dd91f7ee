"""Monte-Carlo predictive inference and "I don't know" selective prediction."""
from __future__ import annotations

import csv
import zlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Record
from .grad import Tape
from .retain import Draws, ModelParams, Variant, forward_batch, param_leaves, reports_from, sample_draws

DEFAULT_SAMPLES = 30


@dataclass
class PredictiveDistribution:
    samples: np.ndarray
    mean: float
    std: float

    @classmethod
    def from_samples(cls, samples) -> "PredictiveDistribution":
        s = np.asarray(samples, dtype=np.float64).ravel()
        if s.size < 1:
            raise ValueError("need at least one sample")
        if np.all(s == s[0]):
            return cls(s, float(s[0]), 0.0)
        return cls(s, float(s.mean()), float(s.std()))

    @property
    def S(self) -> int:
        return self.samples.size


def record_rng(seed: int, record_id: str) -> np.random.Generator:
    """Independent stream per (seed, record) so results do not depend on batching."""
    return np.random.default_rng([seed, 1, zlib.crc32(record_id.encode("utf-8"))])


def _draws_for(record: Record, params: ModelParams, S: int, rng: np.random.Generator, dropout_rate: float) -> Draws:
    return sample_draws(rng, S, record.T, params, dropout_rate)


def _run(params: ModelParams, x: np.ndarray, draws: Draws):
    tape = Tape()
    P = param_leaves(tape, params, trainable=False)
    return forward_batch(tape, P, x, draws, params.variant)


def mc_predict(record: Record, params: ModelParams, S: int = DEFAULT_SAMPLES,
               rng: np.random.Generator | None = None, dropout_rate: float = 0.0) -> PredictiveDistribution:
    """S forward passes with fresh dropout masks and attention noise per pass."""
    return mc_predict_many([record], params, S, dropout_rate=dropout_rate, rngs=[rng or np.random.default_rng()])[0]


def mc_predict_many(records: list[Record], params: ModelParams, S: int = DEFAULT_SAMPLES, seed: int = 0,
                    dropout_rate: float = 0.0, rngs: list[np.random.Generator] | None = None,
                    chunk: int = 64) -> list[PredictiveDistribution]:
    """Predictive distributions for many records, batched by sequence length.

    Each record draws from ``record_rng(seed, id)`` unless explicit ``rngs`` are given.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if rngs is None:
        rngs = [record_rng(seed, r.id) for r in records]
    deterministic = params.variant is Variant.DA and dropout_rate == 0.0
    by_T: dict[int, list[int]] = defaultdict(list)
    for i, rec in enumerate(records):
        by_T[rec.T].append(i)
    results: list[PredictiveDistribution | None] = [None] * len(records)
    for T, idx in by_T.items():
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            if deterministic:
                x = np.stack([records[i].x for i in part])
                p = _run(params, x, Draws.zeros(len(part), T, params.dims)).p_hat.value
                for j, i in enumerate(part):
                    results[i] = PredictiveDistribution.from_samples(np.full(S, p[j]))
                continue
            x = np.repeat(np.stack([records[i].x for i in part]), S, axis=0)
            draws = Draws.concat([_draws_for(records[i], params, S, rngs[i], dropout_rate) for i in part])
            p = _run(params, x, draws).p_hat.value.reshape(len(part), S)
            for j, i in enumerate(part):
                results[i] = PredictiveDistribution.from_samples(p[j])
    return results


def mc_attention(record: Record, params: ModelParams, S: int, rng: np.random.Generator, dropout_rate: float = 0.0):
    """Attention reports for S sampled forward passes of one record."""
    draws = _draws_for(record, params, S, rng, dropout_rate)
    x = np.repeat(record.x[None], S, axis=0)
    return reports_from(_run(params, x, draws), params, x)


# ------------------------------------------------------------------------ IDK

@dataclass(frozen=True)
class IdkDecision:
    outcome: str  # "PREDICT" or "IDK"
    label: int | None
    threshold: float


def idk_decide(dist: PredictiveDistribution, threshold: float) -> IdkDecision:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if dist.std <= threshold:
        return IdkDecision("PREDICT", int(dist.mean >= 0.5), threshold)
    return IdkDecision("IDK", None, threshold)


@dataclass(frozen=True)
class IdkPoint:
    threshold: float
    correct_ratio: float
    incorrect_ratio: float
    idk_ratio: float


def _check_aligned(dists, labels):
    if len(dists) != len(labels):
        raise ValueError(f"{len(dists)} distributions but {len(labels)} labels")
    if not dists:
        raise ValueError("no records")


def idk_curve(dists: list[PredictiveDistribution], labels, thresholds) -> list[IdkPoint]:
    """Correct / incorrect / IDK ratios per threshold, thresholds visited in descending order."""
    _check_aligned(dists, labels)
    thresholds = sorted((float(t) for t in thresholds), reverse=True)
    if not thresholds:
        raise ValueError("empty threshold list")
    std = np.array([d.std for d in dists])
    hard = np.array([d.mean >= 0.5 for d in dists]).astype(int)
    right = hard == np.asarray(labels).astype(int)
    n = len(dists)
    points = []
    for t in thresholds:
        if t < 0:
            raise ValueError("thresholds must be >= 0")
        predict = std <= t
        n_correct = int((predict & right).sum())
        n_incorrect = int((predict & ~right).sum())
        n_idk = n - n_correct - n_incorrect
        points.append(IdkPoint(t, n_correct / n, n_incorrect / n, n_idk / n))
    return points


def default_thresholds(dists: list[PredictiveDistribution]) -> list[float]:
    """Every attainable operating point: observed stds plus 0 and +inf, descending."""
    values = {0.0, float("inf")} | {d.std for d in dists}
    return sorted(values, reverse=True)


def idk_breakdown(dists: list[PredictiveDistribution], labels, threshold: float) -> dict[str, int]:
    """What the deferred records would have been had the model predicted them."""
    _check_aligned(dists, labels)
    counts = {"FP": 0, "FN": 0, "TP": 0, "TN": 0}
    for d, y in zip(dists, labels):
        if idk_decide(d, threshold).outcome != "IDK":
            continue
        pred = int(d.mean >= 0.5)
        key = ("T" if pred == int(y) else "F") + ("P" if pred == 1 else "N")
        counts[key] += 1
    return counts


def threshold_for_correct_ratio(points: list[IdkPoint], target: float) -> IdkPoint:
    """Largest-threshold point whose correct ratio has dropped to ``target`` or below."""
    for point in points:
        if point.correct_ratio <= target:
            return point
    return points[-1]


# ---------------------------------------------------------------- dump files

def write_predictions(path, ids: list[str], labels, dists: list[PredictiveDistribution]) -> None:
    if not dists:
        S = 0
    else:
        S = dists[0].S
        if any(d.S != S for d in dists):
            raise ValueError("all records must carry the same number of samples")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "label", *(f"p_{s}" for s in range(S)), "mean", "std"])
        for rid, y, d in zip(ids, labels, dists):
            w.writerow([rid, int(y), *(repr(float(p)) for p in d.samples), repr(d.mean), repr(d.std)])


def read_predictions(path) -> tuple[list[str], np.ndarray, list[PredictiveDistribution]]:
    ids, labels, dists = [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["record_id", "label"] or header[-2:] != ["mean", "std"]:
            raise ValueError(f"{path}: not a prediction dump")
        S = len(header) - 4
        for lineno, row in enumerate(reader, start=2):
            if len(row) != S + 4:
                raise ValueError(f"{path}:{lineno}: expected {S + 4} fields, got {len(row)}")
            ids.append(row[0])
            labels.append(int(row[1]))
            samples = np.array([float(v) for v in row[2:2 + S]])
            dists.append(PredictiveDistribution(samples, float(row[-2]), float(row[-1])))
    return ids, np.array(labels, dtype=int), dists
