"""Anomaly scores, threshold selection and detection metrics.

Abnormal is the positive class throughout. An observation is predicted
abnormal when its score is strictly above the threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError


def _check_same(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def score_s1(x, x0_hat, v):
    """sqrt((1/L) * sum over masked cells of squared error), per observation.

    Accepts a single K x L observation or a (B, K, L) batch.
    """
    x, x0_hat, v = (np.asarray(a, dtype=np.float64) for a in (x, x0_hat, v))
    _check_same(x, x0_hat, "score_s1")
    _check_same(x, v, "score_s1 mask")
    L = x.shape[-1]
    err = (x0_hat - x) * (1.0 - v)
    return np.sqrt((err * err).sum(axis=(-1, -2)) / L)


def score_s2(x, x_rec):
    """sqrt((1/L) * sum of squared reconstruction error), per observation."""
    x, x_rec = np.asarray(x, dtype=np.float64), np.asarray(x_rec, dtype=np.float64)
    _check_same(x, x_rec, "score_s2")
    L = x.shape[-1]
    err = x_rec - x
    return np.sqrt((err * err).sum(axis=(-1, -2)) / L)


@dataclass(frozen=True)
class ScoreWeights:
    lam1: float = 0.5
    lam2: float = 0.5

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ConfigError(f"score weights must be nonnegative, got {self.lam1}, {self.lam2}")

    @classmethod
    def for_variant(cls, variant, base=None):
        """Variant 1 keeps only s1, variant 2 only s2, variant 12 both."""
        base = base or cls()
        variant = str(variant)
        if variant == "1":
            return cls(base.lam1, 0.0)
        if variant == "2":
            return cls(0.0, base.lam2)
        if variant == "12":
            return base
        raise ConfigError(f"variant must be one of 1, 2, 12; got {variant!r}")


def combine(s1, s2, w: ScoreWeights = ScoreWeights()):
    return w.lam1 * np.asarray(s1, dtype=np.float64) + w.lam2 * np.asarray(s2, dtype=np.float64)


def _binary_labels(labels):
    y = np.asarray(labels)
    if y.size == 0:
        raise ContractError("metrics need at least one observation")
    return (y > 0).astype(np.int64)


def predict(scores, tau):
    return (np.asarray(scores) > tau).astype(np.int64)


def confusion(scores, labels, tau):
    y = _binary_labels(labels)
    p = predict(scores, tau)
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, fp, fn


def f1_recall(scores, labels, tau):
    tp, fp, fn = confusion(scores, labels, tau)
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return f1, rec


def candidate_thresholds(scores):
    """Midpoints between consecutive unique scores, plus -inf and +inf."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def threshold_search(scores, labels):
    """Threshold maximizing F1; ties prefer higher recall, then lower tau.

    Returns (tau, f1, recall).
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if y.min() == y.max():
        raise ContractError("threshold search needs both normal and abnormal observations")
    if scores.shape != y.shape:
        raise ShapeError("one score per label is required")
    cands = candidate_thresholds(scores)
    # counts of positives/negatives strictly above each candidate
    order = np.sort(scores)
    pos_sorted = np.sort(scores[y == 1])
    n_pos = len(pos_sorted)
    above = len(order) - np.searchsorted(order, cands, side="right")
    tp = n_pos - np.searchsorted(pos_sorted, cands, side="right")
    fp = above - tp
    fn = n_pos - tp
    f1 = np.where(tp > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    rec = tp / n_pos
    # lexsort: last key is primary; lower tau wins remaining ties
    best = np.lexsort((cands, -rec, -f1))[0]
    return float(cands[best]), float(f1[best]), float(rec[best])


def average_precision(scores, labels):
    """sum_i (R_i - R_{i-1}) P_i over distinct score thresholds (descending)."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, yy = scores[order], y[order]
    tps = np.cumsum(yy)
    # evaluate only at the last index of each block of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tps[last]
    prec = tp / (last + 1)
    rec = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, rec]) * prec))


def pr_curve(scores, labels):
    """(recall, precision) at each distinct threshold, descending scores."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    order = np.argsort(-scores, kind="stable")
    s, yy = scores[order], y[order]
    tps = np.cumsum(yy)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tps[last]
    return tp / max(int(y.sum()), 1), tp / (last + 1)


def metrics(scores, labels, tau):
    f1, rec = f1_recall(scores, labels, tau)
    return {"F1": f1, "Rec": rec, "APR": average_precision(scores, labels)}


# -- baseline ---------------------------------------------------------------------------


def energy_scores(x, reference=None):
    """Distance of each observation's log RMS energy from the reference median.

    A label-free sanity detector: ``reference`` defaults to ``x`` itself.
    """
    x = np.asarray(x, dtype=np.float64)
    log_e = 0.5 * np.log(np.mean(x * x, axis=(-1, -2)) + 1e-12)
    ref = log_e if reference is None else 0.5 * np.log(
        np.mean(np.asarray(reference) ** 2, axis=(-1, -2)) + 1e-12)
    return np.abs(log_e - np.median(ref))


# -- reports ---------------------------------------------------------------------------


@dataclass
class ScoreReport:
    ids: list
    s1: np.ndarray
    s2: np.ndarray
    s: np.ndarray
    labels: np.ndarray
    tau: float
    metrics: dict

    @property
    def predictions(self):
        return predict(self.s, self.tau)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["observation", "s1", "s2", "s", "label", "prediction"])
            for i, oid in enumerate(self.ids):
                w.writerow([oid, repr(float(self.s1[i])), repr(float(self.s2[i])),
                            repr(float(self.s[i])), int(self.labels[i] > 0),
                            int(self.predictions[i])])

    def write_metrics(self, path, extra=None):
        items = {"tau": self.tau, **self.metrics, **(extra or {})}
        write_kv(path, items)


def write_kv(path, items):
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {_fmt(v)}\n")


def read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = _parse(v.strip())
    return out


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else "-inf" if math.isinf(v) else repr(v)
    return str(v)


def _parse(s):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s
