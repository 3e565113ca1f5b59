"""Ranking metrics and score-covariate correlation.

Conventions, fixed so results are reproducible to the last bit:

* AUC is the Mann-Whitney statistic: over all positive/negative pairs,
  a win counts 1, a tied score counts 1/2, divided by the pair count.
  All partial sums are half-integers, so the accumulation is exact and
  order-independent below 2**53 pairs.
* Average precision steps through distinct score thresholds in
  descending order with tied scores grouped:
  ``sum_k (R_k - R_{k-1}) * P_k``.
* Pearson correlation uses population sums; its two-sided p-value comes
  from the exact Student-t null via the regularized incomplete beta
  function, evaluated by continued fractions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .data import FormatError

_BETA_MAX_ITER = 300
_BETA_TOL = 1e-12
_RHO_DEGENERATE = 1e-12


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. single-class labels)."""


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined for this input (constant vector)."""


def _scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValueError(
            f"scores and labels must be equal-length vectors, got "
            f"{scores.shape} and {labels.shape}"
        )
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def _threshold_counts(scores: np.ndarray, labels: np.ndarray):
    """Cumulative true/false positive counts per distinct score,
    walking thresholds in descending order with ties grouped."""
    values, inverse = np.unique(scores, return_inverse=True)
    pos_per = np.bincount(inverse, weights=labels.astype(np.float64), minlength=values.size)
    tot_per = np.bincount(inverse, minlength=values.size).astype(np.float64)
    neg_per = tot_per - pos_per
    # np.unique sorts ascending; flip to descending thresholds.
    pos_per, neg_per = pos_per[::-1], neg_per[::-1]
    return np.cumsum(pos_per), np.cumsum(neg_per), pos_per, neg_per


def auc(scores, labels) -> float:
    """Area under the ROC curve with half credit for ties."""
    scores, labels = _scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )
    tp, fp, pos_per, neg_per = _threshold_counts(scores, labels)
    neg_above = fp - neg_per  # negatives strictly above each tie group
    u = float(np.sum(pos_per * (neg_above + 0.5 * neg_per)))
    # u counts inversions; wins = total pairs - losses - ties.
    wins_plus_half_ties = n_pos * n_neg - u
    return wins_plus_half_ties / (n_pos * n_neg)


def roc_points(scores, labels) -> tuple[tuple[float, float], ...]:
    """(FPR, TPR) per descending threshold group, starting at (0, 0)."""
    scores, labels = _scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )
    tp, fp, _, _ = _threshold_counts(scores, labels)
    points = [(0.0, 0.0)]
    points += [(f / n_neg, t / n_pos) for f, t in zip(fp, tp)]
    return tuple(points)


def average_precision(scores, labels) -> float:
    """Step-wise average precision over descending thresholds."""
    scores, labels = _scores_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    tp, fp, _, _ = _threshold_counts(scores, labels)
    ap = 0.0
    tp_prev = 0.0
    for tp_k, fp_k in zip(tp, fp):
        ap += ((tp_k - tp_prev) / n_pos) * (tp_k / (tp_k + fp_k))
        tp_prev = tp_k
    return ap


def pr_points(scores, labels) -> tuple[tuple[float, float], ...]:
    """(recall, precision) per descending threshold group."""
    scores, labels = _scores_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("precision-recall needs at least one positive")
    tp, fp, _, _ = _threshold_counts(scores, labels)
    return tuple((t / n_pos, t / (t + f)) for t, f in zip(tp, fp))


@dataclass(frozen=True)
class EvalReport:
    auc: float
    average_precision: float
    roc: tuple[tuple[float, float], ...]
    pr: tuple[tuple[float, float], ...]
    n_pos: int
    n_neg: int


def evaluate(scores, labels) -> EvalReport:
    """All ranking metrics for one scored, two-class sample set."""
    s, y = _scores_labels(scores, labels)
    return EvalReport(
        auc=auc(s, y),
        average_precision=average_precision(s, y),
        roc=roc_points(s, y),
        pr=pr_points(s, y),
        n_pos=int(y.sum()),
        n_neg=int(y.size - y.sum()),
    )


def _beta_cont_frac(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise FloatingPointError(
        f"incomplete beta continued fraction did not converge within "
        f"{_BETA_MAX_ITER} iterations for a={a}, b={b}, x={x}"
    )


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not (a > 0.0 and b > 0.0):
        raise ValueError(f"shape parameters must be positive, got a={a}, b={b}")
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cont_frac(a, b, x) / a
    return 1.0 - front * _beta_cont_frac(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class Correlation:
    rho: float
    p_value: float
    n: int


def pearson(x, y) -> Correlation:
    """Pearson correlation with a two-sided Student-t p-value.

    ``|rho|`` within 1e-12 of 1 short-circuits to p = 0 rather than
    dividing by a vanishing ``1 - rho**2``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    n = x.size
    if n < 3:
        raise ValueError(f"need at least 3 samples for a p-value, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs contain non-finite values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant input")
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    rho = min(1.0, max(-1.0, rho))
    if 1.0 - abs(rho) <= _RHO_DEGENERATE:
        return Correlation(rho, 0.0, n)
    df = n - 2
    t = rho * math.sqrt(df / (1.0 - rho * rho))
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return Correlation(rho, min(1.0, max(0.0, p)), n)


def load_covariates(path: str | Path) -> dict[str, dict[str, float]]:
    """Load a covariate table: header ``bag_id,<name>...``; blank cells
    mean missing. Returns column name -> (bag_id -> value), preserving
    column order."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty covariate table") from None
        if len(header) < 2 or header[0] != "bag_id":
            raise FormatError(
                f"{path}: header must be 'bag_id,<name>...', got {','.join(header)!r}"
            )
        names = header[1:]
        if len(set(names)) != len(names):
            raise FormatError(f"{path}: duplicate covariate names in header")
        columns: dict[str, dict[str, float]] = {name: {} for name in names}
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if row == []:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            bag_id = row[0]
            if not bag_id:
                raise FormatError(f"{path}: line {lineno}: empty bag_id")
            if bag_id in seen:
                raise FormatError(f"{path}: line {lineno}: duplicate bag_id {bag_id!r}")
            seen.add(bag_id)
            for name, cell in zip(names, row[1:]):
                if cell == "":
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(
                        f"{path}: line {lineno}: column {name!r} is not numeric: {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise FormatError(
                        f"{path}: line {lineno}: column {name!r} is non-finite: {cell!r}"
                    )
                columns[name][bag_id] = v
    return columns


@dataclass(frozen=True)
class CorrelateResult:
    """Per-covariate correlations sorted by |rho| descending (names
    break ties); columns that could not be correlated are listed in
    ``skipped`` with a reason."""

    entries: tuple[tuple[str, Correlation], ...]
    n_unmatched: int
    skipped: tuple[tuple[str, str], ...]


def correlate_table(
    scores: Mapping[str, float] | Iterable,
    covariates: Mapping[str, Mapping[str, float]],
) -> CorrelateResult:
    """Correlate bag scores against each covariate column.

    ``scores`` maps bag_id to score (an iterable of objects with
    ``bag_id``/``score`` attributes, e.g. BagScore, also works).
    Covariate entries whose bag_id has no score are dropped and counted
    once per bag_id; a bag missing a value only drops out of that
    column.
    """
    if isinstance(scores, Mapping):
        by_id = dict(scores)
    else:
        by_id = {item.bag_id: item.score for item in scores}
    if not by_id:
        raise ValueError("no bag scores given")

    covariate_ids = set()
    for column in covariates.values():
        covariate_ids.update(column)
    unmatched = {bag_id for bag_id in covariate_ids if bag_id not in by_id}
    if covariate_ids and len(unmatched) == len(covariate_ids):
        raise ValueError("no covariate row matches any scored bag")

    entries: list[tuple[str, Correlation]] = []
    skipped: list[tuple[str, str]] = []
    for name, column in covariates.items():
        ids = [bag_id for bag_id in column if bag_id in by_id]
        if len(ids) < 3:
            skipped.append((name, f"only {len(ids)} joined rows, need 3"))
            continue
        xs = np.array([by_id[i] for i in ids])
        ys = np.array([column[i] for i in ids])
        try:
            entries.append((name, pearson(xs, ys)))
        except UndefinedCorrelationError:
            skipped.append((name, "constant column"))
    entries.sort(key=lambda item: (-abs(item[1].rho), item[0]))
    return CorrelateResult(tuple(entries), len(unmatched), tuple(skipped))


__all__ = [
    "Correlation",
    "CorrelateResult",
    "EvalReport",
    "UndefinedCorrelationError",
    "UndefinedMetricError",
    "auc",
    "average_precision",
    "correlate_table",
    "evaluate",
    "load_covariates",
    "pearson",
    "pr_points",
    "regularized_incomplete_beta",
    "roc_points",
]
