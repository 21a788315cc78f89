"""AU binarization threshold calibration and recognition-parity checks.

Thresholds are picked from the empirical candidate grid (midpoints of
consecutive distinct intensities plus one candidate below the minimum and
one above the maximum), maximizing the accuracy of the strict-comparison
predictor 1[intensity > t].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import AU_MAX, AU_MIN
from .errors import EmptyInput, LengthMismatch
from .stats import two_proportion_test


@dataclass(frozen=True)
class CalibrationResult:
    au_id: str
    global_threshold: float
    global_accuracy: float
    per_group_thresholds: Mapping[str, float]
    per_group_accuracy: Mapping[str, float]
    per_group_f1: Mapping[str, float]
    parity_p_value: float
    # accuracy per level under the single global threshold (the "raw" column)
    per_group_accuracy_raw: Mapping[str, float] = field(default_factory=dict)
    raw_parity_p_value: float = 1.0
    degenerate_levels: tuple[str, ...] = ()


@dataclass(frozen=True)
class ParityCheck:
    per_group_accuracy: Mapping[str, float]
    per_group_f1: Mapping[str, float]
    p_value: float
    pairwise_p: Mapping[tuple[str, str], float] = field(default_factory=dict)


def _candidate_grid(values: np.ndarray) -> np.ndarray:
    distinct = np.unique(values)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    lo = max(distinct[0] - 0.5, AU_MIN)
    hi = min(distinct[-1] + 0.5, AU_MAX)
    return np.unique(np.concatenate([[lo], mids, [hi]]))


def calibrate_global(
    intensities: Sequence[float], truth_presence: Sequence[int]
) -> tuple[float, float]:
    """Accuracy-maximizing threshold over the candidate grid; ties broken
    toward the smallest threshold."""
    x = np.asarray(intensities, dtype=float)
    y = np.asarray(truth_presence, dtype=int)
    if x.size != y.size:
        raise LengthMismatch(f"{x.size} intensities vs {y.size} truths")
    if x.size == 0:
        raise EmptyInput("no samples")

    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = xs.size
    n_pos = int(ys.sum())
    # pos_le[i] = positives with intensity <= xs[i-1]
    pos_cum = np.concatenate([[0], np.cumsum(ys)])
    grid = _candidate_grid(x)
    # for threshold t: correct = (# y==0 with x <= t) + (# y==1 with x > t)
    below = np.searchsorted(xs, grid, side="right")
    pos_below = pos_cum[below]
    correct = (below - pos_below) + (n_pos - pos_below)
    best = int(np.argmax(correct))  # argmax returns the first (smallest t)
    return float(grid[best]), float(correct[best]) / n


def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def accuracy_parity_check(
    predicted_presence: Sequence[int],
    truth_presence: Sequence[int],
    groups: Sequence[str],
) -> ParityCheck:
    """Per-level accuracy/F1 plus a two-proportion z-test on the accuracy
    counts (pairwise matrix for more than two levels)."""
    pred = np.asarray(predicted_presence, dtype=int)
    truth = np.asarray(truth_presence, dtype=int)
    grp = np.asarray(groups)
    if not (pred.size == truth.size == grp.size):
        raise LengthMismatch("predicted/truth/groups lengths differ")
    levels = sorted(set(grp.tolist()))
    acc, f1, correct, totals = {}, {}, {}, {}
    for lvl in levels:
        mask = grp == lvl
        correct[lvl] = int(np.sum(pred[mask] == truth[mask]))
        totals[lvl] = int(mask.sum())
        acc[lvl] = correct[lvl] / totals[lvl]
        f1[lvl] = _f1(pred[mask], truth[mask])
    pairwise = {}
    for i, a in enumerate(levels):
        for b in levels[i + 1:]:
            pairwise[(a, b)] = two_proportion_test(
                correct[a], totals[a], correct[b], totals[b]
            )
    p = min(pairwise.values()) if pairwise else 1.0
    return ParityCheck(per_group_accuracy=acc, per_group_f1=f1,
                       p_value=p, pairwise_p=pairwise)


def calibrate_per_group(
    intensities: Sequence[float],
    truth_presence: Sequence[int],
    groups: Sequence[str],
    au_id: str = "",
) -> CalibrationResult:
    """Per-level accuracy-maximizing thresholds plus the parity test on the
    recalibrated accuracies. Levels lacking both truth classes are flagged
    as degenerate and omitted from the parity test."""
    x = np.asarray(intensities, dtype=float)
    y = np.asarray(truth_presence, dtype=int)
    grp = np.asarray(groups)
    if not (x.size == y.size == grp.size):
        raise LengthMismatch("intensities/truth/groups lengths differ")
    if x.size == 0:
        raise EmptyInput("no samples")

    g_thr, g_acc = calibrate_global(x, y)
    levels = sorted(set(grp.tolist()))
    thresholds, accs, f1s, raw_accs = {}, {}, {}, {}
    correct, totals, raw_correct = {}, {}, {}
    degenerate = []
    for lvl in levels:
        mask = grp == lvl
        yl = y[mask]
        xl = x[mask]
        raw_pred = (xl > g_thr).astype(int)
        raw_accs[lvl] = float(np.mean(raw_pred == yl))
        raw_correct[lvl] = int(np.sum(raw_pred == yl))
        totals[lvl] = int(mask.sum())
        if yl.min(initial=1) == yl.max(initial=0):
            degenerate.append(lvl)
            continue
        thr, acc = calibrate_global(xl, yl)
        pred = (xl > thr).astype(int)
        thresholds[lvl] = thr
        accs[lvl] = acc
        f1s[lvl] = _f1(pred, yl)
        correct[lvl] = int(np.sum(pred == yl))

    def pairwise_min_p(cor: dict) -> float:
        valid = [lvl for lvl in levels if lvl in cor and lvl not in degenerate]
        ps = [
            two_proportion_test(cor[a], totals[a], cor[b], totals[b])
            for i, a in enumerate(valid)
            for b in valid[i + 1:]
        ]
        return min(ps) if ps else 1.0

    return CalibrationResult(
        au_id=au_id,
        global_threshold=g_thr,
        global_accuracy=g_acc,
        per_group_thresholds=thresholds,
        per_group_accuracy=accs,
        per_group_f1=f1s,
        parity_p_value=pairwise_min_p(correct),
        per_group_accuracy_raw=raw_accs,
        raw_parity_p_value=pairwise_min_p(
            {lvl: raw_correct[lvl] for lvl in levels if lvl not in degenerate}
        ),
        degenerate_levels=tuple(degenerate),
    )
