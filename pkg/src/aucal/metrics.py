"""Evaluation protocol: fair test-set construction, accuracy-maximizing
decision threshold, and the Calders-Verwer discrimination score."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, au_sort_key
from .errors import (
    InfeasibleBalance,
    Misaligned,
    MissingGroup,
    SingleClass,
)
from .rng import Rng

EASY_LOW_DEFAULT = 1e-5
EASY_HIGH_DEFAULT = 0.99999
EASY_LOW_ANGER = 0.05


@dataclass(frozen=True)
class EvalResult:
    threshold: float
    accuracy: float
    f1: float
    per_group_positive_rate: Mapping[str, float]
    disc_signed: float
    disc_abs: float


def cv_discrimination(
    predictions: Sequence[int],
    groups: Sequence[str],
    positive_group: str,
) -> tuple[float, float]:
    """Calders-Verwer score: positive prediction rate of positive_group
    minus the other group's, plus its absolute value."""
    pred = np.asarray(predictions, dtype=int)
    grp = np.asarray(groups)
    levels = sorted(set(grp.tolist()))
    if positive_group not in levels:
        raise MissingGroup(positive_group)
    if len(levels) != 2:
        raise MissingGroup(f"expected two levels, got {levels}")
    other = [lvl for lvl in levels if lvl != positive_group][0]
    rate_pos = float(pred[grp == positive_group].mean())
    rate_other = float(pred[grp == other].mean())
    signed = rate_pos - rate_other
    return signed, abs(signed)


def select_threshold(
    scores: Sequence[float], labels: Sequence[int]
) -> tuple[float, float]:
    """Accuracy-maximizing threshold for 1[score > t] over the score
    midpoint grid; ties broken toward the smallest threshold."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.size != y.size:
        raise Misaligned("scores/labels length mismatch")
    if y.min(initial=1) == y.max(initial=0):
        raise SingleClass("need both classes to select a threshold")
    order = np.argsort(s, kind="stable")
    ss, ys = s[order], y[order]
    distinct = np.unique(ss)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    grid = np.concatenate([[distinct[0] - 0.5], mids, [distinct[-1] + 0.5]])
    pos_cum = np.concatenate([[0], np.cumsum(ys)])
    n_pos = int(ys.sum())
    below = np.searchsorted(ss, grid, side="right")
    pos_below = pos_cum[below]
    correct = (below - pos_below) + (n_pos - pos_below)
    best = int(np.argmax(correct))
    return float(grid[best]), float(correct[best]) / s.size


def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def build_fair_test_set(
    dataset: Dataset,
    scores: Sequence[float],
    group_attr: str,
    target_label: int = 1,
    easy_low: float = EASY_LOW_DEFAULT,
    easy_high: float | None = EASY_HIGH_DEFAULT,
    conditioning: Sequence[str] = (),
    mode: str = "balance_positive_rate",
    seed: int = 0,
) -> Dataset:
    """Prune easy cases by reference-model score, then balance the groups.

    easy_high=None disables the upper prune (the low-only variant used for
    the angry task). mode 'balance_positive_rate' equalizes P(Y=1 | group)
    by down-sampling the over-represented (group, label) stratum;
    'balance_cell_counts' equalizes per-(AU cell x group) counts.
    """
    s = np.asarray(scores, dtype=float)
    if s.size != len(dataset):
        raise Misaligned(f"{s.size} scores for {len(dataset)} records")
    if easy_high is not None and not (easy_low < easy_high):
        raise ValueError("easy_low must be < easy_high")

    keep = s >= easy_low
    if easy_high is not None:
        keep &= s <= easy_high
    kept_idx = np.where(keep)[0]
    pruned = dataset.subset(kept_idx.tolist())

    y = (pruned.labels() == target_label).astype(int)
    grp = np.asarray(pruned.group_values(group_attr))
    rng = Rng(seed, ("fair_test",))

    if mode == "balance_positive_rate":
        levels = sorted(set(grp.tolist()))
        rates = {}
        for lvl in levels:
            mask = grp == lvl
            if y[mask].sum() == 0:
                raise InfeasibleBalance(f"group {lvl!r} has no positives")
            rates[lvl] = float(y[mask].mean())
        target_rate = min(rates.values())
        kept: list[int] = []
        for lvl in levels:
            mask = grp == lvl
            pos_idx = np.where(mask & (y == 1))[0]
            neg_idx = np.where(mask & (y == 0))[0]
            n = int(mask.sum())
            if rates[lvl] <= target_rate:
                kept.extend(np.where(mask)[0].tolist())
                continue
            # remove k positives so (pos - k)/(n - k) == target_rate
            k = (pos_idx.size - target_rate * n) / (1.0 - target_rate)
            k = int(round(k))
            k = min(max(k, 0), pos_idx.size)
            gen = rng.child(f"rate-{lvl}").generator()
            drop = set(gen.choice(pos_idx, size=k, replace=False).tolist())
            kept.extend(i for i in np.where(mask)[0].tolist() if i not in drop)
        kept.sort()
        return pruned.subset(kept)

    if mode == "balance_cell_counts":
        if not conditioning:
            raise ValueError("balance_cell_counts requires conditioning AUs")
        keys = pruned.cell_keys(sorted(conditioning, key=au_sort_key))
        strata: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
        for i, key in enumerate(keys):
            strata[key.describe()][grp[i]].append(i)
        kept = []
        levels = sorted(set(grp.tolist()))
        for condition in sorted(strata):
            groups = strata[condition]
            if any(lvl not in groups for lvl in levels):
                continue
            floor = min(len(groups[lvl]) for lvl in levels)
            for lvl in levels:
                idx = np.array(groups[lvl])
                if idx.size > floor:
                    gen = rng.child(f"cell-{condition}-{lvl}").generator()
                    idx = gen.choice(idx, size=floor, replace=False)
                kept.extend(sorted(idx.tolist()))
        kept.sort()
        return pruned.subset(kept)

    raise ValueError(f"unknown mode {mode!r}")


def evaluate(
    scores: Sequence[float],
    test_dataset: Dataset,
    group_attr: str,
    positive_group: str,
    target_label: int = 1,
) -> EvalResult:
    """Threshold the scores for maximum accuracy, then report accuracy,
    F1, per-group positive rates, and both Disc forms."""
    s = np.asarray(scores, dtype=float)
    if s.size != len(test_dataset):
        raise Misaligned(f"{s.size} scores for {len(test_dataset)} records")
    y = (test_dataset.labels() == target_label).astype(int)
    grp = np.asarray(test_dataset.group_values(group_attr))
    threshold, accuracy = select_threshold(s, y)
    pred = (s > threshold).astype(int)
    rates = {
        lvl: float(pred[grp == lvl].mean())
        for lvl in sorted(set(grp.tolist()))
    }
    signed, absolute = cv_discrimination(pred, grp, positive_group)
    return EvalResult(
        threshold=threshold,
        accuracy=accuracy,
        f1=_f1(pred, y),
        per_group_positive_rate=rates,
        disc_signed=signed,
        disc_abs=absolute,
    )


@dataclass(frozen=True)
class RunSummary:
    name: str
    mean_disc_abs: float
    std_disc_abs: float
    mean_accuracy: float
    std_accuracy: float
    n_runs: int


def summarize_runs(name: str, results: Sequence[EvalResult]) -> RunSummary:
    """Mean +/- sample (n-1) standard deviation over seeded runs."""
    disc = np.array([r.disc_abs for r in results])
    acc = np.array([r.accuracy for r in results])
    ddof = 1 if len(results) > 1 else 0
    return RunSummary(
        name=name,
        mean_disc_abs=float(disc.mean()),
        std_disc_abs=float(disc.std(ddof=ddof)),
        mean_accuracy=float(acc.mean()),
        std_accuracy=float(acc.std(ddof=ddof)),
        n_runs=len(results),
    )
