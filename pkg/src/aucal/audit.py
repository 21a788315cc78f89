"""Annotation-bias auditing: conditional label proportions per AU cell and
group, chi-square independence tests, logistic-regression significance of
group membership given AU intensities, and plot-ready bias curves.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import AuCellKey, Dataset, au_sort_key
from .errors import (
    NotBinarized,
    Separation,
    SingularDesign,
)
from .stats import (
    InsufficientData,
    chi_square_independence,
    table_from_counts,
)

_SIGMOID_CAP = 35.0


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    eta = np.clip(eta, -_SIGMOID_CAP, _SIGMOID_CAP)
    return 1.0 / (1.0 + np.exp(-eta))


@dataclass(frozen=True)
class LogisticFit:
    beta: np.ndarray
    std_errors: np.ndarray
    wald_z: np.ndarray
    p_values: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    covariance: np.ndarray
    term_names: tuple[str, ...] = ()

    def predict(self, design: np.ndarray) -> np.ndarray:
        return _sigmoid(np.asarray(design, dtype=float) @ self.beta)


def _log_likelihood(eta: np.ndarray, y: np.ndarray) -> float:
    # -sum(log(1 + exp(-s*eta))) computed stably
    s = np.where(y == 1, 1.0, -1.0)
    return float(-np.logaddexp(0.0, -s * eta).sum())


def logistic_fit(
    design: np.ndarray,
    labels: Sequence[int],
    max_iter: int = 100,
    tol: float = 1e-10,
    term_names: Sequence[str] | None = None,
) -> LogisticFit:
    """Maximum-likelihood logistic regression by IRLS (Newton) with
    step-halving. Standard errors come from the inverse observed
    information; Wald z and two-sided p-values per coefficient.

    Raises Separation when the fitted probabilities pin to {0, 1} and
    SingularDesign when the information matrix is not invertible.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    n, p = X.shape
    if n <= p:
        raise SingularDesign(f"n={n} <= p={p}")
    # a constant non-intercept column makes the information singular
    const_cols = np.where(X.std(axis=0) == 0)[0]
    if len(const_cols) > 1 or (len(const_cols) == 1 and const_cols[0] != 0):
        raise SingularDesign("duplicate constant column")

    beta = np.zeros(p)
    eta = X @ beta
    ll = _log_likelihood(eta, y)
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        mu = _sigmoid(eta)
        w = mu * (1.0 - mu)
        grad = X.T @ (y - mu)
        info = (X * w[:, None]).T @ X
        try:
            delta = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            if np.max(np.minimum(mu, 1.0 - mu)) < 1e-8:
                raise Separation("fitted probabilities pinned to {0, 1}")
            raise SingularDesign("information matrix singular")
        # step-halving keeps the log-likelihood non-decreasing
        step = 1.0
        for _ in range(40):
            cand = beta + step * delta
            cand_eta = X @ cand
            cand_ll = _log_likelihood(cand_eta, y)
            if cand_ll >= ll - 1e-12:
                break
            step *= 0.5
        beta, eta, ll = cand, cand_eta, cand_ll
        if np.max(np.abs(step * delta)) < tol:
            converged = True
            break
        mu = _sigmoid(eta)
        if np.max(np.minimum(mu, 1.0 - mu)) < 1e-10:
            raise Separation("fitted probabilities pinned to {0, 1}")

    mu = _sigmoid(eta)
    if np.max(np.minimum(mu, 1.0 - mu)) < 1e-8 and not converged:
        raise Separation("fitted probabilities pinned to {0, 1}")
    w = mu * (1.0 - mu)
    info = (X * w[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise SingularDesign("information matrix singular at optimum")
    se = np.sqrt(np.diag(cov))
    z = beta / se
    pvals = np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in z])
    return LogisticFit(
        beta=beta,
        std_errors=se,
        wald_z=z,
        p_values=pvals,
        converged=converged,
        iterations=iterations,
        log_likelihood=ll,
        covariance=cov,
        term_names=tuple(term_names or ()),
    )


@dataclass(frozen=True)
class CellResult:
    condition: str
    n_per_group: Mapping[str, int]
    positives_per_group: Mapping[str, int]
    proportion_per_group: Mapping[str, float]
    status: str  # "tested" | "insufficient_data"
    delta: float | None = None
    chi_square: float | None = None
    dof: int | None = None
    p_value: float | None = None
    argmax_level: str | None = None
    merged_levels: tuple[str, ...] = ()


@dataclass(frozen=True)
class BiasReport:
    group_attr: str
    group_levels: tuple[str, ...]
    target_label: int
    conditioning: tuple[str, ...]
    mode: str
    cells: tuple[CellResult, ...]
    logistic: LogisticFit | None = None
    logistic_error: str | None = None
    metadata: Mapping[str, object] = field(default_factory=dict)


def _cell_masks(
    dataset: Dataset, conditioning: Sequence[str], mode: str
) -> list[tuple[str, np.ndarray]]:
    aus = sorted(conditioning, key=au_sort_key)
    if not dataset.is_binarized(aus):
        raise NotBinarized(f"dataset not binarized for {aus}")
    presence = {
        au: np.array([r.au_presence[au] for r in dataset.records]) for au in aus
    }
    cells = []
    if mode == "joint":
        for bits in itertools.product((0, 1), repeat=len(aus)):
            key = AuCellKey(tuple(zip(aus, bits)))
            mask = np.ones(len(dataset), dtype=bool)
            for au, b in zip(aus, bits):
                mask &= presence[au] == b
            cells.append((key.describe(), mask))
    elif mode == "marginal":
        for au in aus:
            for b in (0, 1):
                cells.append((f"{au}={b}", presence[au] == b))
    else:
        raise ValueError(f"unknown conditioning mode {mode!r}")
    return cells


def group_design(
    dataset: Dataset, au_ids: Sequence[str], group_attr: str
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Design matrix: intercept + raw AU intensities + one indicator per
    non-reference group level (reference = first declared level)."""
    aus = sorted(au_ids, key=au_sort_key)
    levels = dataset.attribute_levels[group_attr]
    cols = [np.ones(len(dataset))]
    names = ["intercept"]
    for au in aus:
        cols.append(dataset.intensities(au))
        names.append(au)
    grp = np.array(dataset.group_values(group_attr))
    for lvl in levels[1:]:
        cols.append((grp == lvl).astype(float))
        names.append(f"{group_attr}={lvl}")
    return np.stack(cols, axis=1), tuple(names)


def _build_cell(
    condition: str,
    levels: Sequence[str],
    positives: dict[str, int],
    totals: dict[str, int],
    min_expected: float,
    small_level_policy: str = "insufficient",
) -> CellResult:
    present = [lvl for lvl in levels if totals.get(lvl, 0) > 0]
    props = {lvl: positives[lvl] / totals[lvl] for lvl in present}
    delta = None
    if len(levels) == 2 and len(present) == 2:
        delta = props[present[1]] - props[present[0]]

    def attempt(rows: list[str], pos: dict, tot: dict, merged: tuple):
        table = table_from_counts(
            rows, [pos[r] for r in rows], [tot[r] for r in rows], condition
        )
        stat, dof, p = chi_square_independence(table, min_expected=min_expected)
        argmax = None
        if p < 0.05:
            argmax = max(rows, key=lambda r: pos[r] / tot[r])
        return CellResult(
            condition=condition,
            n_per_group=dict(totals),
            positives_per_group=dict(positives),
            proportion_per_group=props,
            status="tested",
            delta=delta,
            chi_square=stat,
            dof=dof,
            p_value=p,
            argmax_level=argmax,
            merged_levels=merged,
        )

    rows = list(present)
    pos = {r: positives[r] for r in rows}
    tot = {r: totals[r] for r in rows}
    merged: tuple[str, ...] = ()
    while True:
        if len(rows) < 2:
            break
        try:
            return attempt(rows, pos, tot, merged)
        except InsufficientData:
            candidates = [r for r in rows if r != "other"]
            if small_level_policy != "merge" or len(rows) <= 2 or not candidates:
                break
            # fold the thinnest level into "other" and retry
            smallest = min(candidates, key=lambda r: tot[r])
            rows.remove(smallest)
            if "other" not in rows:
                rows.append("other")
                pos["other"] = 0
                tot["other"] = 0
            pos["other"] += pos.pop(smallest)
            tot["other"] += tot.pop(smallest)
            merged = merged + (smallest,)
    return CellResult(
        condition=condition,
        n_per_group=dict(totals),
        positives_per_group=dict(positives),
        proportion_per_group=props,
        status="insufficient_data",
        delta=delta,
        merged_levels=merged,
    )


def conditional_bias_report(
    dataset: Dataset,
    conditioning: Sequence[str],
    group_attr: str,
    target_label: int = 1,
    mode: str = "joint",
    min_expected: float = 5.0,
    include_logistic: bool = True,
    small_level_policy: str = "insufficient",
) -> BiasReport:
    """Per-cell conditional positive proportions, deltas, and chi-square
    independence outcomes, plus a pooled logistic fit of the label on AU
    intensities and group indicators.

    Delta convention: second declared group level minus first.
    """
    levels = dataset.attribute_levels[group_attr]
    grp = np.array(dataset.group_values(group_attr))
    y = (dataset.labels() == target_label).astype(int)
    cells = []
    for condition, mask in _cell_masks(dataset, conditioning, mode):
        positives = {}
        totals = {}
        for lvl in levels:
            sel = mask & (grp == lvl)
            totals[lvl] = int(sel.sum())
            positives[lvl] = int(y[sel].sum())
        cells.append(
            _build_cell(condition, levels, positives, totals,
                        min_expected, small_level_policy)
        )
    cells.sort(key=lambda c: c.condition)

    logistic = None
    logistic_error = None
    if include_logistic:
        try:
            X, names = group_design(dataset, conditioning, group_attr)
            logistic = logistic_fit(X, y, term_names=names)
        except (Separation, SingularDesign) as exc:
            logistic_error = f"{type(exc).__name__}: {exc}"

    return BiasReport(
        group_attr=group_attr,
        group_levels=tuple(levels),
        target_label=target_label,
        conditioning=tuple(sorted(conditioning, key=au_sort_key)),
        mode=mode,
        cells=tuple(cells),
        logistic=logistic,
        logistic_error=logistic_error,
        metadata={
            "min_expected": min_expected,
            "target_definition": "binary target vs rest",
        },
    )


def multi_group_bias_report(
    dataset: Dataset,
    conditioning: Sequence[str],
    group_attr: str,
    target_label: int = 1,
    mode: str = "joint",
    min_expected: float = 5.0,
    small_level_policy: str = "insufficient",
) -> BiasReport:
    """Audit for attributes with three or more levels (age groups, race).
    Flags the level with the highest positive proportion when significant;
    small_level_policy='merge' folds sparse levels into 'other' instead of
    abandoning the cell."""
    levels = dataset.attribute_levels[group_attr]
    if len(levels) < 3:
        raise ValueError("multi_group_bias_report expects >= 3 group levels")
    return conditional_bias_report(
        dataset,
        conditioning,
        group_attr,
        target_label=target_label,
        mode=mode,
        min_expected=min_expected,
        include_logistic=False,
        small_level_policy=small_level_policy,
    )


@dataclass(frozen=True)
class GroupCurve:
    level: str
    au_id: str
    grid: np.ndarray
    probabilities: np.ndarray
    std_errors: np.ndarray


def bias_curves(
    dataset: Dataset,
    au_intensity_ids: Sequence[str],
    group_attr: str,
    target_label: int = 1,
    grid: Sequence[float] = (),
) -> list[GroupCurve]:
    """Per-group fitted logistic curves of P(Y=target | AU intensity) on
    the grid, with delta-method standard-error bands. Each AU is swept in
    turn with the remaining AUs held at their pooled mean."""
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        return []
    aus = sorted(au_intensity_ids, key=au_sort_key)
    y = (dataset.labels() == target_label).astype(int)
    grp = np.array(dataset.group_values(group_attr))
    means = {au: float(dataset.intensities(au).mean()) for au in aus}
    intensity = {au: dataset.intensities(au) for au in aus}

    curves = []
    for lvl in dataset.attribute_levels[group_attr]:
        mask = grp == lvl
        X = np.stack(
            [np.ones(int(mask.sum()))] + [intensity[au][mask] for au in aus],
            axis=1,
        )
        fit = logistic_fit(X, y[mask], term_names=("intercept", *aus))
        for j, au in enumerate(aus):
            design = np.ones((grid.size, len(aus) + 1))
            for k, other in enumerate(aus):
                design[:, k + 1] = means[other]
            design[:, j + 1] = grid
            probs = fit.predict(design)
            # delta method through the logistic link
            g = design * (probs * (1 - probs))[:, None]
            var = np.einsum("ij,jk,ik->i", g, fit.covariance, g)
            curves.append(
                GroupCurve(
                    level=lvl,
                    au_id=au,
                    grid=grid.copy(),
                    probabilities=probs,
                    std_errors=np.sqrt(np.maximum(var, 0.0)),
                )
            )
    return curves
