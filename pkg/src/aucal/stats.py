"""Statistical primitives: regularized incomplete gamma, chi-square,
two-proportion z-test, and the contingency-table container.

The incomplete gamma is implemented twice on purpose (power series and
Lentz continued fractions): the two routes cross-validate each other and
back the chi-square p-values with no external dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientData, InvalidCounts

_EPS = 1e-15
_MAX_ITER = 10000


def lower_gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by power series.

    Converges for all x >= 0; fastest for x < a + 1.
    """
    if x < 0 or a <= 0:
        raise ValueError("require x >= 0 and a > 0")
    if x == 0.0:
        return 0.0
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def upper_gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by the Legendre
    continued fraction (modified Lentz). Accurate for x >= a + 1."""
    if x < 0 or a <= 0:
        raise ValueError("require x >= 0 and a > 0")
    if x == 0.0:
        return 1.0
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b if b != 0 else 1.0 / tiny
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def lower_gamma_cf(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by its own continued
    fraction (modified Lentz). Converges best for x < a + 1."""
    if x < 0 or a <= 0:
        raise ValueError("require x >= 0 and a > 0")
    if x == 0.0:
        return 0.0
    tiny = 1e-300
    # gamma(a,x) = x^a e^-x * CF with a_1 = 1, b_1 = a,
    # a_{2m} = -(a+m-1)x, a_{2m+1} = m x, b_n = a + n - 1.
    b = a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        m = (i + 1) // 2
        if i % 2 == 1:
            an = -(a + m - 1.0) * x
        else:
            an = m * x
        b += 1.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def reg_upper_gamma(a: float, x: float) -> float:
    """Q(a, x), choosing the numerically favorable route per region."""
    if x < a + 1.0:
        return 1.0 - lower_gamma_series(a, x)
    return upper_gamma_cf(a, x)


def reg_lower_gamma(a: float, x: float) -> float:
    if x < a + 1.0:
        return lower_gamma_series(a, x)
    return 1.0 - upper_gamma_cf(a, x)


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail P(X >= x) of the chi-square distribution."""
    if x < 0:
        return 1.0
    if dof < 1:
        raise ValueError("dof must be >= 1")
    return reg_upper_gamma(dof / 2.0, x / 2.0)


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class ContingencyTable:
    """Counts of label values (columns) per group level (rows) within one
    conditioning cell."""

    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    counts: np.ndarray
    cell_condition: str = ""

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 2:
            raise InvalidCounts("counts must be a 2-d matrix")
        if counts.shape != (len(self.row_labels), len(self.col_labels)):
            raise InvalidCounts("counts shape does not match labels")
        if counts.shape[0] < 2 or counts.shape[1] < 2:
            raise InvalidCounts("need at least 2 rows and 2 columns")
        if (counts < 0).any():
            raise InvalidCounts("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def chi_square_independence(
    table: ContingencyTable, min_expected: float = 5.0
) -> tuple[float, int, float]:
    """Pearson chi-square test of independence.

    Raises InsufficientData when any expected count falls below
    min_expected (the table is too sparse for the asymptotic test).
    """
    counts = table.counts.astype(float)
    total = counts.sum()
    if total <= 0:
        raise InsufficientData("empty table")
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    expected = np.outer(row_sums, col_sums) / total
    if (expected < min_expected).any():
        raise InsufficientData(
            f"expected count below {min_expected} "
            f"(min {expected.min():.3g})"
        )
    stat = float(((counts - expected) ** 2 / expected).sum())
    dof = (counts.shape[0] - 1) * (counts.shape[1] - 1)
    p = chi2_sf(stat, dof)
    return stat, dof, p


def two_proportion_test(k1: int, n1: int, k2: int, n2: int) -> float:
    """Pooled two-sided two-proportion z-test; returns the p-value.

    A degenerate pooled proportion (all successes or all failures) carries
    no evidence against equality, so p = 1.
    """
    for k, n in ((k1, n1), (k2, n2)):
        if n < 1 or k < 0 or k > n:
            raise InvalidCounts(f"invalid counts: k={k}, n={n}")
    pooled = (k1 + k2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        return 1.0
    p1 = k1 / n1
    p2 = k2 / n2
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    z = (p1 - p2) / se
    return math.erfc(abs(z) / math.sqrt(2.0))


def table_from_counts(
    levels: Sequence[str], positives: Sequence[int], totals: Sequence[int],
    condition: str = "",
) -> ContingencyTable:
    """Rows = group levels, columns = (positive, negative)."""
    pos = np.asarray(positives, dtype=np.int64)
    tot = np.asarray(totals, dtype=np.int64)
    counts = np.stack([pos, tot - pos], axis=1)
    return ContingencyTable(
        row_labels=tuple(levels),
        col_labels=("positive", "negative"),
        counts=counts,
        cell_condition=condition,
    )
