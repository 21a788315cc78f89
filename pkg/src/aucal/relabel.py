"""Label-parity relabeling and balanced subsampling.

Per AU cell, each group's positive proportion is pulled to the pooled
(count-weighted) proportion by flipping a computed number of uniformly
sampled labels; the balanced subsampler draws a fixed count per
(cell x group) stratum.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, au_sort_key
from .errors import InvalidCount, NotBinarized
from .rng import Rng


@dataclass(frozen=True)
class FlipEntry:
    record_id: str
    condition: str
    group: str
    direction: str  # "pos_to_neg" | "neg_to_pos"


@dataclass
class FlipLog:
    entries: list[FlipEntry] = field(default_factory=list)
    deficits: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def _round_half_even(x: float) -> int:
    return int(np.rint(x))


def relabel_to_parity(
    dataset: Dataset,
    conditioning: Sequence[str],
    group_attr: str,
    target_label: int = 1,
    seed: int = 0,
) -> tuple[Dataset, FlipLog]:
    """Flip labels within each AU cell until every group's positive
    proportion sits within 1/n_g of the cell's pooled proportion.

    Groups above the pooled target have round(n_g * (p_g - p*)) positives
    flipped negative; groups below get the mirror-image flips. Flip targets
    are sampled uniformly within the eligible stratum.
    """
    aus = sorted(conditioning, key=au_sort_key)
    if not dataset.is_binarized(aus):
        raise NotBinarized(f"dataset not binarized for {aus}")
    if len(dataset.attribute_levels[group_attr]) < 2:
        raise ValueError("need at least two group levels")

    keys = dataset.cell_keys(aus)
    grp = dataset.group_values(group_attr)
    y = (dataset.labels() == target_label).astype(int)

    strata: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for i, key in enumerate(keys):
        strata[key.describe()][grp[i]].append(i)

    rng = Rng(seed, ("relabel",))
    log = FlipLog()
    new_y = y.copy()
    for condition in sorted(strata):
        groups = strata[condition]
        n_total = sum(len(v) for v in groups.values())
        pos_total = sum(int(y[v].sum()) for v in (np.array(ix) for ix in groups.values()))
        if n_total == 0:
            continue
        p_star = pos_total / n_total
        for level in sorted(groups):
            idx = np.array(groups[level])
            n_g = idx.size
            p_g = float(y[idx].mean())
            n_flip = _round_half_even(n_g * (p_g - p_star))
            if n_flip == 0:
                continue
            if n_flip > 0:
                eligible = idx[y[idx] == 1]
                direction = "pos_to_neg"
                new_value = 0
            else:
                eligible = idx[y[idx] == 0]
                direction = "neg_to_pos"
                new_value = 1
            want = abs(n_flip)
            if want > eligible.size:
                log.deficits.append(
                    f"{condition}/{level}: wanted {want} flips, "
                    f"only {eligible.size} eligible"
                )
                want = eligible.size
            gen = rng.child(f"{condition}/{level}").generator()
            chosen = gen.choice(eligible, size=want, replace=False)
            for i in sorted(chosen.tolist()):
                new_y[i] = new_value
                log.entries.append(
                    FlipEntry(
                        record_id=dataset.records[i].id,
                        condition=condition,
                        group=level,
                        direction=direction,
                    )
                )

    # map the binary target back onto the stored labels (binary datasets)
    other = 0 if target_label != 0 else 1
    new_labels = [
        r.label if t == (r.label == target_label)
        else (target_label if t else other)
        for r, t in zip(dataset.records, new_y)
    ]
    return dataset.with_labels(new_labels), log


@dataclass
class SubsampleResult:
    dataset: Dataset
    shortfalls: list[str] = field(default_factory=list)


def balanced_subsample(
    dataset: Dataset,
    conditioning: Sequence[str],
    group_attr: str,
    per_cell_count: int,
    seed: int = 0,
) -> SubsampleResult:
    """Uniform sample without replacement of per_cell_count records per
    (AU cell x group); strata that fall short keep everything and are
    logged as warnings."""
    if per_cell_count < 1:
        raise InvalidCount(f"per_cell_count must be >= 1, got {per_cell_count}")
    aus = sorted(conditioning, key=au_sort_key)
    keys = dataset.cell_keys(aus)
    grp = dataset.group_values(group_attr)
    strata: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, key in enumerate(keys):
        strata[(key.describe(), grp[i])].append(i)

    rng = Rng(seed, ("balanced_subsample",))
    kept: list[int] = []
    shortfalls: list[str] = []
    for stratum in sorted(strata):
        idx = np.array(strata[stratum])
        if idx.size <= per_cell_count:
            if idx.size < per_cell_count:
                shortfalls.append(
                    f"{stratum[0]}/{stratum[1]}: only {idx.size} of "
                    f"{per_cell_count} available"
                )
            kept.extend(idx.tolist())
        else:
            gen = rng.child(f"{stratum[0]}/{stratum[1]}").generator()
            kept.extend(sorted(gen.choice(idx, size=per_cell_count, replace=False).tolist()))
    kept.sort()
    return SubsampleResult(dataset=dataset.subset(kept), shortfalls=shortfalls)
