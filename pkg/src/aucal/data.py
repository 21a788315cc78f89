"""Data model and tabular I/O: annotated records, datasets, CSV load/save,
and AU binarization.

Datasets are immutable after construction; every transform returns a new
Dataset sharing unchanged records.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    InconsistentFeatureDim,
    MissingColumn,
    NotBinarized,
    ParseError,
    UnknownAu,
    UnknownGroupLevel,
)

AU_COLUMN_RE = re.compile(r"^AU\d+$")
FEATURE_COLUMN_RE = re.compile(r"^f(\d+)$")
PRESENCE_SUFFIX = "_presence"
KNOWN_GROUP_COLUMNS = ("gender", "age_group", "race")
AU_MIN, AU_MAX = 0.0, 5.0


def au_sort_key(au_id: str) -> tuple[int, str]:
    m = re.match(r"^AU(\d+)$", au_id)
    return (int(m.group(1)), au_id) if m else (10**9, au_id)


@dataclass(frozen=True, order=True)
class AuCellKey:
    """One binarized-AU configuration used as a conditioning event,
    e.g. ((AU6, 1), (AU12, 0)). AU ids are kept sorted."""

    items: tuple[tuple[str, int], ...]

    def __post_init__(self):
        items = tuple(sorted(self.items, key=lambda kv: kv[0]))
        for au, bit in items:
            if bit not in (0, 1):
                raise ValueError(f"presence bit must be 0/1, got {bit}")
        object.__setattr__(self, "items", items)

    def describe(self) -> str:
        return ",".join(f"{au}={bit}" for au, bit in self.items)

    def __str__(self) -> str:
        return self.describe()


@dataclass(frozen=True)
class AnnotatedRecord:
    """One face: AU intensities, label, protected attributes, and the
    optional feature vector standing in for the image."""

    id: str
    au_intensities: Mapping[str, float]
    label: int
    group: Mapping[str, str]
    au_presence: Mapping[str, int] | None = None
    features: np.ndarray | None = None
    split: str = "train"


@dataclass(frozen=True)
class Dataset:
    records: tuple[AnnotatedRecord, ...]
    attribute_levels: Mapping[str, tuple[str, ...]]
    au_ids: tuple[str, ...]
    feature_dim: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[AnnotatedRecord]:
        return iter(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def feature_matrix(self) -> np.ndarray:
        if self.feature_dim == 0:
            return np.zeros((len(self.records), 0))
        return np.stack([np.asarray(r.features, dtype=float) for r in self.records])

    def group_values(self, attr: str) -> list[str]:
        if attr not in self.attribute_levels:
            raise UnknownGroupLevel(attr)
        return [r.group[attr] for r in self.records]

    def intensities(self, au_id: str) -> np.ndarray:
        if au_id not in self.au_ids:
            raise UnknownAu(au_id)
        return np.array([r.au_intensities[au_id] for r in self.records])

    def is_binarized(self, au_ids: Sequence[str]) -> bool:
        return all(
            r.au_presence is not None and all(a in r.au_presence for a in au_ids)
            for r in self.records
        )

    def cell_keys(self, au_ids: Sequence[str]) -> list[AuCellKey]:
        if not self.is_binarized(au_ids):
            raise NotBinarized(f"dataset not binarized for {list(au_ids)}")
        aus = sorted(au_ids, key=au_sort_key)
        return [
            AuCellKey(tuple((a, int(r.au_presence[a])) for a in aus))
            for r in self.records
        ]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        recs = tuple(self.records[i] for i in indices)
        return replace(self, records=recs)

    def split_part(self, part: str) -> "Dataset":
        return replace(
            self, records=tuple(r for r in self.records if r.split == part)
        )

    def with_labels(self, new_labels: Sequence[int]) -> "Dataset":
        if len(new_labels) != len(self.records):
            raise ValueError("label vector length mismatch")
        recs = tuple(
            replace(r, label=int(y)) for r, y in zip(self.records, new_labels)
        )
        return replace(self, records=recs)


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for load_dataset. label_col names the expression
    column (e.g. 'happy' or 'label'); group_cols default to whichever of
    gender/age_group/race are present."""

    id_col: str = "id"
    label_col: str = "label"
    group_cols: tuple[str, ...] | None = None
    split_col: str = "split"


@dataclass
class LoadResult:
    dataset: Dataset
    dropped_rows: int
    ignored_columns: list[str] = field(default_factory=list)


def load_dataset(path: str | Path, schema: CsvSchema | None = None) -> LoadResult:
    """Load and validate a dataset CSV.

    Rows with any missing AU intensity are dropped and counted; out-of-range
    intensities raise ParseError to surface schema mismatches.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: no header")
        rows = list(reader)

    col_idx = {name: i for i, name in enumerate(header)}
    for required in (schema.id_col, schema.label_col):
        if required not in col_idx:
            raise MissingColumn(required)

    group_cols = schema.group_cols
    if group_cols is None:
        group_cols = tuple(c for c in KNOWN_GROUP_COLUMNS if c in col_idx)
    if not group_cols:
        raise MissingColumn("gender (no group column found)")
    for g in group_cols:
        if g not in col_idx:
            raise MissingColumn(g)

    au_cols = sorted(
        (c for c in header if AU_COLUMN_RE.match(c)), key=au_sort_key
    )
    presence_cols = {
        c[: -len(PRESENCE_SUFFIX)]: c
        for c in header
        if c.endswith(PRESENCE_SUFFIX) and AU_COLUMN_RE.match(c[: -len(PRESENCE_SUFFIX)])
    }
    feat_indices = {}
    for c in header:
        m = FEATURE_COLUMN_RE.match(c)
        if m:
            feat_indices[int(m.group(1))] = c
    feature_dim = len(feat_indices)
    if feature_dim and sorted(feat_indices) != list(range(feature_dim)):
        raise InconsistentFeatureDim(
            f"feature columns not contiguous f0..f{feature_dim - 1}"
        )
    feat_cols = [feat_indices[i] for i in range(feature_dim)]

    recognized = {schema.id_col, schema.label_col, schema.split_col}
    recognized.update(group_cols)
    recognized.update(au_cols)
    recognized.update(presence_cols.values())
    recognized.update(feat_cols)
    ignored = [c for c in header if c not in recognized]

    records: list[AnnotatedRecord] = []
    dropped = 0
    for rownum, row in enumerate(rows, start=2):
        # missing AU intensity -> drop (mirrors AU-detector failures)
        au_vals = {}
        missing_au = False
        for au in au_cols:
            raw = row[col_idx[au]].strip()
            if raw == "":
                missing_au = True
                break
            try:
                v = float(raw)
            except ValueError:
                raise ParseError(rownum, au, "not a number")
            if not (AU_MIN <= v <= AU_MAX):
                raise ParseError(rownum, au, f"intensity {v} outside [0, 5]")
            au_vals[au] = v
        if missing_au:
            dropped += 1
            continue

        presence = None
        if presence_cols:
            presence = {}
            for au, col in presence_cols.items():
                raw = row[col_idx[col]].strip()
                if raw not in ("0", "1"):
                    raise ParseError(rownum, col, "presence must be 0/1")
                presence[au] = int(raw)

        raw_label = row[col_idx[schema.label_col]].strip()
        try:
            label = int(raw_label)
        except ValueError:
            raise ParseError(rownum, schema.label_col, "not an integer")

        group = {g: row[col_idx[g]].strip() for g in group_cols}

        features = None
        if feature_dim:
            try:
                features = np.array(
                    [float(row[col_idx[c]]) for c in feat_cols], dtype=float
                )
            except ValueError:
                raise ParseError(rownum, "f*", "feature not a number")

        split = "train"
        if schema.split_col in col_idx:
            split = row[col_idx[schema.split_col]].strip() or "train"
            if split not in ("train", "test"):
                raise ParseError(rownum, schema.split_col, "split must be train/test")

        records.append(
            AnnotatedRecord(
                id=row[col_idx[schema.id_col]].strip(),
                au_intensities=au_vals,
                label=label,
                group=group,
                au_presence=presence,
                features=features,
                split=split,
            )
        )

    if not records:
        raise EmptyDataset(f"{path}: no usable rows")

    levels = {
        g: tuple(sorted({r.group[g] for r in records})) for g in group_cols
    }
    dataset = Dataset(
        records=tuple(records),
        attribute_levels=levels,
        au_ids=tuple(au_cols),
        feature_dim=feature_dim,
    )
    return LoadResult(dataset=dataset, dropped_rows=dropped, ignored_columns=ignored)


def save_dataset(
    dataset: Dataset,
    path: str | Path,
    label_col: str = "label",
    extra_columns: Mapping[str, Sequence] | None = None,
) -> None:
    """Write a Dataset back to the CSV schema load_dataset reads
    (round-trip safe, including presence columns when binarized)."""
    group_cols = list(dataset.attribute_levels)
    has_presence = all(r.au_presence is not None for r in dataset.records)
    header = ["id"] + list(dataset.au_ids)
    if has_presence:
        header += [f"{au}{PRESENCE_SUFFIX}" for au in dataset.au_ids]
    header += [label_col] + group_cols + ["split"]
    header += [f"f{i}" for i in range(dataset.feature_dim)]
    extra = dict(extra_columns or {})
    header += list(extra)

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, r in enumerate(dataset.records):
            row = [r.id]
            row += [repr(float(r.au_intensities[au])) for au in dataset.au_ids]
            if has_presence:
                row += [str(int(r.au_presence[au])) for au in dataset.au_ids]
            row.append(str(r.label))
            row += [r.group[g] for g in group_cols]
            row.append(r.split)
            if dataset.feature_dim:
                row += [repr(float(v)) for v in r.features]
            for col in extra:
                row.append(str(extra[col][i]))
            w.writerow(row)


def binarize(
    dataset: Dataset,
    thresholds: Mapping[str, float],
    per_group: Mapping[tuple[str, str], float] | None = None,
    group_attr: str | None = None,
) -> Dataset:
    """Apply binarization thresholds: presence = 1 iff intensity strictly
    exceeds the threshold. Per-group thresholds take precedence; intensities
    are retained untouched."""
    for au in thresholds:
        if au not in dataset.au_ids:
            raise UnknownAu(au)
    per_group = dict(per_group or {})
    if per_group:
        if group_attr is None:
            group_attr = next(iter(dataset.attribute_levels))
        levels = set(dataset.attribute_levels[group_attr])
        aus_with_overrides = {au for au, _ in per_group}
        for au, level in per_group:
            if au not in dataset.au_ids:
                raise UnknownAu(au)
            if level not in levels:
                raise UnknownGroupLevel(level)
        for au in aus_with_overrides:
            covered = {lvl for a, lvl in per_group if a == au}
            if covered != levels:
                raise UnknownGroupLevel(
                    f"per-group thresholds for {au} do not cover {sorted(levels - covered)}"
                )

    new_records = []
    for r in dataset.records:
        presence = dict(r.au_presence or {})
        for au, t in thresholds.items():
            eff = t
            if per_group and (au, r.group[group_attr]) in per_group:
                eff = per_group[(au, r.group[group_attr])]
            presence[au] = 1 if r.au_intensities[au] > eff else 0
        new_records.append(replace(r, au_presence=presence))
    return replace(dataset, records=tuple(new_records))


def make_dataset(records: Sequence[AnnotatedRecord], au_ids: Sequence[str],
                 feature_dim: int = 0) -> Dataset:
    """Construct a Dataset, inferring attribute levels from the records."""
    if not records:
        raise EmptyDataset("no records")
    attrs = sorted(records[0].group)
    levels = {a: tuple(sorted({r.group[a] for r in records})) for a in attrs}
    return Dataset(
        records=tuple(records),
        attribute_levels=levels,
        au_ids=tuple(sorted(au_ids, key=au_sort_key)),
        feature_dim=feature_dim,
    )
