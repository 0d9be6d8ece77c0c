"""Datasets with per-sample group annotations.

Provides construction of controllable synthetic populations, CSV load/save,
stratified splitting, and group upsampling. All operations are pure: datasets
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "SynthSpec",
    "synth_gaussian_groups",
    "load_csv",
    "save_csv",
    "split",
    "upsample_group",
    "dataset_manifest",
]


class DataError(ValueError):
    """Malformed dataset input: bad CSV cell, missing column, empty file."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """A feature matrix with per-sample group ids and class labels.

    Attributes:
        features: (n, d) float64 matrix, all entries finite.
        groups: (n,) integer vector, values in [0, n_groups); every group
            id below the maximum must occur at least once.
        labels: (n,) integer vector, values in [0, n_classes).
        group_names: optional display names, one per group id.
    """

    features: np.ndarray
    groups: np.ndarray
    labels: np.ndarray
    group_names: tuple[str, ...] | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("features must be a nonempty 2-D matrix")
        groups = np.asarray(self.groups, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        n = feats.shape[0]
        if groups.shape != (n,) or labels.shape != (n,):
            raise ValueError(
                f"length mismatch: {n} feature rows, {groups.shape[0]} groups, "
                f"{labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(feats)):
            bad = np.argwhere(~np.isfinite(feats))[0]
            raise ValueError(f"non-finite feature at row {bad[0]}, column {bad[1]}")
        if groups.min() < 0 or labels.min() < 0:
            raise ValueError("group ids and labels must be nonnegative")
        m = int(groups.max()) + 1
        present = np.bincount(groups, minlength=m)
        if np.any(present == 0):
            missing = int(np.argmin(present))
            raise ValueError(f"group id {missing} has no samples")
        if self.group_names is not None and len(self.group_names) != m:
            raise ValueError(
                f"group_names has {len(self.group_names)} entries for {m} groups"
            )
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "groups", _frozen(groups))
        object.__setattr__(self, "labels", _frozen(labels))
        if self.group_names is not None:
            object.__setattr__(self, "group_names", tuple(self.group_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.n_groups)

    def group_indices(self, group_id: int) -> np.ndarray:
        """Row indices of one group. Raises ValueError for unknown ids."""
        if not 0 <= group_id < self.n_groups:
            raise ValueError(f"unknown group id {group_id} (have {self.n_groups} groups)")
        return np.flatnonzero(self.groups == group_id)

    def restrict(self, rows: np.ndarray) -> "Dataset":
        """Dataset on a row subset; group/label ids are kept as-is."""
        return Dataset(
            self.features[rows], self.groups[rows], self.labels[rows], self.group_names
        )

    def group_name(self, group_id: int) -> str:
        if self.group_names is not None:
            return self.group_names[group_id]
        return str(group_id)


def _per_group(value, m: int, name: str) -> np.ndarray:
    """Broadcast a scalar or length-m sequence to a per-group float array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(m, float(arr))
    if arr.shape != (m,):
        raise ValueError(f"{name} must be a scalar or have one entry per group ({m})")
    return arr


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic Gaussian-mixture population with groups.

    `class_separation` and `noise_scale` may be scalars (shared by all
    groups) or per-group sequences; smaller separation or larger noise makes
    a group harder to classify. Proportions quoted to two decimals may sum
    slightly off 1 (tolerance 0.025); the generated size is then the rounded
    sum of per-group shares rather than exactly n_total.
    """

    group_proportions: tuple[float, ...]
    class_separation: float | tuple[float, ...]
    noise_scale: float | tuple[float, ...]
    n_total: int
    dims: int
    n_classes: int
    seed: int

    def __post_init__(self):
        props = np.asarray(self.group_proportions, dtype=np.float64)
        if props.ndim != 1 or props.size < 1:
            raise ValueError("group_proportions must be a nonempty vector")
        if np.any(props <= 0):
            raise ValueError("every group proportion must be > 0")
        if abs(props.sum() - 1.0) > 0.025:
            raise ValueError(f"group proportions sum to {props.sum()!r}, expected ~1")
        if self.n_total < 1:
            raise ValueError("n_total must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.dims < self.n_classes:
            raise ValueError("dims must be >= n_classes (class means span n_classes axes)")
        sep = _per_group(self.class_separation, props.size, "class_separation")
        noise = _per_group(self.noise_scale, props.size, "noise_scale")
        if np.any(sep < 0):
            raise ValueError("class_separation must be >= 0")
        if np.any(noise <= 0):
            raise ValueError("noise_scale must be > 0")
        object.__setattr__(self, "group_proportions", tuple(float(p) for p in props))

    def separations(self) -> np.ndarray:
        return _per_group(self.class_separation, len(self.group_proportions), "class_separation")

    def noises(self) -> np.ndarray:
        return _per_group(self.noise_scale, len(self.group_proportions), "noise_scale")


def largest_remainder_counts(proportions: Sequence[float], total: int,
                             target: int | None = None) -> np.ndarray:
    """Integer counts of the shares proportions * total.

    Floors each share, then hands leftover units to the largest fractional
    parts (lowest index wins ties) until the counts sum to `target`, which
    defaults to the rounded sum of the shares (= `total` whenever the
    proportions sum to 1). Deterministic.
    """
    props = np.asarray(proportions, dtype=np.float64)
    raw = props * total
    if target is None:
        target = int(round(raw.sum()))
    counts = np.floor(raw).astype(np.int64)
    remainder = int(target - counts.sum())
    if remainder > 0:
        frac = raw - counts
        # stable sort on (-frac, index): biggest fractions first, ties by index
        order = np.lexsort((np.arange(props.size), -frac))
        counts[order[:remainder]] += 1
    return counts


def _unit_simplex(n_points: int, dims: int) -> np.ndarray:
    """n_points centered vectors in R^dims with all pairwise distances 1."""
    verts = np.eye(n_points, dims)
    verts -= verts.mean(axis=0, keepdims=True)
    return verts / math.sqrt(2.0)


def synth_gaussian_groups(spec: SynthSpec) -> Dataset:
    """Draw a grouped Gaussian-mixture classification dataset.

    Group a receives its largest-remainder share of n_total. Within a group,
    samples split evenly over classes, and class c is drawn from an isotropic
    Gaussian centered on a regular-simplex vertex scaled so that all pairwise
    class-mean distances equal the group's separation. Deterministic for a
    given seed.
    """
    counts = largest_remainder_counts(spec.group_proportions, spec.n_total)
    if np.any(counts == 0):
        bad = int(np.argmin(counts))
        raise ValueError(
            f"group {bad} (proportion {spec.group_proportions[bad]}) rounds to 0 "
            f"samples out of {spec.n_total}; increase n_total"
        )
    seps = spec.separations()
    noises = spec.noises()
    simplex = _unit_simplex(spec.n_classes, spec.dims)

    rng = np.random.default_rng(spec.seed)
    feats, groups, labels = [], [], []
    for a, count in enumerate(counts):
        class_counts = largest_remainder_counts(
            np.full(spec.n_classes, 1.0 / spec.n_classes), int(count)
        )
        for c, cc in enumerate(class_counts):
            if cc == 0:
                continue
            mu = simplex[c] * seps[a]
            feats.append(mu + noises[a] * rng.standard_normal((int(cc), spec.dims)))
            groups.append(np.full(int(cc), a, dtype=np.int64))
            labels.append(np.full(int(cc), c, dtype=np.int64))

    features = np.concatenate(feats, axis=0)
    group_vec = np.concatenate(groups)
    label_vec = np.concatenate(labels)
    perm = rng.permutation(features.shape[0])
    return Dataset(features[perm], group_vec[perm], label_vec[perm])


@dataclass(frozen=True)
class ColumnSchema:
    """Column roles for CSV loading.

    `feature_columns` of None means "every column that is not the group or
    label column".
    """

    group_column: str
    label_column: str
    feature_columns: tuple[str, ...] | None = None


def _categorical_ids(raw: list[str]) -> tuple[np.ndarray, list[str]]:
    """Map raw string values to dense ids.

    All-integer columns are ordered numerically (so integer ids survive a
    save/load round trip); anything else is ordered by sorted lexical value.
    """
    keys: list
    try:
        keys = [int(v) for v in raw]
    except ValueError:
        keys = list(raw)
    ordered = sorted(set(keys))
    mapping = {v: i for i, v in enumerate(ordered)}
    ids = np.array([mapping[k] for k in keys], dtype=np.int64)
    return ids, [str(v) for v in ordered]


def load_csv(path: str | Path, schema: ColumnSchema) -> Dataset:
    """Load a Dataset from a headered CSV file.

    Feature cells must parse as finite floats; group and label columns may be
    strings or integers and are mapped to dense ids (see `_categorical_ids`).
    Raises DataError naming the offending row/column on any malformed cell.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows after header")

    col_index = {name: i for i, name in enumerate(header)}
    for required in (schema.group_column, schema.label_column):
        if required not in col_index:
            raise DataError(f"{path}: missing column {required!r} (header: {header})")
    if schema.feature_columns is None:
        feature_cols = [
            c for c in header if c not in (schema.group_column, schema.label_column)
        ]
    else:
        feature_cols = list(schema.feature_columns)
        for c in feature_cols:
            if c not in col_index:
                raise DataError(f"{path}: missing feature column {c!r}")
    if not feature_cols:
        raise DataError(f"{path}: no feature columns")

    n = len(rows)
    features = np.empty((n, len(feature_cols)), dtype=np.float64)
    group_raw, label_raw = [], []
    for r, row in enumerate(rows):
        line = r + 2  # 1-based, after the header line
        if len(row) != len(header):
            raise DataError(f"{path}: row at line {line} has {len(row)} cells, expected {len(header)}")
        for j, c in enumerate(feature_cols):
            cell = row[col_index[c]]
            try:
                value = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric feature {cell!r} at line {line}, column {c!r}"
                ) from None
            if not math.isfinite(value):
                raise DataError(f"{path}: non-finite feature at line {line}, column {c!r}")
            features[r, j] = value
        group_raw.append(row[col_index[schema.group_column]])
        label_raw.append(row[col_index[schema.label_column]])

    groups, group_names = _categorical_ids(group_raw)
    labels, _ = _categorical_ids(label_raw)
    try:
        return Dataset(features, groups, labels, tuple(group_names))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_csv(ds: Dataset, path: str | Path, feature_names: Sequence[str] | None = None) -> Path:
    """Write a Dataset as UTF-8 CSV with a header row."""
    path = Path(path)
    d = ds.n_features
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(d)]
    if len(feature_names) != d:
        raise ValueError(f"need {d} feature names, got {len(feature_names)}")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(feature_names) + ["group", "label"])
        for i in range(ds.n):
            group = ds.group_name(int(ds.groups[i]))
            writer.writerow(
                [repr(float(v)) for v in ds.features[i]] + [group, int(ds.labels[i])]
            )
    return path


def dataset_manifest(ds: Dataset, provenance: dict | None = None) -> dict:
    """JSON-ready summary: sizes, group names, optional provenance (e.g. seed)."""
    manifest = {
        "n": ds.n,
        "n_features": ds.n_features,
        "n_groups": ds.n_groups,
        "n_classes": ds.n_classes,
        "group_sizes": [int(s) for s in ds.group_sizes()],
        "group_names": list(ds.group_names) if ds.group_names else None,
    }
    if provenance:
        manifest["provenance"] = provenance
    return manifest


def save_manifest(ds: Dataset, path: str | Path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(dataset_manifest(ds, provenance), indent=2), encoding="utf-8")
    return path


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split by (group, label) cell.

    Every cell with at least 2 samples appears on both sides; singleton cells
    go to train with a warning. Cell allocations use largest-remainder
    rounding so the overall train size is round(train_fraction * n) and each
    cell's fraction is preserved within one sample. Deterministic per seed.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n = ds.n
    target_train = int(round(train_fraction * n))

    cells: list[np.ndarray] = []
    keys = ds.groups.astype(np.int64) * (ds.labels.max() + 1) + ds.labels
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        cells.append(idx[rng.permutation(idx.size)])

    raw = [train_fraction * c.size for c in cells]
    takes = [int(math.floor(r)) for r in raw]
    # clamp singleton cells to train before distributing remainders
    for i, c in enumerate(cells):
        if c.size == 1:
            takes[i] = 1
            warnings.warn(
                f"(group,label) cell with 1 sample assigned to train "
                f"(group {ds.groups[c[0]]}, label {ds.labels[c[0]]})",
                stacklevel=2,
            )
    order = np.lexsort(
        (np.arange(len(cells)), -(np.asarray(raw) - np.floor(raw)))
    )
    deficit = target_train - sum(takes)
    for i in order:
        if deficit <= 0:
            break
        if cells[i].size > 1 and takes[i] < cells[i].size - 1:
            takes[i] += 1
            deficit -= 1
    # keep both sides nonempty for every cell of size >= 2
    for i, c in enumerate(cells):
        if c.size >= 2:
            takes[i] = min(max(takes[i], 1), c.size - 1)

    train_idx = np.concatenate([c[: takes[i]] for i, c in enumerate(cells)])
    test_parts = [c[takes[i] :] for i, c in enumerate(cells) if takes[i] < c.size]
    if not test_parts:
        raise ValueError("split left the test side empty; lower train_fraction")
    test_idx = np.concatenate(test_parts)

    # a group whose every cell is tiny can end up absent from test; move one
    # sample over from train so both sides stay valid. Single-sample groups
    # stay in train (already warned above) and drop out of the test side.
    for a in range(ds.n_groups):
        if not np.any(ds.groups[test_idx] == a):
            candidates = train_idx[ds.groups[train_idx] == a]
            if candidates.size < 2:
                continue
            moved = candidates[-1]
            warnings.warn(
                f"moved one sample of group {a} to test to keep the group present",
                stacklevel=2,
            )
            train_idx = train_idx[train_idx != moved]
            test_idx = np.append(test_idx, moved)

    return ds.restrict(np.sort(train_idx)), ds.restrict(np.sort(test_idx))


def upsample_group(ds: Dataset, group_id: int, factor: int, seed: int = 0) -> Dataset:
    """Duplicate one group's samples `factor` times; other groups untouched.

    The result is shuffled with the given seed, except for factor 1 which
    returns the dataset unchanged (so baselines stay byte-comparable).
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    idx = ds.group_indices(group_id)  # validates the id
    if factor == 1:
        return ds
    rest = np.flatnonzero(ds.groups != group_id)
    rows = np.concatenate([rest, np.tile(idx, factor)])
    rng = np.random.default_rng(seed)
    rows = rows[rng.permutation(rows.size)]
    return ds.restrict(rows)
