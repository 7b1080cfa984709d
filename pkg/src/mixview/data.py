"""Multi-view datasets: CSV ingestion, stratified fold planning with an inner
validation carve, leakage-free standardization, and a synthetic generator
with per-sample ground-truth informative views.

A dataset is a list of MultiViewSample; helpers convert to stacked arrays for
training. Labels are 0-based class indices into ViewSchema.class_names.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ConfigError


class IngestionError(ValueError):
    """CSV rows or headers that cannot be parsed; message lists every line."""


@dataclass(frozen=True)
class ViewSchema:
    view_names: tuple[str, ...]
    view_dims: tuple[int, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.view_names) != len(self.view_dims):
            raise ConfigError("view_names and view_dims lengths differ")
        if len(self.class_names) < 2:
            raise ConfigError("need at least 2 classes")
        if any(d < 1 for d in self.view_dims):
            raise ConfigError("view dims must be positive")

    @property
    def n_views(self) -> int:
        return len(self.view_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def total_dim(self) -> int:
        return int(sum(self.view_dims))


@dataclass
class MultiViewSample:
    id: str
    views: list[np.ndarray]
    label: int
    informative_view: int | None = None
    group: str | None = None


@dataclass(frozen=True)
class FoldPlan:
    k_folds: int
    assignments: np.ndarray  # per-sample fold index
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def to_json(self, samples: list[MultiViewSample]) -> str:
        return json.dumps(
            {
                "k_folds": self.k_folds,
                "seed": self.seed,
                "folds": {s.id: int(f) for s, f in zip(samples, self.assignments)},
            },
            indent=2,
        )


@dataclass(frozen=True)
class StandardizationStats:
    means: tuple[np.ndarray, ...]  # per view
    stds: tuple[np.ndarray, ...]   # floored at 1e-8


@dataclass(frozen=True)
class SyntheticConfig:
    n_samples: int
    view_dims: tuple[int, ...]
    separation: float          # Mahalanobis-style distance between class means
    informative_prior: tuple[float, ...]
    noise_std: float = 1.0     # scale of the informative view (others are unit)
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.informative_prior) - 1.0) > 1e-9:
            raise ConfigError("informative_prior must sum to 1")
        if len(self.informative_prior) != len(self.view_dims):
            raise ConfigError("informative_prior length must equal view count")
        if self.separation < 0:
            raise ConfigError("separation must be non-negative")

    def schema(self) -> ViewSchema:
        m = len(self.view_dims)
        return ViewSchema(
            view_names=tuple(f"v{i}" for i in range(m)),
            view_dims=tuple(self.view_dims),
            class_names=tuple(f"c{j}" for j in range(self.n_classes)),
        )


def to_batch(samples: list[MultiViewSample]) -> tuple[list[np.ndarray], np.ndarray]:
    """Stack a dataset into per-view matrices plus a label vector."""
    if not samples:
        raise ConfigError("empty dataset")
    m = len(samples[0].views)
    views = [np.stack([s.views[i] for s in samples]) for i in range(m)]
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return views, labels


def subset(samples: list[MultiViewSample], indices) -> list[MultiViewSample]:
    return [samples[int(i)] for i in indices]


# ---------------------------------------------------------------------------
# CSV ingestion. Column convention: <view_name>_f<j> feature columns (j from
# 0), a mandatory `label` column, optional `id` and `group` columns. The view
# partition is recoverable from the header alone.
# ---------------------------------------------------------------------------

def schema_from_header(header: list[str], class_names: tuple[str, ...]) -> ViewSchema:
    views: dict[str, int] = {}
    for col in header:
        if col in ("label", "id", "group", "informative_view"):
            continue
        if "_f" not in col:
            raise IngestionError(f"unrecognized column {col!r} (expected <view>_f<j>)")
        name, _, idx = col.rpartition("_f")
        try:
            j = int(idx)
        except ValueError:
            raise IngestionError(f"unrecognized column {col!r} (expected <view>_f<j>)")
        views[name] = max(views.get(name, 0), j + 1)
    if not views:
        raise IngestionError("no feature columns found")
    names = tuple(views)
    return ViewSchema(names, tuple(views[n] for n in names), class_names)


def load_csv(path, schema: ViewSchema | None = None,
             class_names: tuple[str, ...] | None = None) -> tuple[list[MultiViewSample], ViewSchema]:
    """Parse a dataset CSV. If ``schema`` is None it is inferred from the
    header; ``class_names`` then defaults to the sorted distinct labels.
    Malformed rows are collected and reported together with line numbers.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError(f"{path}: empty file")
        header = list(reader.fieldnames)
        rows = list(reader)

    if "label" not in header:
        raise IngestionError(f"{path}: missing required column 'label'")

    if schema is None and class_names is None:
        class_names = tuple(sorted({r["label"] for r in rows}))
    if schema is None:
        schema = schema_from_header(header, class_names)

    feature_cols = [
        [f"{name}_f{j}" for j in range(dim)]
        for name, dim in zip(schema.view_names, schema.view_dims)
    ]
    missing = [c for cols in feature_cols for c in cols if c not in header]
    if missing:
        raise IngestionError(f"{path}: missing columns {missing}")

    label_index = {name: i for i, name in enumerate(schema.class_names)}
    samples: list[MultiViewSample] = []
    errors: list[str] = []
    for lineno, row in enumerate(rows, start=2):
        label = row.get("label")
        if label not in label_index:
            errors.append(f"line {lineno}: unknown label {label!r}")
            continue
        views = []
        bad = False
        for cols in feature_cols:
            vals = np.empty(len(cols))
            for j, c in enumerate(cols):
                try:
                    vals[j] = float(row[c])
                except (TypeError, ValueError):
                    errors.append(f"line {lineno}: non-numeric value in {c}: {row[c]!r}")
                    bad = True
            views.append(vals)
        if bad:
            continue
        iv = row.get("informative_view")
        samples.append(
            MultiViewSample(
                id=row.get("id") or str(lineno - 2),
                views=views,
                label=label_index[label],
                informative_view=int(iv) if iv not in (None, "") else None,
                group=row.get("group") or None,
            )
        )
    if errors:
        raise IngestionError(f"{path}: " + "; ".join(errors))
    return samples, schema


def save_csv(path, samples: list[MultiViewSample], schema: ViewSchema) -> None:
    """Write a dataset using repr() floats so a read-back is exact."""
    path = Path(path)
    header = ["id"]
    for name, dim in zip(schema.view_names, schema.view_dims):
        header += [f"{name}_f{j}" for j in range(dim)]
    header.append("label")
    has_group = any(s.group is not None for s in samples)
    has_iv = any(s.informative_view is not None for s in samples)
    if has_group:
        header.append("group")
    if has_iv:
        header.append("informative_view")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in samples:
            row = [s.id]
            for v in s.views:
                row += [repr(float(x)) for x in v]
            row.append(schema.class_names[s.label])
            if has_group:
                row.append(s.group if s.group is not None else "")
            if has_iv:
                row.append("" if s.informative_view is None else s.informative_view)
            w.writerow(row)


# ---------------------------------------------------------------------------
# Fold planning
# ---------------------------------------------------------------------------

def stratified_kfold(samples: list[MultiViewSample], k_folds: int, seed: int) -> FoldPlan:
    """Per-class shuffle under the seed, then round-robin fold assignment.

    The folds partition the dataset and per-fold class counts differ from
    exact proportionality by at most one sample per class.
    """
    if k_folds < 2:
        raise ConfigError("k_folds must be >= 2")
    labels = np.array([s.label for s in samples])
    rng = np.random.default_rng(seed)
    assignments = np.full(len(samples), -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k_folds:
            raise ConfigError(
                f"class {cls} has {len(idx)} samples, fewer than k_folds={k_folds}"
            )
        rng.shuffle(idx)
        assignments[idx] = np.arange(len(idx)) % k_folds
    return FoldPlan(k_folds=k_folds, assignments=assignments, seed=seed)


def carve_validation(
    samples: list[MultiViewSample], train_indices, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split of training indices into (inner-train, validation).

    Validation size is round(fraction * n), distributed across classes by
    largest remainder, with at least one validation sample per class that has
    two or more training samples. A singleton class stays in inner-train.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must be in (0,1)")
    train_indices = np.asarray(train_indices)
    labels = np.array([samples[int(i)].label for i in train_indices])
    classes = np.unique(labels)
    n = len(train_indices)
    target = int(round(fraction * n))

    counts = {c: int((labels == c).sum()) for c in classes}
    quota = {c: fraction * counts[c] for c in classes}
    take = {c: int(np.floor(quota[c])) for c in classes}
    for c in classes:
        if counts[c] >= 2:
            take[c] = max(take[c], 1)
        take[c] = min(take[c], counts[c] - 1)
    # largest-remainder top-up toward the global target
    remainder_order = sorted(classes, key=lambda c: quota[c] - np.floor(quota[c]), reverse=True)
    i = 0
    while sum(take.values()) < target and i < 10 * len(classes):
        c = remainder_order[i % len(classes)]
        if take[c] < counts[c] - 1:
            take[c] += 1
        i += 1
    if sum(take.values()) == 0:
        raise ConfigError("cannot carve a validation set: every class is a singleton")

    rng = np.random.default_rng(seed)
    val, inner = [], []
    for c in classes:
        idx = train_indices[labels == c].copy()
        rng.shuffle(idx)
        val.extend(idx[: take[c]])
        inner.extend(idx[take[c]:])
    return np.sort(np.array(inner, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


# ---------------------------------------------------------------------------
# Standardization (fit on training indices only; apply anywhere)
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-8


def fit_standardizer(samples: list[MultiViewSample]) -> StandardizationStats:
    views, _ = to_batch(samples)
    means = tuple(v.mean(axis=0) for v in views)
    stds = tuple(np.maximum(v.std(axis=0), STD_FLOOR) for v in views)
    return StandardizationStats(means=means, stds=stds)


def apply_standardizer(
    stats: StandardizationStats, samples: list[MultiViewSample]
) -> list[MultiViewSample]:
    out = []
    for s in samples:
        views = [(v - m) / sd for v, m, sd in zip(s.views, stats.means, stats.stds)]
        out.append(
            MultiViewSample(s.id, views, s.label, s.informative_view, s.group)
        )
    return out


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def generate_synthetic(config: SyntheticConfig, seed: int | None = None) -> list[MultiViewSample]:
    """Per sample: draw a label uniformly and an informative view from the
    prior. The informative view's features are drawn around a class-dependent
    mean (+/- separation/2 along a fixed unit direction, scaled by noise_std)
    with noise_std spread; every other view is class-independent standard
    normal. The drawn view index is recorded as ground truth.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    m = len(config.view_dims)
    k = config.n_classes
    dirs = [np.ones(d) / np.sqrt(d) for d in config.view_dims]
    # class offsets along the unit direction: symmetric around 0
    offsets = (np.arange(k) - (k - 1) / 2.0) * config.separation
    samples = []
    for t in range(config.n_samples):
        label = int(rng.integers(k))
        z = int(rng.choice(m, p=config.informative_prior))
        views = []
        for i, d in enumerate(config.view_dims):
            if i == z:
                mean = offsets[label] * config.noise_std * dirs[i]
                x = mean + config.noise_std * rng.standard_normal(d)
            else:
                x = rng.standard_normal(d)
            views.append(x)
        samples.append(
            MultiViewSample(id=str(t), views=views, label=label, informative_view=z)
        )
    return samples
