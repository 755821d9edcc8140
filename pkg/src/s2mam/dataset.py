"""Semi-supervised datasets: CSV ingestion, synthetic generators, corruption and splits.

Labeled rows always come first in a :class:`SemiDataset`; the true labels of
unlabeled rows, when known (synthetic data, ``split_labels``), are carried in
``y_hidden`` so transductive accuracy can be scored.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .rng import make_rng

TASKS = ("regression", "classification")
FEATURE_TAGS = ("informative", "uninformative", "noisy", "unknown")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SemiDataset:
    """``n = l + u`` rows of features, the first ``l`` of them labeled."""

    X: np.ndarray
    y: np.ndarray
    task: str = "classification"
    feature_tags: tuple = ()
    y_hidden: Optional[np.ndarray] = None
    feature_names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValidationError(f"X must be 2-D, got shape {X.shape}")
        n, p = X.shape
        if p < 1:
            raise ValidationError("dataset needs at least one feature column")
        if not np.all(np.isfinite(X)):
            raise ValidationError("X contains NaN or infinite entries")
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if y.size < 1:
            raise ValidationError("dataset needs at least one labeled row")
        if y.size > n:
            raise ValidationError(f"{y.size} labels for {n} rows")
        if not np.all(np.isfinite(y)):
            raise ValidationError("labels contain NaN or infinite entries")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.task == "classification" and not np.all(np.isin(y, (0.0, 1.0))):
            raise ValidationError("classification labels must be 0 or 1")
        tags = tuple(self.feature_tags) or ("unknown",) * p
        if len(tags) != p:
            raise ValidationError(f"{len(tags)} feature tags for {p} columns")
        bad = set(tags) - set(FEATURE_TAGS)
        if bad:
            raise ValidationError(f"unknown feature tags {sorted(bad)}")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValidationError(f"{len(names)} feature names for {p} columns")
        hidden = self.y_hidden
        if hidden is not None:
            hidden = np.asarray(hidden, dtype=np.float64).ravel()
            if hidden.size != n - y.size:
                raise ValidationError("y_hidden must hold one label per unlabeled row")
            hidden = _frozen(hidden)
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "feature_tags", tags)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "y_hidden", hidden)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def l(self) -> int:  # noqa: E743
        return self.y.size

    @property
    def u(self) -> int:
        return self.n - self.l

    @property
    def X_labeled(self) -> np.ndarray:
        return self.X[: self.l]

    @property
    def X_unlabeled(self) -> np.ndarray:
        return self.X[self.l:]

    @property
    def informative(self) -> tuple:
        return tuple(j for j, t in enumerate(self.feature_tags) if t == "informative")

    @property
    def fully_labeled(self) -> bool:
        return self.u == 0

    def with_all_labels(self) -> "SemiDataset":
        """Reveal ``y_hidden`` so every row is labeled."""
        if self.u == 0:
            return self
        if self.y_hidden is None:
            raise ValidationError("unlabeled rows have no hidden labels to reveal")
        return replace(self, y=np.concatenate([self.y, self.y_hidden]), y_hidden=None)


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, label_column: str = "label", task: str = "classification") -> SemiDataset:
    """Read a CSV with one label column; an empty label cell marks an unlabeled row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file, header row expected") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValidationError(f"{path}: no {label_column!r} column in header")
        label_idx = header.index(label_column)
        feat_idx = [i for i in range(len(header)) if i != label_idx]
        names = tuple(header[i] for i in feat_idx)

        lab_rows, lab_y, unl_rows = [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}:{rownum}: expected {len(header)} cells, got {len(row)}", row=rownum
                )
            values = [_parse_cell(row[i], path, rownum, header[i]) for i in feat_idx]
            cell = row[label_idx].strip()
            if cell:
                lab_rows.append(values)
                lab_y.append(_parse_cell(cell, path, rownum, label_column))
            else:
                unl_rows.append(values)

    if not lab_rows:
        raise ValidationError(f"{path}: no labeled rows")
    X = np.array(lab_rows + unl_rows, dtype=np.float64).reshape(-1, len(feat_idx))
    return SemiDataset(X=X, y=np.array(lab_y), task=task, feature_names=names)


def _parse_cell(cell: str, path, row: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(
            f"{path}:{row}: cannot parse {cell!r} in column {column!r} as a number",
            row=row,
            column=column,
        ) from None
    if not math.isfinite(v):
        raise ParseError(f"{path}:{row}: non-finite value in column {column!r}", row=row, column=column)
    return v


def load_features_csv(path, label_column: str = "label") -> np.ndarray:
    """Feature matrix of a CSV, ignoring the label column if present."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        keep = [i for i, h in enumerate(header) if h != label_column]
        rows = []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            rows.append([_parse_cell(row[i], path, rownum, header[i]) for i in keep])
    return np.array(rows, dtype=np.float64).reshape(-1, len(keep))


def save_csv(ds: SemiDataset, path, label_column: str = "label", reveal_hidden: bool = False) -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces X and y bit for bit."""
    labels = list(ds.y)
    if reveal_hidden and ds.y_hidden is not None:
        labels += list(ds.y_hidden)
    labels += [None] * (ds.n - len(labels))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.feature_names) + [label_column])
        for row, lab in zip(ds.X, labels):
            w.writerow([repr(float(v)) for v in row] + ["" if lab is None else repr(float(lab))])


# ---------------------------------------------------------------------------
# synthetic data


def additive_discriminant(X: np.ndarray) -> np.ndarray:
    """(x1 - 0.5)^2 + (x2 - 0.5)^2 - 0.08 evaluated row-wise."""
    X = np.asarray(X, dtype=np.float64)
    return (X[:, 0] - 0.5) ** 2 + (X[:, 1] - 0.5) ** 2 - 0.08


def _additive_inputs(n: int, p: int, seed: int) -> np.ndarray:
    if n < 2:
        raise ValidationError("need n >= 2 samples")
    if p < 2:
        raise ValidationError("the additive discriminant needs p >= 2 coordinates")
    rng = make_rng(seed)
    W = rng.uniform(0.0, 1.0, size=(n, p))
    U = rng.uniform(0.0, 1.0, size=(n, 1))
    return (W + U) / 2.0


def gen_additive_synthetic(n: int = 200, p: int = 100, seed: int = 0) -> SemiDataset:
    """Fully labeled classification data; only features 1 and 2 are informative.

    Entries are ``(W_ij + U_i) / 2`` with ``W, U ~ U(0, 1)``, and ``y = 1`` exactly
    when :func:`additive_discriminant` is positive.
    """
    X = _additive_inputs(n, p, seed)
    y = (additive_discriminant(X) > 0).astype(np.float64)
    tags = ("informative",) * 2 + ("uninformative",) * (p - 2)
    return SemiDataset(X=X, y=y, task="classification", feature_tags=tags)


def gen_additive_regression(n: int = 200, p: int = 100, noise_sd: float = 0.02, seed: int = 0) -> SemiDataset:
    """Regression twin of :func:`gen_additive_synthetic`: y = discriminant + N(0, noise_sd^2)."""
    X = _additive_inputs(n, p, seed)
    rng = make_rng(seed, "regression-noise")
    y = additive_discriminant(X) + noise_sd * rng.standard_normal(n)
    tags = ("informative",) * 2 + ("uninformative",) * (p - 2)
    return SemiDataset(X=X, y=y, task="regression", feature_tags=tags)


def gen_moons(n_per_class: int = 100, labeled_per_class: int = 1, noise_sd: float = 0.1,
              seed: int = 0) -> SemiDataset:
    """Two interleaving half circles with Gaussian jitter.

    Class 0 lies on ``(cos t, sin t)`` and class 1 on ``(1 - cos t, 0.5 - sin t)``
    for ``t`` evenly spaced on ``[0, pi]``.
    """
    if labeled_per_class < 1:
        raise ValidationError("need at least one labeled point per class")
    if n_per_class < labeled_per_class:
        raise ValidationError("n_per_class must be >= labeled_per_class")
    if noise_sd < 0:
        raise ValidationError("noise_sd must be non-negative")
    rng = make_rng(seed)
    t = np.linspace(0.0, np.pi, n_per_class)
    arcs = [
        np.column_stack([np.cos(t), np.sin(t)]),
        np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]),
    ]
    lab_X, lab_y, unl_X, unl_y = [], [], [], []
    for cls, pts in enumerate(arcs):
        pts = pts + noise_sd * rng.standard_normal(pts.shape)
        chosen = np.zeros(n_per_class, dtype=bool)
        chosen[rng.choice(n_per_class, size=labeled_per_class, replace=False)] = True
        lab_X.append(pts[chosen])
        unl_X.append(pts[~chosen])
        lab_y += [cls] * labeled_per_class
        unl_y += [cls] * (n_per_class - labeled_per_class)
    X = np.vstack(lab_X + unl_X)
    return SemiDataset(
        X=X,
        y=np.array(lab_y, dtype=np.float64),
        task="classification",
        feature_tags=("informative", "informative"),
        y_hidden=np.array(unl_y, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# corruption, scaling, splitting


def inject_corruption(ds: SemiDataset, p_u: int = 0, p_n: int = 0, seed: int = 0,
                      noisy_mean: float = 100.0, noisy_spread: float = 100.0,
                      spread_is_std: bool = False) -> SemiDataset:
    """Append ``p_u`` N(0, 1) columns and ``p_n`` noisy N(100, 100) columns.

    ``noisy_spread`` is a variance unless ``spread_is_std`` is set.
    """
    if p_u < 0 or p_n < 0:
        raise ValidationError("corruption counts must be non-negative")
    if p_u == 0 and p_n == 0:
        return ds
    rng = make_rng(seed, "corruption")
    sd = noisy_spread if spread_is_std else math.sqrt(noisy_spread)
    extra = np.hstack([
        rng.standard_normal((ds.n, p_u)),
        noisy_mean + sd * rng.standard_normal((ds.n, p_n)),
    ])
    names = tuple(f"u{k + 1}" for k in range(p_u)) + tuple(f"n{k + 1}" for k in range(p_n))
    return replace(
        ds,
        X=np.hstack([ds.X, extra]),
        feature_tags=ds.feature_tags + ("uninformative",) * p_u + ("noisy",) * p_n,
        feature_names=ds.feature_names + names,
    )


@dataclass(frozen=True)
class MinMaxScaler:
    lo: np.ndarray
    span: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "MinMaxScaler":
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return cls(lo=lo, span=span)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.lo) / self.span


def minmax_scale(train: SemiDataset, *others: SemiDataset):
    """Scale every column to [0, 1] using the training ranges; returns a tuple of datasets."""
    scaler = MinMaxScaler.fit(train.X)
    return tuple(replace(d, X=scaler.transform(d.X)) for d in (train,) + others)


@dataclass(frozen=True)
class SplitSpec:
    label_ratio: float = 0.05
    test_fraction: float = 0.5
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.label_ratio <= 1.0:
            raise ValidationError("label_ratio must lie in (0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValidationError("test_fraction must lie in [0, 1)")


def labeled_count(ratio: float, size: int) -> int:
    """ceil(ratio * size), at least 1; tolerant of float noise such as 0.05 * 60."""
    if size <= 0:
        return 0
    return min(size, max(1, math.ceil(ratio * size - 1e-9)))


def split_labels(ds: SemiDataset, spec: SplitSpec):
    """Hold out a labeled test set and hide most training labels.

    Returns ``(train, test)``. ``train`` keeps ``ceil(r * class_size)`` labels per
    class (stratified) with the rest moved to the unlabeled pool; their true labels
    stay in ``train.y_hidden``.
    """
    if not ds.fully_labeled:
        raise ValidationError("split_labels needs a fully labeled dataset")
    rng = make_rng(spec.seed, "split")
    order = rng.permutation(ds.n)
    n_test = int(round(spec.test_fraction * ds.n))
    if ds.n - n_test < 1:
        raise ValidationError("test_fraction leaves no training rows")
    test_idx, train_idx = order[:n_test], order[n_test:]
    y_train = ds.y[train_idx]

    stratify = spec.stratified and ds.task == "classification"
    if stratify:
        for cls in np.unique(ds.y):
            if not np.any(y_train == cls):
                raise ValidationError(f"class {cls:g} absent from the training split")
        chosen = []
        for cls in np.unique(y_train):
            members = train_idx[y_train == cls]
            k = labeled_count(spec.label_ratio, members.size)
            chosen.append(rng.choice(members, size=k, replace=False))
        labeled = np.concatenate(chosen)
    else:
        k = labeled_count(spec.label_ratio, train_idx.size)
        labeled = rng.choice(train_idx, size=k, replace=False)
    labeled = train_idx[np.isin(train_idx, labeled)]
    unlabeled = train_idx[~np.isin(train_idx, labeled)]

    train = replace(
        ds,
        X=np.vstack([ds.X[labeled], ds.X[unlabeled]]),
        y=ds.y[labeled],
        y_hidden=ds.y[unlabeled],
    )
    test = replace(ds, X=ds.X[test_idx], y=ds.y[test_idx], y_hidden=None) if n_test else None
    return train, test
