"""Repeated-trial experiment harness: data generation, tuning, fitting, scoring, reports."""
from __future__ import annotations

import csv
import itertools
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import (
    SemiDataset, SplitSpec, gen_additive_regression, gen_additive_synthetic, gen_moons,
    inject_corruption, load_csv, split_labels,
)
from .errors import S2MAMError, ValidationError
from .model import FITTERS, decision_function, fit_basic, predict, selected_variables
from .params import LAMBDA_GRID, MU_GRID, HyperParams
from .rng import derive_seed

WORKERS_ENV = "S2MAM_WORKERS"
DEFAULT_GRID = {"lambda1": list(LAMBDA_GRID), "lambda2": list(LAMBDA_GRID), "mu": list(MU_GRID)}


# ---------------------------------------------------------------------------
# metrics


def score(predictions, truth, task: str) -> dict:
    """Accuracy for classification, MSE and RMSE for regression."""
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise ValidationError(f"{pred.size} predictions for {truth.size} targets")
    if pred.size == 0:
        raise ValidationError("cannot score an empty prediction vector")
    if task == "classification":
        return {"accuracy": float(np.mean(pred == truth))}
    if task == "regression":
        mse = float(np.mean((pred - truth) ** 2))
        return {"mse": mse, "rmse": math.sqrt(mse)}
    raise ValidationError(f"unknown task {task!r}")


def primary_metric(task: str) -> str:
    return "accuracy" if task == "classification" else "mse"


def mask_quality(s, informative: Sequence[int], threshold: float = 0.5) -> tuple:
    """Precision and recall of the selected variables; an empty selection has precision 1."""
    informative = {int(j) for j in informative}
    if not informative:
        raise ValidationError("mask quality needs a non-empty informative set")
    selected = set(selected_variables(np.asarray(s, dtype=np.float64), threshold))
    hits = len(selected & informative)
    precision = hits / len(selected) if selected else 1.0
    return precision, hits / len(informative)


# ---------------------------------------------------------------------------
# LOOCV tuning


def _grid_cells(grid: dict) -> list:
    if not grid:
        return [{}]
    for k, v in grid.items():
        if len(v) == 0:
            raise ValidationError(f"grid for {k!r} is empty")
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _move_to_unlabeled(ds: SemiDataset, held: np.ndarray) -> SemiDataset:
    """Copy of ``ds`` whose labeled rows ``held`` join the front of the unlabeled pool."""
    keep = np.setdiff1d(np.arange(ds.l), held)
    order = np.concatenate([keep, held, np.arange(ds.l, ds.n)])
    hidden = ds.y[held]
    if ds.y_hidden is not None:
        hidden = np.concatenate([hidden, ds.y_hidden])
    elif ds.u > 0:
        hidden = None
    return SemiDataset(ds.X[order], ds.y[keep], task=ds.task, feature_tags=ds.feature_tags,
                       y_hidden=hidden, feature_names=ds.feature_names)


def _held_out_loss(scores, y, loss: str) -> np.ndarray:
    if loss == "logistic":
        return np.logaddexp(0.0, -(2.0 * y - 1.0) * scores)
    return (scores - y) ** 2


def cv_losses(ds: SemiDataset, hp: HyperParams, folds: Optional[int] = None, seed: int = 0) -> float:
    """Mean held-out loss of :func:`fit_basic`; leave-one-out unless ``folds`` is given."""
    if folds is None:
        groups = [np.array([i]) for i in range(ds.l)]
    else:
        if folds < 2 or folds > ds.l:
            raise ValidationError(f"need 2 <= folds <= l={ds.l}")
        perm = np.random.default_rng(derive_seed(seed, "folds")).permutation(ds.l)
        groups = [np.sort(g) for g in np.array_split(perm, folds)]
    loss = hp.resolve_loss(ds.task)
    total = 0.0
    for held in groups:
        model = fit_basic(_move_to_unlabeled(ds, held), hp)
        total += float(np.sum(_held_out_loss(decision_function(model, ds.X[held]), ds.y[held], loss)))
    return total / ds.l


def zero_predictor_loss(ds: SemiDataset, hp: HyperParams) -> float:
    return float(np.mean(_held_out_loss(np.zeros(ds.l), ds.y, hp.resolve_loss(ds.task))))


def loocv_tune(ds: SemiDataset, grid: Optional[dict] = None, base: Optional[HyperParams] = None,
               folds: Optional[int] = None, seed: int = 0, return_scores: bool = False):
    """Pick the grid cell with the smallest leave-one-labeled-out loss.

    Ties go to the larger ``lambda1``, then the larger ``lambda2``, then the
    earlier cell. With fewer than two labeled rows the midpoint of each grid
    axis is returned with a warning.
    """
    base = base or HyperParams()
    grid = DEFAULT_GRID if grid is None else grid
    cells = _grid_cells(grid)
    if ds.l < 2:
        warnings.warn("fewer than two labeled rows; using grid midpoints", RuntimeWarning, stacklevel=2)
        mid = {k: v[len(v) // 2] for k, v in grid.items()}
        return (base.replace(**mid), []) if return_scores else base.replace(**mid)
    scores = [cv_losses(ds, base.replace(**cell), folds, seed) for cell in cells]
    best = min(scores)
    tol = 1e-12 * max(1.0, abs(best))
    tied = [i for i, v in enumerate(scores) if v <= best + tol]

    def key(i):
        hp = base.replace(**cells[i])
        return (-hp.lambda1, -hp.lambda2, i)

    chosen = base.replace(**cells[min(tied, key=key)])
    return (chosen, list(zip(cells, scores))) if return_scores else chosen


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetSpec:
    kind: str = "additive"  # additive | regression | moons | csv
    n: int = 200
    p: int = 100
    noise_sd: Optional[float] = None
    n_per_class: int = 100
    labeled_per_class: int = 1
    path: Optional[str] = None
    label_column: str = "label"
    task: str = "classification"

    def __post_init__(self):
        if self.kind not in ("additive", "regression", "moons", "csv"):
            raise ValidationError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ValidationError("csv datasets need a path")

    def generate(self, seed: int) -> SemiDataset:
        if self.kind == "additive":
            return gen_additive_synthetic(self.n, self.p, seed)
        if self.kind == "regression":
            kw = {} if self.noise_sd is None else {"noise_sd": self.noise_sd}
            return gen_additive_regression(self.n, self.p, seed=seed, **kw)
        if self.kind == "moons":
            kw = {} if self.noise_sd is None else {"noise_sd": self.noise_sd}
            return gen_moons(self.n_per_class, self.labeled_per_class, seed=seed, **kw)
        return load_csv(self.path, self.label_column, self.task)

    @property
    def presplit(self) -> bool:
        """Moons and CSV data already carry their labeled/unlabeled partition."""
        return self.kind in ("moons", "csv")


@dataclass
class Corruption:
    p_u: int = 0
    p_n: int = 0

    def __post_init__(self):
        if self.p_u < 0 or self.p_n < 0:
            raise ValidationError("corruption counts must be non-negative")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    corruption: list = field(default_factory=lambda: [Corruption()])
    split: SplitSpec = field(default_factory=SplitSpec)
    variants: tuple = ("s2mam", "basic")
    hyperparams: HyperParams = field(default_factory=HyperParams)
    grid: dict = field(default_factory=dict)  # empty: no tuning
    cv_folds: Optional[int] = None
    repeats: int = 1
    seed_base: int = 0
    output: Optional[str] = None
    workers: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        if isinstance(self.corruption, (dict, Corruption)):
            self.corruption = [self.corruption]
        self.corruption = [c if isinstance(c, Corruption) else Corruption(**c) for c in self.corruption]
        if isinstance(self.split, dict):
            self.split = SplitSpec(**self.split)
        if isinstance(self.hyperparams, dict):
            self.hyperparams = HyperParams.from_dict(self.hyperparams)
        self.variants = tuple(self.variants)
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1")
        if not self.variants or not self.corruption:
            raise ValidationError("need at least one variant and one corruption setting")
        unknown = set(self.variants) - set(FITTERS)
        if unknown:
            raise ValidationError(f"unknown variants {sorted(unknown)}")
        _grid_cells(self.grid)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {"dataset", "corruption", "split", "variants", "hyperparams", "grid", "cv_folds",
                 "repeats", "seed_base", "output", "workers"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "corruption": [asdict(c) for c in self.corruption],
            "split": asdict(self.split),
            "variants": list(self.variants),
            "hyperparams": self.hyperparams.to_dict(),
            "grid": {k: list(v) for k, v in self.grid.items()},
            "cv_folds": self.cv_folds,
            "repeats": self.repeats,
            "seed_base": self.seed_base,
            "output": self.output,
            "workers": self.workers,
        }


def load_config(path) -> dict:
    """Read a JSON or YAML document into a plain dict."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a key-value document")
    return data


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON when possible."""
    out = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# running


@dataclass
class CellSummary:
    variant: str
    p_u: int
    p_n: int
    metric: str
    count: int
    failures: int
    unlabeled_mean: Optional[float]
    unlabeled_sd: Optional[float]
    test_mean: Optional[float]
    test_sd: Optional[float]
    precision_mean: Optional[float]
    recall_mean: Optional[float]


def _mean_sd(values) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


@dataclass
class ResultTable:
    """Per-cell aggregates plus the per-repeat records they were computed from.

    Wall times live in ``timings`` and are written to a separate file, so the
    JSON and CSV reports are byte-identical across reruns.
    """

    cells: list
    records: list
    config: dict = field(default_factory=dict)
    timings: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list, config: Optional[dict] = None) -> "ResultTable":
        order = (lambda r: (r["p_u"], r["p_n"], r["variant"], r["repeat"]))
        timings = sorted(({k: r[k] for k in ("variant", "p_u", "p_n", "repeat", "wall_s")}
                          for r in records if "wall_s" in r), key=order)
        records = sorted(({k: v for k, v in r.items() if k != "wall_s"} for r in records), key=order)
        cells = []
        keys = sorted({(r["p_u"], r["p_n"], r["variant"]) for r in records})
        for p_u, p_n, variant in keys:
            rs = [r for r in records if (r["p_u"], r["p_n"], r["variant"]) == (p_u, p_n, variant)]
            ok = [r for r in rs if r["status"] == "ok"]
            metric = ok[0]["metric"] if ok else rs[0]["metric"]
            um, us = _mean_sd(r["unlabeled"] for r in ok)
            tm, ts = _mean_sd(r["test"] for r in ok)
            pm, _ = _mean_sd(r["precision"] for r in ok)
            rm, _ = _mean_sd(r["recall"] for r in ok)
            cells.append(CellSummary(variant, p_u, p_n, metric, len(ok), len(rs) - len(ok),
                                     um, us, tm, ts, pm, rm))
        return cls(cells=cells, records=records, config=config or {}, timings=timings)

    def cell(self, variant: str, p_u: int = 0, p_n: int = 0) -> CellSummary:
        for c in self.cells:
            if (c.variant, c.p_u, c.p_n) == (variant, p_u, p_n):
                return c
        raise KeyError((variant, p_u, p_n))

    def wall_s_mean(self, variant: str, p_u: int = 0, p_n: int = 0) -> Optional[float]:
        vals = [t["wall_s"] for t in self.timings if (t["variant"], t["p_u"], t["p_n"]) == (variant, p_u, p_n)]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {"config": self.config, "cells": [asdict(c) for c in self.cells], "records": self.records}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def to_csv(self, path) -> None:
        cols = [f.name for f in CellSummary.__dataclass_fields__.values()]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for c in self.cells:
                w.writerow(["" if getattr(c, k) is None else getattr(c, k) for k in cols])


def _repeat_data(config: ExperimentConfig, corruption: Corruption, repeat: int):
    seed = derive_seed(config.seed_base, "repeat", repeat)
    ds = config.dataset.generate(derive_seed(seed, "data"))
    ds = inject_corruption(ds, corruption.p_u, corruption.p_n, seed=derive_seed(seed, "corruption"))
    if config.dataset.presplit:
        return seed, ds, None
    spec = SplitSpec(config.split.label_ratio, config.split.test_fraction, config.split.stratified,
                     derive_seed(seed, "split"))
    train, test = split_labels(ds, spec)
    return seed, train, test


def run_repeat(config: ExperimentConfig, corruption: Corruption, repeat: int) -> list:
    """Records for every variant of one repeat; failures are recorded, not raised."""
    seed, train, test = _repeat_data(config, corruption, repeat)
    hp = config.hyperparams
    if config.grid:
        hp = loocv_tune(train, config.grid, hp, folds=config.cv_folds, seed=seed)
    metric = primary_metric(train.task)
    records = []
    for variant in config.variants:
        rec = {"repeat": repeat, "seed": seed, "variant": variant, "p_u": corruption.p_u,
               "p_n": corruption.p_n, "metric": metric, "status": "ok", "unlabeled": None,
               "test": None, "precision": None, "recall": None, "wall_s": None, "s": None,
               "hyperparams": {"lambda1": hp.lambda1, "lambda2": hp.lambda2, "mu": hp.mu}}
        t0 = time.perf_counter()
        try:
            model = FITTERS[variant](train, hp, seed)
            if train.y_hidden is not None and train.u > 0:
                rec["unlabeled"] = score(predict(model, train.X_unlabeled), train.y_hidden, train.task)[metric]
            if test is not None:
                rec["test"] = score(predict(model, test.X), test.y, test.task)[metric]
            if train.informative and variant.startswith("s2mam"):
                rec["precision"], rec["recall"] = mask_quality(model.s, train.informative)
            rec["s"] = [float(v) for v in model.s]
        except S2MAMError as exc:
            rec["status"] = f"failed: {type(exc).__name__}: {exc}"
        rec["wall_s"] = time.perf_counter() - t0
        records.append(rec)
    return records


def _worker_count(config: ExperimentConfig) -> int:
    if config.workers is not None:
        return max(1, int(config.workers))
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError as exc:
        raise ValidationError(f"{WORKERS_ENV} must be an integer") from exc


def run_experiment(config: ExperimentConfig) -> ResultTable:
    """Run every (corruption, repeat) job, aggregate per variant and corruption cell, write reports."""
    jobs = [(c, r) for c in config.corruption for r in range(config.repeats)]
    workers = min(_worker_count(config), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_repeat, [config] * len(jobs), *zip(*jobs)))
    else:
        parts = [run_repeat(config, c, r) for c, r in jobs]
    records = [rec for part in parts for rec in part]
    table = ResultTable.from_records(records, config.to_dict())
    failures = sum(c.failures for c in table.cells)
    if failures:
        warnings.warn(f"{failures} fits failed and were excluded from the aggregates", RuntimeWarning,
                      stacklevel=2)
    if config.output:
        out = Path(config.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_json(out.with_suffix(".json"))
        table.to_csv(out.with_suffix(".csv"))
        out.with_suffix(".timing.json").write_text(json.dumps(table.timings, indent=1))
    return table
