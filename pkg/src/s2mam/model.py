"""Estimators: S2MAM, its RFF variant, the fixed-mask baseline and the supervised reduction."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import SemiDataset
from .errors import ValidationError
from .kernel import RffGrams, RffMap, additive_predict_matrix
from .lower_solver import objective, solve_lower
from .params import HyperParams, RffSettings
from .upper_optimizer import BilevelTrace, builder_for, run_bilevel

FORMAT_VERSION = 1


def fingerprint(X) -> str:
    X = np.ascontiguousarray(X, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(X.shape).encode("ascii"))
    h.update(X.tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class FittedModel:
    coefficients: np.ndarray  # (n, p)
    s: np.ndarray  # mask probabilities used for prediction
    bandwidths: np.ndarray
    train_X: np.ndarray
    task: str
    loss: str
    hp: HyperParams
    variant: str = "s2mam"
    C: Optional[float] = None
    graph: object = None
    trace: BilevelTrace = field(default_factory=BilevelTrace)
    objective_value: Optional[float] = None

    @property
    def p(self) -> int:
        return self.train_X.shape[1]

    @property
    def group_norms(self) -> np.ndarray:
        return np.linalg.norm(self.coefficients, axis=0)


def _finish(ds, hp, builder, coeffs, s, variant, C=None, graph=None, trace=None, problem=None):
    return FittedModel(
        coefficients=np.asarray(coeffs),
        s=np.asarray(s, dtype=np.float64),
        bandwidths=np.asarray(builder.grams.bandwidths, dtype=np.float64).copy(),
        train_X=ds.X,
        task=ds.task,
        loss=builder.loss,
        hp=hp,
        variant=variant,
        C=C,
        graph=graph,
        trace=trace if trace is not None else BilevelTrace(),
        objective_value=objective(problem, coeffs) if problem is not None else None,
    )


def fit_s2mam(ds: SemiDataset, hp: Optional[HyperParams] = None, seed: int = 0) -> FittedModel:
    """Bilevel mask learning followed by an expected-mask refit.

    With ``hp.rff`` set, Gram blocks and the Laplacian use random Fourier features.
    """
    hp = hp or HyperParams()
    builder = builder_for(ds, hp)
    res = run_bilevel(ds, hp, seed=seed, builder=builder)
    variant = "s2mam-f" if hp.rff is not None else "s2mam"
    coeffs = res.coefficients
    if not hp.refit:
        graph, mask = res.graph, res.mask
        pb = builder.problem(mask, graph=graph if builder.lambda2 > 0 else None)
    elif res.refit_graph is not None:
        graph, mask = res.refit_graph, res.s
        pb = builder.problem(mask, graph=graph if builder.lambda2 > 0 else None)
    else:
        # T = 0: the loop returned its initialization, so refit at s = C/p here
        graph, mask = builder.graph(res.s), res.s
        pb = builder.problem(mask, graph=graph)
        coeffs, _ = solve_lower(pb, settings=hp.admm)
    return _finish(ds, hp, builder, coeffs, mask, variant, C=res.C, graph=graph,
                   trace=res.trace, problem=pb)


def fit_basic(ds: SemiDataset, hp: Optional[HyperParams] = None) -> FittedModel:
    """One lower-level solve with every variable unmasked and the unmasked Laplacian."""
    hp = hp or HyperParams()
    builder = builder_for(ds, hp)
    ones = np.ones(ds.p)
    graph = builder.graph(ones)
    pb = builder.problem(ones, graph=graph)
    coeffs, _ = solve_lower(pb, settings=hp.admm)
    return _finish(ds, hp, builder, coeffs, ones, "basic", C=float(ds.p), graph=graph, problem=pb)


def fit_supervised(ds: SemiDataset, hp: Optional[HyperParams] = None) -> FittedModel:
    """:func:`fit_basic` without the Laplacian term."""
    hp = (hp or HyperParams()).replace(lambda2=0.0)
    model = fit_basic(ds, hp)
    model.variant = "supervised"
    return model


FITTERS = {
    "s2mam": lambda ds, hp, seed: fit_s2mam(ds, hp, seed),
    "s2mam-f": lambda ds, hp, seed: fit_s2mam(ds, hp if hp.rff else hp.replace(rff=RffSettings()), seed),
    "basic": lambda ds, hp, seed: fit_basic(ds, hp),
    "supervised": lambda ds, hp, seed: fit_supervised(ds, hp),
}


def decision_function(model: FittedModel, X_new) -> np.ndarray:
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim == 1:
        X_new = X_new.reshape(0, model.p) if X_new.size == 0 else X_new[None, :]
    if X_new.ndim != 2 or X_new.shape[1] != model.p:
        raise ValidationError(f"expected {model.p} columns, got shape {X_new.shape}")
    if X_new.shape[0] == 0:
        return np.zeros(0)
    if model.hp.rff is not None:
        grams = RffGrams.__new__(RffGrams)
        grams.X = model.train_X
        grams.rff = RffMap(model.bandwidths, model.hp.rff.n_features, model.hp.rff.seed)
        blocks = grams.cross(model.s, X_new)
        return np.einsum("jai,ij->a", blocks, model.coefficients)
    return additive_predict_matrix(model.coefficients, model.bandwidths, model.train_X, model.s, X_new)


def predict(model: FittedModel, X_new) -> np.ndarray:
    """Raw scores for regression; class labels in {0, 1} (score > 0) for classification."""
    scores = decision_function(model, X_new)
    if model.task == "classification":
        return (scores > 0).astype(np.float64)
    return scores


def selected_variables(model_or_s, threshold: float = 0.5) -> tuple:
    """Zero-based indices ``j`` with ``s_j >= threshold``."""
    s = model_or_s.s if isinstance(model_or_s, FittedModel) else np.asarray(model_or_s, dtype=np.float64)
    return tuple(int(j) for j in np.flatnonzero(s >= threshold))


# ---------------------------------------------------------------------------
# JSON persistence


def model_to_dict(model: FittedModel, embed_training_data: bool = True) -> dict:
    d = {
        "format_version": FORMAT_VERSION,
        "variant": model.variant,
        "task": model.task,
        "loss": model.loss,
        "C": model.C,
        "hyperparameters": model.hp.to_dict(),
        "s": model.s.tolist(),
        "coefficients": model.coefficients.tolist(),
        "bandwidths": model.bandwidths.tolist(),
        "train_fingerprint": fingerprint(model.train_X),
        "train_shape": list(model.train_X.shape),
        "trace": model.trace.to_dict(),
    }
    if embed_training_data:
        d["train_X"] = model.train_X.tolist()
    return d


def save_model(model: FittedModel, path, embed_training_data: bool = True) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, embed_training_data)))


def load_model(path, train_X=None) -> FittedModel:
    """Load a model; ``train_X`` is required when the file does not embed it."""
    d = json.loads(Path(path).read_text())
    if d.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported model format {d.get('format_version')!r}")
    if train_X is None:
        if "train_X" not in d:
            raise ValidationError("model file has no embedded training data; supply train_X")
        train_X = d["train_X"]
    train_X = np.asarray(train_X, dtype=np.float64)
    if fingerprint(train_X) != d["train_fingerprint"]:
        raise ValidationError("training data does not match the model's fingerprint")
    return FittedModel(
        coefficients=np.asarray(d["coefficients"], dtype=np.float64),
        s=np.asarray(d["s"], dtype=np.float64),
        bandwidths=np.asarray(d["bandwidths"], dtype=np.float64),
        train_X=train_X,
        task=d["task"],
        loss=d["loss"],
        hp=HyperParams.from_dict(d["hyperparameters"]),
        variant=d["variant"],
        C=d["C"],
        trace=BilevelTrace.from_dict(d["trace"]),
    )
