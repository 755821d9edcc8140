"""Hyperparameters shared by the bilevel loop, the estimators and the CLI."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ValidationError
from .lower_solver import AdmmSettings

LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
MU_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class RffSettings:
    n_features: int = 1024
    seed: int = 0
    graph_features: Optional[int] = None  # defaults to n_features
    graph_method: str = "direct"

    def __post_init__(self):
        if self.n_features < 1:
            raise ValidationError("n_features must be >= 1")
        if self.graph_method not in ("direct", "khatri_rao"):
            raise ValidationError(f"unknown graph_method {self.graph_method!r}")


@dataclass
class HyperParams:
    lambda1: float = 1e-2
    lambda2: float = 1e-2
    mu: float = 1.0
    C: Optional[float] = None
    tau: Optional[tuple] = None
    loss: str = "auto"
    T: int = 300
    c: float = 0.1
    batch_size: int = 32
    admm: AdmmSettings = field(default_factory=AdmmSettings)  # final fits
    inner_admm: AdmmSettings = field(default_factory=lambda: AdmmSettings(rho=0.1, tol=1e-3, max_iter=200, newton_tol=1e-8))  # loop solves
    rff: Optional[RffSettings] = None
    score_eps: float = 1e-3
    n_mask_samples: int = 1
    baseline: bool = False
    baseline_decay: float = 0.9
    ema_beta: float = 0.9
    refit: bool = True
    kernel_bandwidths: Optional[tuple] = None
    bandwidth_scale: float = 1.0
    knn: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.admm, dict):
            self.admm = AdmmSettings(**self.admm)
        if isinstance(self.inner_admm, dict):
            self.inner_admm = AdmmSettings(**self.inner_admm)
        if isinstance(self.rff, dict):
            self.rff = RffSettings(**self.rff)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("lambda1 and lambda2 must be non-negative")
        if not self.mu > 0:
            raise ValidationError("mu must be positive")
        if self.C is not None and not self.C > 0:
            raise ValidationError("mask budget C must be positive")
        if self.T < 0 or self.c <= 0 or self.batch_size < 1 or self.n_mask_samples < 1:
            raise ValidationError("T >= 0, c > 0, batch_size >= 1 and n_mask_samples >= 1 required")
        if not 0 < self.score_eps < 0.5:
            raise ValidationError("score_eps must lie in (0, 0.5)")
        if self.loss not in ("auto", "squared", "logistic"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.bandwidth_scale <= 0:
            raise ValidationError("bandwidth_scale must be positive")

    def resolve_loss(self, task: str) -> str:
        if self.loss != "auto":
            return self.loss
        return "logistic" if task == "classification" else "squared"

    def resolve_C(self, p: int, informative_count: int = 0) -> float:
        """Budget C: explicit value, else twice a known informative count, else p / 2."""
        if self.C is not None:
            C = float(self.C)
        elif informative_count > 0:
            C = float(min(p, 2 * informative_count))
        else:
            C = p / 2.0
        if not 0 < C <= p:
            raise ValidationError(f"mask budget C={C} must lie in (0, p={p}]")
        return C

    def tau_array(self, p: int) -> np.ndarray:
        if self.tau is None:
            return np.ones(p)
        tau = np.asarray(self.tau, dtype=np.float64).ravel()
        if tau.size != p or np.any(tau <= 0):
            raise ValidationError("tau needs p positive entries")
        return tau

    def replace(self, **kw) -> "HyperParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return HyperParams(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("tau", "kernel_bandwidths"):
            if d[k] is not None:
                d[k] = [float(v) for v in d[k]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown hyperparameters {sorted(unknown)}")
        for k in ("tau", "kernel_bandwidths"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)
