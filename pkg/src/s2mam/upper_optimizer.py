"""Probabilistic bilevel loop over Bernoulli mask probabilities.

Each outer iteration t:

1. fit the lower-level coefficients for the previous mask and Laplacian;
2. score a labeled batch with them and take a projected policy-gradient step
   ``s <- P_C(s - eta_t * loss * grad log p(m | s))`` with ``eta_t = c / sqrt(t)``,
   then draw a fresh mask ``m ~ Bern(s)``;
3. rebuild the similarity graph for the new mask.

``P_C`` is the Euclidean projection onto ``{0 <= s <= 1, sum(s) <= C}``.
"""
from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataset import SemiDataset
from .errors import NumericalError, ValidationError
from .kernel import ExactGrams, RffGrams, RffMap, median_bandwidths
from .lower_solver import LowerProblem, ProblemBuilder, predictions, solve_lower
from .params import HyperParams
from .rng import derive_seed, make_rng


def sample_mask(s, rng: np.random.Generator) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return (rng.random(s.shape) < s).astype(np.float64)


def score_gradient(m, s, eps: float = 1e-3) -> np.ndarray:
    """``d/ds log p(m | s)`` for independent Bernoulli coordinates, with ``s`` clipped to [eps, 1-eps]."""
    m = np.asarray(m, dtype=np.float64)
    sc = np.clip(np.asarray(s, dtype=np.float64), eps, 1.0 - eps)
    return m / sc - (1.0 - m) / (1.0 - sc)


def log_prob(m, s) -> float:
    m = np.asarray(m, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.where(m == 1, np.log(s), np.log1p(-s))))


def upper_loss(problem: LowerProblem, coeffs, batch) -> float:
    """Mean loss of the masked predictor on ``batch`` (positions within the labeled set)."""
    batch = np.asarray(batch, dtype=np.intp).ravel()
    if batch.size == 0:
        raise ValidationError("empty batch")
    f = predictions(problem, coeffs)
    rows = problem.labeled[batch]
    y = problem.y[batch]
    if problem.loss == "squared":
        return float(np.mean((y - f[rows]) ** 2))
    return float(np.mean(np.logaddexp(0.0, -y * f[rows])))


def project(s, C: float, tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection onto the capped box-simplex ``{0 <= s <= 1, sum(s) <= C}``."""
    if not C > 0:
        raise ValidationError("budget C must be positive")
    s = np.asarray(s, dtype=np.float64)
    clipped = np.clip(s, 0.0, 1.0)
    if clipped.sum() <= C:
        return clipped
    # sum(clip(s - theta, 0, 1)) is non-increasing in theta; it equals sum(clip(s)) > C at 0
    lo, hi = 0.0, float(np.max(s))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if np.clip(s - mid, 0.0, 1.0).sum() > C:
            lo = mid
        else:
            hi = mid
    theta = 0.5 * (lo + hi)
    # exact theta on the active set found by bisection
    free = (s - theta > 0.0) & (s - theta < 1.0)
    if free.any():
        top = np.count_nonzero(s - theta >= 1.0)
        exact = (s[free].sum() + top - C) / free.sum()
        out = np.clip(s - exact, 0.0, 1.0)
        if abs(out.sum() - C) <= 1e-12 * max(1.0, C):
            return out
    return np.clip(s - theta, 0.0, 1.0)


def step_size(t: int, c: float) -> float:
    if t < 1:
        raise ValidationError("iterations are counted from 1")
    return c / math.sqrt(t)


def sgd_step(s, m, loss: float, t: int, c: float, C: float, eps: float = 1e-3):
    """One projected policy-gradient step; returns ``(new_s, eta)``."""
    eta = step_size(t, c)
    grad = loss * score_gradient(m, s, eps)
    return project(np.asarray(s, dtype=np.float64) - eta * grad, C), eta


def gradient_mapping_norm(s, grad, t: int, c: float, C: float) -> float:
    """``||(s - P_C(s - eta_t grad)) / eta_t||^2``."""
    eta = step_size(t, c)
    s = np.asarray(s, dtype=np.float64)
    g = (s - project(s - eta * np.asarray(grad, dtype=np.float64), C)) / eta
    return float(g @ g)


def enumerate_objective(loss_of_mask: Callable, s) -> tuple:
    """Exact ``Phi(s)`` and ``grad Phi(s)`` by summing over all ``2^p`` masks."""
    s = np.asarray(s, dtype=np.float64)
    p = s.size
    phi, grad = 0.0, np.zeros(p)
    for bits in itertools.product((0.0, 1.0), repeat=p):
        m = np.array(bits)
        prob = float(np.prod(np.where(m == 1, s, 1.0 - s)))
        val = loss_of_mask(m)
        phi += prob * val
        grad += prob * val * score_gradient(m, s, eps=0.0)
    return phi, grad


# ---------------------------------------------------------------------------


@dataclass
class BilevelTrace:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    step: list = field(default_factory=list)
    grad_mapping_sq: list = field(default_factory=list)
    s_sum: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    s: list = field(default_factory=list)

    COLUMNS = ("iteration", "loss", "step", "grad_mapping_sq", "s_sum", "wall_ms")

    def __len__(self):
        return len(self.iteration)

    def append(self, **rec):
        for k in self.COLUMNS:
            getattr(self, k).append(rec[k])
        self.s.append(np.asarray(rec["s"], dtype=np.float64).copy())

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, k) for k in self.COLUMNS)):
                w.writerow([repr(v) for v in row])

    def to_dict(self) -> dict:
        d = {k: list(getattr(self, k)) for k in self.COLUMNS}
        d["s"] = [v.tolist() for v in self.s]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BilevelTrace":
        tr = cls(**{k: list(d[k]) for k in cls.COLUMNS})
        tr.s = [np.asarray(v, dtype=np.float64) for v in d.get("s", [])]
        return tr


@dataclass
class BilevelResult:
    coefficients: np.ndarray  # expected-mask refit (or loop coefficients when refit is off)
    s: np.ndarray
    graph: object  # Laplacian built from the last sampled mask
    trace: BilevelTrace
    loop_coefficients: np.ndarray  # alpha^T from the last Step 1
    mask: np.ndarray  # last sampled mask m^T
    refit_graph: object = None
    C: float = 0.0


def targets_for(ds: SemiDataset) -> np.ndarray:
    """Labels as the solvers see them: +-1 for classification, raw values for regression."""
    return 2.0 * ds.y - 1.0 if ds.task == "classification" else ds.y.copy()


def builder_for(ds: SemiDataset, hp: HyperParams) -> ProblemBuilder:
    """Gram provider, graph builder and lower-level settings for a training set."""
    if hp.kernel_bandwidths is not None:
        bw = np.asarray(hp.kernel_bandwidths, dtype=np.float64)
        if bw.size != ds.p:
            raise ValidationError("kernel_bandwidths needs one entry per column")
    else:
        bw = median_bandwidths(ds.X) * hp.bandwidth_scale
    graph_rff = None
    if hp.rff is not None:
        grams = RffGrams(ds.X, RffMap(bw, hp.rff.n_features, hp.rff.seed))
        graph_rff = RffMap(
            np.full(ds.p, hp.mu),
            hp.rff.graph_features or hp.rff.n_features,
            derive_seed(hp.rff.seed, "graph"),
        )
    else:
        grams = ExactGrams(ds.X, bw)
    return ProblemBuilder(
        ds.X, targets_for(ds), np.arange(ds.l), grams,
        loss=hp.resolve_loss(ds.task), lambda1=hp.lambda1, lambda2=hp.lambda2,
        tau=hp.tau_array(ds.p), mu=hp.mu, knn=hp.knn, graph_rff=graph_rff,
        graph_method=hp.rff.graph_method if hp.rff is not None else "direct",
    )


def run_bilevel(ds: SemiDataset, hp: HyperParams, seed: int = 0,
                builder: Optional[ProblemBuilder] = None) -> BilevelResult:
    """Run ``hp.T`` outer iterations from ``alpha = 0``, ``m = 1``, ``s = C/p``."""
    builder = builder or builder_for(ds, hp)
    n, p, l = ds.n, ds.p, ds.l
    C = hp.resolve_C(p, len(ds.informative))
    rng = make_rng(seed, "bilevel")
    k = hp.n_mask_samples
    batch_size = min(l, hp.batch_size)
    need_graph = builder.lambda2 > 0

    s = np.full(p, C / p)
    masks = [np.ones(p)]
    graphs = [builder.graph(masks[0])]
    alpha = np.zeros((n, p))
    warm = None
    g_avg = np.zeros(p)
    baseline = None
    trace = BilevelTrace()

    for t in range(1, hp.T + 1):
        t0 = time.perf_counter()
        # Step 1: alpha^t for each current mask
        losses, coeffs = [], []
        batch = np.sort(rng.choice(l, size=batch_size, replace=False))
        for j, (m, g) in enumerate(zip(masks, graphs)):
            pb = builder.problem(m, graph=g if need_graph else None)
            try:
                a, state = solve_lower(pb, warm=warm, settings=hp.inner_admm)
            except NumericalError as exc:
                raise type(exc)(f"outer iteration {t}: {exc}") from exc
            if j == 0:
                alpha, warm = a, a
            coeffs.append(a)
            losses.append(upper_loss(pb, a, batch))

        # Step 2: projected policy-gradient step on s, then resample masks
        if hp.baseline:
            ref = 0.0 if baseline is None else baseline
        else:
            ref = 0.0
        grad = np.mean([(L - ref) * score_gradient(m, s, hp.score_eps) for L, m in zip(losses, masks)], axis=0)
        if hp.baseline:
            mean_loss = float(np.mean(losses))
            baseline = mean_loss if baseline is None else hp.baseline_decay * baseline + (1 - hp.baseline_decay) * mean_loss
        eta = step_size(t, hp.c)
        s = project(s - eta * grad, C)
        g_avg = hp.ema_beta * g_avg + (1.0 - hp.ema_beta) * grad
        g_hat = g_avg / (1.0 - hp.ema_beta ** t)
        gmap = gradient_mapping_norm(s, g_hat, t, hp.c, C)
        masks = [sample_mask(s, rng) for _ in range(k)]

        # Step 3: Laplacians for the new masks
        graphs = [builder.graph(m) if need_graph else None for m in masks]

        trace.append(
            iteration=t, loss=float(np.mean(losses)), step=eta, grad_mapping_sq=gmap,
            s_sum=float(s.sum()), wall_ms=1e3 * (time.perf_counter() - t0), s=s,
        )

    last_graph = graphs[0] if graphs[0] is not None else builder.graph(masks[0])
    result = BilevelResult(
        coefficients=alpha, s=s, graph=last_graph, trace=trace,
        loop_coefficients=alpha, mask=masks[0], C=C,
    )
    # with T = 0 the initialization is returned untouched
    if hp.refit and hp.T > 0:
        result.refit_graph = builder.graph(s)
        pb = builder.problem(s, graph=result.refit_graph)
        result.coefficients, _ = solve_lower(pb, warm=warm, settings=hp.admm)
    return result
