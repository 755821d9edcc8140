"""Lower-level problem: masked loss + group penalty + Laplacian penalty, solved by ADMM.

Coefficients ``alpha`` have shape ``(n, p)``; column ``j`` multiplies the masked
Gram block ``G_j`` and the prediction vector on the training rows is
``f = sum_j G_j alpha[:, j]``. The risk is

    (1/l) sum_labeled loss(f_i, y_i) + lambda1 sum_j tau_j ||alpha_j||_2
        + lambda2 / n^2 * f^T L f

Each block is eigen-factored, ``G_j = V_j diag(w_j) V_j^T``, and the solver works
with latent coordinates ``z_j = V_j^T alpha_j``. Minimizers lie in the span of the
blocks, so nothing is lost beyond eigenvalues dropped below ``rank_tol``, and the
group norms are preserved because ``V_j`` is orthonormal.

ADMM splits ``z = beta``: ``z`` carries the smooth terms, ``beta`` the group
penalty. The z-subproblem is solved for an n-vector ``c`` with ``z = v + D^T c``
(``D`` the stacked ``V_j diag(w_j)``), so only n x n systems are factorized.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .errors import DivergenceError, SingularSystemError, ValidationError
from .graph import build_lowrank, build_similarity, quadratic_form

LOSSES = ("squared", "logistic")
_RHO_BOUNDS = (1e-6, 1e6)


@dataclass
class AdmmSettings:
    rho: float = 1.0
    tol: float = 1e-5
    max_iter: int = 500
    newton_max_iter: int = 20
    newton_tol: float = 1e-10
    adapt_rho: bool = True
    adapt_every: int = 10
    max_rho_changes: int = 20
    relaxation: float = 1.0
    certify: bool = True  # also require the optimality certificate before stopping
    record_trace: bool = False

    def __post_init__(self):
        if min(self.rho, self.tol, self.newton_tol) <= 0 or min(self.max_iter, self.newton_max_iter, self.adapt_every) < 1:
            raise ValidationError("ADMM settings must be positive")
        if not 0 < self.relaxation < 2:
            raise ValidationError("relaxation must lie in (0, 2)")


@dataclass(eq=False)
class LowerProblem:
    """One instance of the lower-level risk for a fixed mask and Laplacian.

    ``design[:, j, :]`` maps latent coordinates of group ``j`` to predictions. With
    ``basis=None`` the latent coordinates are the coefficients themselves and
    ``design[:, j, :]`` is ``G_j``; use :meth:`from_blocks` or :meth:`from_factors`.
    """

    design: np.ndarray  # (n, p, r)
    y: np.ndarray  # targets of the labeled rows; +-1 for the logistic loss
    labeled: np.ndarray  # row indices of the labeled points
    laplacian: Optional[np.ndarray] = None  # dense (n, n), may be None when lambda2 == 0
    loss: str = "squared"
    lambda1: float = 0.0
    lambda2: float = 0.0
    tau: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    graph: object = None
    basis: Optional[np.ndarray] = None  # (p, n, r) orthonormal columns per group
    K: Optional[np.ndarray] = None  # (n, n) sum_j G_j G_j^T, computed when omitted

    def __post_init__(self):
        self.design = np.ascontiguousarray(self.design, dtype=np.float64)
        if self.design.ndim != 3:
            raise ValidationError("design must have shape (n, p, r)")
        n, p, r = self.design.shape
        if self.basis is not None and self.basis.shape != (p, n, r):
            raise ValidationError("basis must have shape (p, n, r)")
        if self.basis is None and r != n:
            raise ValidationError("without a basis every group needs n latent coordinates")
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.labeled = np.asarray(self.labeled, dtype=np.intp).ravel()
        if self.labeled.size < 1 or self.labeled.size != self.y.size:
            raise ValidationError("need one target per labeled row and at least one labeled row")
        if np.any(self.labeled < 0) or np.any(self.labeled >= n) or np.unique(self.labeled).size != self.labeled.size:
            raise ValidationError("labeled rows must be distinct row indices")
        if self.loss not in LOSSES:
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.loss == "logistic" and not np.all(np.abs(self.y) == 1):
            raise ValidationError("logistic loss expects +-1 targets")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("regularization weights must be non-negative")
        self.tau = np.ones(p) if self.tau is None else np.asarray(self.tau, dtype=np.float64).ravel()
        if self.tau.size != p or np.any(self.tau <= 0):
            raise ValidationError("tau needs p positive entries")
        if self.lambda2 > 0:
            if self.laplacian is None:
                raise ValidationError("lambda2 > 0 requires a Laplacian")
            if self.laplacian.shape != (n, n):
                raise ValidationError("Laplacian dimension must equal the number of training rows")
        if self.K is None:
            self.K = self._flat @ self._flat.T

    @classmethod
    def from_blocks(cls, blocks, y, labeled, **kw) -> "LowerProblem":
        """Problem on explicit symmetric ``(p, n, n)`` Gram blocks, no factorization."""
        blocks = np.asarray(blocks, dtype=np.float64)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ValidationError("Gram blocks must have shape (p, n, n)")
        return cls(design=blocks.transpose(1, 0, 2), y=y, labeled=labeled, **kw)

    @classmethod
    def from_factors(cls, factors, y, labeled, **kw) -> "LowerProblem":
        """Problem on eigen-factored blocks (a :class:`~s2mam.kernel.BlockFactors`)."""
        return cls(design=factors.design, y=y, labeled=labeled, basis=factors.basis, **kw)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @property
    def rank(self) -> int:
        return self.design.shape[2]

    @property
    def l(self) -> int:  # noqa: E743
        return self.labeled.size

    @property
    def _flat(self) -> np.ndarray:
        return self.design.reshape(self.n, -1)

    @property
    def lap_scale(self) -> float:
        return self.lambda2 / self.n ** 2

    def apply(self, z: np.ndarray) -> np.ndarray:
        """Predictions ``sum_j D_j z_j`` for latent coordinates of shape ``(p, r)``."""
        return self._flat @ z.ravel()

    def apply_t(self, c: np.ndarray) -> np.ndarray:
        """``(D_j^T c)_j`` as a ``(p, r)`` array."""
        return (self._flat.T @ c).reshape(self.p, self.rank)

    def to_latent(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (self.n, self.p):
            raise ValidationError(f"coefficients of shape {alpha.shape}, expected {(self.n, self.p)}")
        if self.basis is None:
            return np.ascontiguousarray(alpha.T)
        return np.einsum("jnr,nj->jr", self.basis, alpha)

    def to_coefficients(self, z) -> np.ndarray:
        if self.basis is None:
            return np.ascontiguousarray(z.T)
        return np.einsum("jnr,jr->nj", self.basis, z)

    def laplacian_apply(self, f: np.ndarray) -> np.ndarray:
        return self.laplacian @ f


def predictions(problem: LowerProblem, alpha) -> np.ndarray:
    return problem.apply(problem.to_latent(alpha))


def empirical_loss(problem: LowerProblem, f_labeled: np.ndarray) -> float:
    y = problem.y
    if problem.loss == "squared":
        return float(np.mean((y - f_labeled) ** 2))
    return float(np.mean(np.logaddexp(0.0, -y * f_labeled)))


def _laplacian_term(problem: LowerProblem, f: np.ndarray) -> float:
    if problem.lambda2 == 0:
        return 0.0
    if problem.graph is not None:
        return problem.lap_scale * quadratic_form(f, problem.graph)
    return problem.lap_scale * float(f @ problem.laplacian @ f)


def objective(problem: LowerProblem, alpha) -> float:
    """Full lower-level risk at ``alpha``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    f = predictions(problem, alpha)
    group = float(np.sum(problem.tau * np.linalg.norm(alpha, axis=0)))
    return empirical_loss(problem, f[problem.labeled]) + problem.lambda1 * group + _laplacian_term(problem, f)


def _loss_weights(problem: LowerProblem, f: np.ndarray) -> np.ndarray:
    """Second derivative of the loss term at each labeled row."""
    if problem.loss == "squared":
        return np.full(problem.l, 2.0 / problem.l)
    s = expit(problem.y * f[problem.labeled])
    return s * (1.0 - s) / problem.l


def _grad_f(problem: LowerProblem, f: np.ndarray, Lf: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the smooth part with respect to the prediction vector."""
    g = np.zeros(problem.n)
    fl = f[problem.labeled]
    if problem.loss == "squared":
        g[problem.labeled] = (2.0 / problem.l) * (fl - problem.y)
    else:
        g[problem.labeled] = -(problem.y / problem.l) * expit(-problem.y * fl)
    if problem.lambda2 > 0:
        g += 2.0 * problem.lap_scale * (problem.laplacian_apply(f) if Lf is None else Lf)
    return g


def smooth_gradient(problem: LowerProblem, alpha) -> np.ndarray:
    """Gradient of loss + Laplacian term with respect to ``alpha``, shape ``(n, p)``."""
    f = predictions(problem, alpha)
    return problem.to_coefficients(problem.apply_t(_grad_f(problem, f)))


def group_prox(v, threshold: float) -> np.ndarray:
    """Proximal map of ``threshold * ||.||_2``: block soft-thresholding."""
    v = np.asarray(v, dtype=np.float64)
    if threshold < 0:
        raise ValidationError("threshold must be non-negative")
    norm = np.linalg.norm(v)
    if norm == 0.0 or norm <= threshold:
        return np.zeros_like(v)
    return v * (1.0 - threshold / norm)


def _group_prox_rows(V: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > thresholds, 1.0 - thresholds / norms, 0.0)
    return V * scale[:, None]


def _certified(problem: LowerProblem, beta: np.ndarray, thresholds: np.ndarray, tol: float) -> bool:
    """Group-lasso optimality check in latent coordinates.

    Zero groups need ``||g_j|| <= threshold_j (1 + tol)``; active groups need the
    subgradient ``g_j + threshold_j beta_j / ||beta_j||`` below ``tol (1 + ||g||)``.
    """
    g = problem.apply_t(_grad_f(problem, problem.apply(beta)))
    gnorm = np.linalg.norm(g, axis=1)
    bnorm = np.linalg.norm(beta, axis=1)
    zero = bnorm == 0.0
    if np.any(gnorm[zero] > thresholds[zero] * (1.0 + tol)):
        return False
    act = ~zero
    sub = g[act] + (thresholds[act] / bnorm[act])[:, None] * beta[act]
    return bool(np.all(np.linalg.norm(sub, axis=1) <= tol * (1.0 + np.linalg.norm(g))))


def _lu(A: np.ndarray, rho: float):
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            lu = sla.lu_factor(A, check_finite=False)
        except (sla.LinAlgError, sla.LinAlgWarning, ValueError) as exc:
            raise SingularSystemError(
                f"singular alpha-update system at rho={rho:g}; increase rho or lambda2"
            ) from exc
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
        raise SingularSystemError(f"singular alpha-update system at rho={rho:g}; increase rho or lambda2")
    return lu


@dataclass
class AdmmState:
    alpha: np.ndarray  # (n, p) smooth copy
    beta: np.ndarray  # (n, p) sparse copy, returned as the solution
    dual: np.ndarray  # (n, p) scaled dual variable
    rho: float
    primal_residual: float = math.inf
    dual_residual: float = math.inf
    iterations: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)


class _LatentStep:
    """Solves ``min_z smooth(z) + rho/2 ||z - v||^2`` through ``z = v + D^T c``.

    Stationarity reduces to ``grad_f(Dv + K c) + rho c = 0``. Its Jacobian is
    ``rho I + (H + 2 s L) K`` where the loss curvature ``H`` lives on the labeled
    rows only, so the Laplacian part is factored once per ``rho`` and the loss
    part enters through a rank-``l`` Woodbury correction.
    """

    def __init__(self, problem: LowerProblem, settings: AdmmSettings):
        pb = self.pb = problem
        self.settings = settings
        self.c = np.zeros(pb.n)
        self.KL = pb.K[pb.labeled]  # (l, n)
        self.LK = 2.0 * pb.lap_scale * (pb.laplacian @ pb.K) if pb.lambda2 > 0 else None
        self._rho = None
        if pb.loss == "squared":
            self.b = np.zeros(pb.n)
            self.b[pb.labeled] = (2.0 / pb.l) * pb.y

    def _prepare(self, rho):
        if self._rho == rho:
            return
        pb = self.pb
        A0 = rho * np.eye(pb.n)
        if self.LK is not None:
            A0 += self.LK
        if pb.loss == "squared":
            A0[pb.labeled] += (2.0 / pb.l) * self.KL
            self._lu = _lu(A0, rho)
        else:
            self._lu = _lu(A0, rho)
            E = np.zeros((pb.n, pb.l))
            E[pb.labeled, np.arange(pb.l)] = 1.0
            self.Q = sla.lu_solve(self._lu, E, check_finite=False)
            self.S = self.KL @ self.Q
            self._eye_l = np.eye(pb.l)
        self._rho = rho

    def _solve(self, w, rhs):
        """``(A0 + E diag(w) K_l)^{-1} rhs`` by Woodbury."""
        x0 = sla.lu_solve(self._lu, rhs, check_finite=False)
        small = self._eye_l + w[:, None] * self.S
        try:
            y = np.linalg.solve(small, w * (self.KL @ x0))
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("singular Newton system in the alpha update") from exc
        return x0 - self.Q @ y

    def _phi(self, f, c, Gv, Lf, rho):
        pb = self.pb
        val = np.logaddexp(0.0, -pb.y * f[pb.labeled]).sum() / pb.l + 0.5 * rho * float(c @ (f - Gv))
        if pb.lambda2 > 0:
            val += pb.lap_scale * float(f @ Lf)
        return val

    def __call__(self, Gv: np.ndarray, rho: float) -> np.ndarray:
        pb = self.pb
        self._prepare(rho)
        if pb.loss == "squared":
            rhs = self.b.copy()
            rhs[pb.labeled] -= (2.0 / pb.l) * Gv[pb.labeled]
            if pb.lambda2 > 0:
                rhs -= 2.0 * pb.lap_scale * pb.laplacian_apply(Gv)
            self.c = sla.lu_solve(self._lu, rhs, check_finite=False)
            return self.c
        # damped Newton on phi(c) = loss(f) + lap(f) + rho/2 c^T K c with f = Gv + K c
        c = self.c
        f = Gv + pb.K @ c
        lap = pb.lambda2 > 0
        Lf = pb.laplacian_apply(f) if lap else None
        phi = self._phi(f, c, Gv, Lf, rho)
        scale = 1.0 + np.max(np.abs(f))
        for _ in range(self.settings.newton_max_iter):
            r = _grad_f(pb, f, Lf) + rho * c
            if np.max(np.abs(r)) <= self.settings.newton_tol * scale:
                break
            d = -self._solve(_loss_weights(pb, f), r)
            Kd = pb.K @ d
            LKd = pb.laplacian_apply(Kd) if lap else None
            slope = float(Kd @ r)
            if slope >= 0:
                break
            t = 1.0
            while True:
                c_new, f_new = c + t * d, f + t * Kd
                Lf_new = Lf + t * LKd if lap else None
                phi_new = self._phi(f_new, c_new, Gv, Lf_new, rho)
                if phi_new <= phi + 1e-4 * t * slope or t < 1e-10:
                    break
                t *= 0.5
            decrease = phi - phi_new
            c, f, Lf, phi = c_new, f_new, Lf_new, phi_new
            if abs(decrease) <= 1e-15 * (1.0 + abs(phi)):
                break
        self.c = c
        return c


def solve_lower(problem: LowerProblem, warm=None, settings: Optional[AdmmSettings] = None):
    """ADMM for the lower-level risk.

    ``warm`` may be a coefficient array (the scaled dual is then initialized from
    the smooth gradient, which makes an optimal warm start a fixed point) or an
    :class:`AdmmState` from a previous solve. Returns ``(coefficients, state)``
    where the coefficients are the group-sparse ADMM copy.
    """
    settings = settings or AdmmSettings()
    pb = problem
    rho = float(settings.rho)

    if isinstance(warm, AdmmState):
        beta = pb.to_latent(warm.beta)
        u = pb.to_latent(warm.dual) * (warm.rho / rho)
    elif warm is not None:
        warm = np.asarray(warm, dtype=np.float64)
        if warm.shape != (pb.n, pb.p):
            raise ValidationError(f"warm start of shape {warm.shape}, expected {(pb.n, pb.p)}")
        beta = pb.to_latent(warm)
        u = -pb.apply_t(_grad_f(pb, pb.apply(beta))) / rho
    else:
        beta = np.zeros((pb.p, pb.rank))
        u = np.zeros((pb.p, pb.rank))

    step = _LatentStep(pb, settings)
    thresholds = pb.lambda1 * pb.tau
    gamma = settings.relaxation
    state = AdmmState(alpha=None, beta=None, dual=None, rho=rho)
    z = beta
    lo, hi = _RHO_BOUNDS
    changes = 0

    for it in range(1, settings.max_iter + 1):
        v = beta - u
        c = step(pb.apply(v), rho)
        z = v + pb.apply_t(c)
        z_hat = gamma * z + (1.0 - gamma) * beta
        beta_old = beta
        beta = _group_prox_rows(z_hat + u, thresholds / rho)
        u = u + z_hat - beta

        r_pri = float(np.linalg.norm(z - beta))
        r_dual = float(rho * np.linalg.norm(beta - beta_old))
        if not (np.isfinite(r_pri) and np.isfinite(r_dual)):
            raise DivergenceError(f"ADMM diverged at iteration {it} (rho={rho:g})", rho=rho, iteration=it)
        if settings.record_trace:
            state.trace.append({
                "iteration": it,
                "objective": objective(pb, pb.to_coefficients(beta)),
                "primal_residual": r_pri,
                "dual_residual": r_dual,
                "rho": rho,
            })
        state.iterations = it
        state.primal_residual, state.dual_residual = r_pri, r_dual
        if max(r_pri, r_dual) < settings.tol and (
                not settings.certify or _certified(pb, beta, thresholds, settings.tol)):
            state.converged = True
            break
        # residual balancing, throttled so that rho eventually stays fixed
        if settings.adapt_rho and it % settings.adapt_every == 0 and changes < settings.max_rho_changes:
            if r_pri > 10.0 * r_dual and rho * 2.0 <= hi:
                rho *= 2.0
                u = u / 2.0
                changes += 1
            elif r_dual > 10.0 * r_pri and rho / 2.0 >= lo:
                rho /= 2.0
                u = u * 2.0
                changes += 1

    state.alpha = pb.to_coefficients(z)
    state.beta = pb.to_coefficients(beta)
    state.dual = pb.to_coefficients(u)
    state.rho = rho
    return state.beta.copy(), state


# ---------------------------------------------------------------------------
# problem assembly


class ProblemBuilder:
    """Assembles :class:`LowerProblem` instances for arbitrary masks on one training set.

    ``grams`` is an :class:`~s2mam.kernel.ExactGrams` or :class:`~s2mam.kernel.RffGrams`;
    ``graph_rff`` switches the Laplacian to the low-rank RFF operator.
    """

    def __init__(self, X, targets, labeled, grams, loss="squared", lambda1=0.0, lambda2=0.0,
                 tau=None, mu=1.0, knn=None, graph_rff=None, graph_method="direct",
                 rank_tol: Optional[float] = 1e-12):
        self.X = np.asarray(X, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64).ravel()
        self.labeled = np.asarray(labeled, dtype=np.intp).ravel()
        self.grams = grams
        self.loss = loss
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.tau = tau
        self.mu = float(mu)
        self.knn = knn
        self.graph_rff = graph_rff
        self.graph_method = graph_method
        self.rank_tol = rank_tol

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def graph(self, mask):
        if self.graph_rff is not None:
            return build_lowrank(self.X, mask, self.graph_rff, method=self.graph_method)
        return build_similarity(self.X, mask, self.mu, knn=self.knn)

    def problem(self, mask, graph=None) -> LowerProblem:
        mask = np.asarray(mask, dtype=np.float64).ravel()
        lap = None
        if self.lambda2 > 0:
            graph = graph if graph is not None else self.graph(mask)
            lap = graph.to_dense()
        kw = dict(laplacian=lap, loss=self.loss, lambda1=self.lambda1, lambda2=self.lambda2,
                  tau=self.tau, mask=mask, graph=graph)
        if self.rank_tol is None:
            blocks = self.grams.blocks(mask)
            return LowerProblem.from_blocks(blocks, self.targets, self.labeled,
                                            K=self.grams.gram_sum(mask, blocks), **kw)
        factors = self.grams.factors(mask, self.rank_tol)
        return LowerProblem.from_factors(factors, self.targets, self.labeled, **kw)

    def with_params(self, **kw) -> "ProblemBuilder":
        new = object.__new__(ProblemBuilder)
        new.__dict__.update(self.__dict__)
        for k, v in kw.items():
            if not hasattr(new, k):
                raise AttributeError(k)
            setattr(new, k, v)
        return new
