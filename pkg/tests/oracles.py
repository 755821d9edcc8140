"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import numpy as np

from s2mam.dataset import SemiDataset, gen_additive_synthetic
from s2mam.kernel import ExactGrams, median_bandwidths
from s2mam.lower_solver import ProblemBuilder, solve_lower
from s2mam.params import HyperParams
from s2mam.upper_optimizer import builder_for, enumerate_objective, upper_loss


def make_builder(n=30, p=5, l=10, loss="squared", lambda1=0.0, lambda2=0.0, seed=0, rank_tol=1e-12):
    rng = np.random.default_rng(seed)
    X = rng.random((n, p))
    y = rng.standard_normal(l) if loss == "squared" else np.where(rng.random(l) < 0.5, -1.0, 1.0)
    return ProblemBuilder(X, y, np.arange(l), ExactGrams(X, median_bandwidths(X)), loss,
                          lambda1, lambda2, mu=0.5, rank_tol=rank_tol)


def reference_objective(B, L, y, l, alpha, loss, lambda1, lambda2, tau):
    """Three-term risk composed from explicit Gram blocks."""
    n = alpha.shape[0]
    f = sum(B[j] @ alpha[:, j] for j in range(B.shape[0]))
    if loss == "squared":
        emp = np.mean((f[:l] - y) ** 2)
    else:
        emp = np.mean(np.log1p(np.exp(-y * f[:l])))
    group = lambda1 * sum(tau[j] * np.sqrt(alpha[:, j] @ alpha[:, j]) for j in range(B.shape[0]))
    lap = lambda2 / n ** 2 * (f @ L @ f) if lambda2 > 0 else 0.0
    return emp + group + lap


def fista(B, L, y, l, loss, lambda1, lambda2, tau, iters=20000):
    """Accelerated proximal gradient on the explicit coefficient matrix."""
    p, n, _ = B.shape
    A = np.hstack(list(B))  # f = A vec(alpha^T)
    curv = np.zeros((n, n))
    curv[:l, :l] = np.eye(l) * (2.0 / l if loss == "squared" else 0.25 / l)
    if lambda2 > 0:
        curv += 2.0 * lambda2 / n ** 2 * L
    lip = np.linalg.eigvalsh(A.T @ curv @ A).max()
    step = 1.0 / lip

    def grad(a):
        f = A @ a
        gf = np.zeros(n)
        if loss == "squared":
            gf[:l] = 2.0 / l * (f[:l] - y)
        else:
            gf[:l] = -y / l / (1.0 + np.exp(y * f[:l]))
        if lambda2 > 0:
            gf += 2.0 * lambda2 / n ** 2 * (L @ f)
        return A.T @ gf

    def prox(a, t):
        out = a.reshape(p, n).copy()
        for j in range(p):
            nrm = np.sqrt(out[j] @ out[j])
            out[j] = 0.0 if nrm <= t * tau[j] else out[j] * (1 - t * tau[j] / nrm)
        return out.ravel()

    x = x_prev = np.zeros(p * n)
    t_k = 1.0
    for _ in range(iters):
        t_next = (1 + np.sqrt(1 + 4 * t_k ** 2)) / 2
        w = x + (t_k - 1) / t_next * (x - x_prev)
        x_prev, x = x, prox(w - step * grad(w), step * lambda1)
        t_k = t_next
    return x.reshape(p, n).T


def kkt_projection(s, C):
    """Projection onto {0 <= x <= 1, sum x <= C} by enumerating active sets."""
    s = np.asarray(s, dtype=float)
    p = s.size
    best, best_d = None, np.inf
    for labels in itertools.product((0, 1, 2), repeat=p):  # 0: at 0, 1: at 1, 2: free
        lab = np.array(labels)
        free = lab == 2
        for sum_active in (False, True):
            x = np.where(lab == 1, 1.0, 0.0)
            if sum_active:
                if not free.any():
                    continue
                theta = (s[free].sum() + np.sum(lab == 1) - C) / free.sum()
            else:
                theta = 0.0
            x[free] = s[free] - theta
            if np.any(x < -1e-12) or np.any(x > 1 + 1e-12) or x.sum() > C + 1e-12:
                continue
            d = np.linalg.norm(x - s)
            if d < best_d:
                best, best_d = x, d
    return best


def enumerated_gradient():
    """Full-batch upper losses of all 64 masks of a 6-column problem, plus exact Phi and its gradient."""
    full = gen_additive_synthetic(30, 6, 2)
    ds = SemiDataset(full.X, full.y[:10], y_hidden=full.y[10:], feature_tags=full.feature_tags)
    hp = HyperParams(lambda1=1e-2, lambda2=1e-2)
    builder = builder_for(ds, hp)
    table = {}
    for bits in itertools.product((0.0, 1.0), repeat=6):
        pb = builder.problem(np.array(bits))
        a, _ = solve_lower(pb, settings=hp.admm)
        table[bits] = upper_loss(pb, a, np.arange(ds.l))
    s = np.array([0.2, 0.5, 0.7, 0.4, 0.9, 0.35])
    phi, grad = enumerate_objective(lambda m: table[tuple(m)], s)
    return table, s, phi, grad


def score_samples(table, s, N, seed):
    """N draws of loss(m) * grad log p(m | s) with m ~ Bern(s), losses looked up in ``table``."""
    rng = np.random.default_rng(seed)
    M = (rng.random((N, s.size)) < s).astype(float)
    L = np.array([table[tuple(m)] for m in M])
    return L[:, None] * (M / s - (1 - M) / (1 - s))



def min_norm_least_squares(B, y, l):
    """Minimum-norm coefficients interpolating the labeled rows, from one dense least-squares solve."""
    p, n, _ = B.shape
    A = np.hstack(list(B))[:l]
    return np.linalg.lstsq(A, y, rcond=None)[0].reshape(p, n).T
