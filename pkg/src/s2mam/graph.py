"""Masked similarity graphs and their Laplacians.

``W_ij = exp(-||x_i * m - x_j * m||^2 / mu^2)`` with self-loops kept in the
degrees, ``L = D - W``. :class:`LowRankLaplacian` replaces ``W`` by ``Z Z^T``
built from random Fourier features so ``L v`` costs ``O(n D)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ValidationError
from .kernel import RffMap, rff_features


@dataclass(frozen=True, eq=False)
class GraphLaplacian:
    W: np.ndarray
    degrees: np.ndarray
    mu: float
    mask: np.ndarray

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def laplacian(self) -> np.ndarray:
        return np.diag(self.degrees) - self.W

    def to_dense(self) -> np.ndarray:
        return self.laplacian

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.degrees * v - self.W @ v

    def dump_csv(self, path) -> None:
        np.savetxt(Path(path), self.W, delimiter=",", fmt="%.17g")


def _check_mask(X, mask):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("X must be a 2-D array")
    mask = np.ones(X.shape[1]) if mask is None else np.asarray(mask, dtype=np.float64).ravel()
    if mask.size != X.shape[1]:
        raise ValidationError(f"mask has {mask.size} entries for {X.shape[1]} columns")
    return X, mask


def build_similarity(X, mask=None, mu: float = 1.0, knn: Optional[int] = None) -> GraphLaplacian:
    """Dense masked Gaussian similarity; ``knn`` keeps only mutual-or k-nearest edges."""
    if not mu > 0:
        raise ValidationError(f"similarity bandwidth mu must be positive, got {mu}")
    X, mask = _check_mask(X, mask)
    Xm = X * mask
    W = np.exp(-cdist(Xm, Xm, "sqeuclidean") / mu ** 2)
    if knn is not None:
        if knn < 1:
            raise ValidationError("knn must be >= 1")
        order = np.argsort(-W, axis=1, kind="stable")[:, : knn + 1]
        keep = np.zeros_like(W, dtype=bool)
        np.put_along_axis(keep, order, True, axis=1)
        keep |= keep.T
        np.fill_diagonal(keep, True)
        W = np.where(keep, W, 0.0)
    W.setflags(write=False)
    mask.setflags(write=False)
    return GraphLaplacian(W=W, degrees=W.sum(axis=1), mu=float(mu), mask=mask)


def quadratic_form(f, lap) -> float:
    """``f^T L f``; for dense graphs computed as ``1/2 sum_ij W_ij (f_i - f_j)^2``."""
    f = np.asarray(f, dtype=np.float64).ravel()
    if f.size != lap.n:
        raise ValidationError(f"vector of length {f.size} for a graph on {lap.n} nodes")
    if isinstance(lap, GraphLaplacian):
        d = f[:, None] - f[None, :]
        return 0.5 * float(np.sum(lap.W * d * d))
    return float(f @ lap.apply(f))


@dataclass(frozen=True, eq=False)
class LowRankLaplacian:
    Z: np.ndarray
    degrees: np.ndarray

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.degrees * v - self.Z @ (self.Z.T @ v)

    def to_dense(self) -> np.ndarray:
        return np.diag(self.degrees) - self.Z @ self.Z.T


def build_lowrank(X, mask, rff: RffMap, method: str = "direct") -> LowRankLaplacian:
    """Low-rank similarity ``W ~ Z Z^T`` from a map whose bandwidths are all ``mu``.

    ``direct`` draws one p-dimensional feature map on the masked vector (row k uses
    frequency ``omega_j[k]`` of each coordinate and the phases of coordinate 0).
    ``khatri_rao`` multiplies per-coordinate feature maps column by column, which
    reproduces the product of the per-coordinate kernels in expectation; masked-out
    coordinates contribute an exact factor 1 and are skipped.
    """
    X, mask = _check_mask(X, mask)
    if rff.p != X.shape[1]:
        raise ValidationError("RFF map must cover every coordinate")
    D = rff.n_features
    Xm = X * mask
    if method == "direct":
        active = np.flatnonzero(mask != 0)  # masked coordinates add exactly zero to the phase
        Z = np.sqrt(2.0 / D) * np.cos(Xm[:, active] @ rff.frequencies[active] + rff.phases[0])
    elif method == "khatri_rao":
        Z = np.full((X.shape[0], D), 1.0 / np.sqrt(D))
        for j in np.flatnonzero(mask != 0):
            Z *= np.sqrt(D) * rff_features(rff, j, X[:, j], mask[j])
    else:
        raise ValidationError(f"unknown low-rank method {method!r}")
    degrees = Z @ Z.sum(axis=0)
    Z.setflags(write=False)
    return LowRankLaplacian(Z=Z, degrees=degrees)
