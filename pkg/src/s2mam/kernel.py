"""Per-coordinate Gaussian kernels, masked Gram blocks and random Fourier features.

A component kernel is ``k(a, b) = exp(-(a - b)^2 / sigma^2)``. Masking scales the
inputs, ``k(m a, m b)``, so a coordinate with ``m = 0`` contributes an all-ones
block and fractional masks interpolate between the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .rng import make_rng


@dataclass(frozen=True)
class GaussianKernel:
    bandwidth: float = 1.0

    def __post_init__(self):
        if not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
            raise ValidationError(f"kernel bandwidth must be positive, got {self.bandwidth}")

    def __call__(self, a, b):
        d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        return np.exp(-(d * d) / self.bandwidth ** 2)


def eval_component(kernel: GaussianKernel, a: float, b: float, mask_j: float = 1.0) -> float:
    return float(kernel(mask_j * a, mask_j * b))


def gram_component(kernel: GaussianKernel, column, mask_j: float = 1.0) -> np.ndarray:
    c = mask_j * np.asarray(column, dtype=np.float64).ravel()
    return kernel(c[:, None], c[None, :])


def cross_component(kernel: GaussianKernel, rows, column, mask_j: float = 1.0) -> np.ndarray:
    """``K[a, i] = k(m rows[a], m column[i])``."""
    r = mask_j * np.asarray(rows, dtype=np.float64).ravel()
    c = mask_j * np.asarray(column, dtype=np.float64).ravel()
    return kernel(r[:, None], c[None, :])


def median_bandwidths(X: np.ndarray, max_rows: int = 1000) -> np.ndarray:
    """Median pairwise ``|a - b|`` per column (falls back to 1 for constant columns)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > max_rows:
        X = X[np.linspace(0, X.shape[0] - 1, max_rows).astype(int)]
    n = X.shape[0]
    iu = np.triu_indices(n, k=1)
    out = np.ones(X.shape[1])
    if n < 2:
        return out
    for j in range(X.shape[1]):
        d = np.abs(X[:, j][:, None] - X[:, j][None, :])[iu]
        med = np.median(d)
        if med <= 0:
            med = d.max()
        out[j] = med if med > 0 else 1.0
    return out


def kernels_from_bandwidths(bandwidths) -> list:
    return [GaussianKernel(float(s)) for s in np.asarray(bandwidths).ravel()]


def _bandwidth_array(kernels) -> np.ndarray:
    if isinstance(kernels, np.ndarray):
        return kernels.astype(np.float64).ravel()
    return np.array([k.bandwidth for k in kernels], dtype=np.float64)


def additive_predict_matrix(alpha, kernels, train_X, mask, X_new) -> np.ndarray:
    """Vectorized additive prediction for every row of ``X_new``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    train_X = np.asarray(train_X, dtype=np.float64)
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim == 1:
        X_new = X_new[None, :]
    sig = _bandwidth_array(kernels)
    mask = np.asarray(mask, dtype=np.float64).ravel()
    n, p = train_X.shape
    if alpha.shape != (n, p):
        raise ValidationError(f"coefficients have shape {alpha.shape}, expected {(n, p)}")
    if sig.size != p or mask.size != p or X_new.shape[1] != p:
        raise ValidationError("kernels, mask and inputs must all have p entries")
    out = np.zeros(X_new.shape[0])
    for j in range(p):
        if not alpha[:, j].any():
            continue
        d = mask[j] * (X_new[:, j][:, None] - train_X[:, j][None, :])
        out += np.exp(-(d * d) / sig[j] ** 2) @ alpha[:, j]
    return out


def additive_predict(alpha, kernels, train_X, mask, x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(additive_predict_matrix(alpha, kernels, train_X, mask, x[None, :])[0])


# ---------------------------------------------------------------------------
# random Fourier features


@dataclass(frozen=True, eq=False)
class RffMap:
    """Per-coordinate random Fourier features for Gaussian components.

    Frequencies for coordinate ``j`` are drawn from ``N(0, 2 / sigma_j^2)`` (the
    spectral density of ``exp(-t^2 / sigma_j^2)``), phases from ``U[0, 2 pi)``.
    Seed, bandwidths and feature count regenerate the map exactly.
    """

    bandwidths: np.ndarray
    n_features: int = 1024
    seed: int = 0
    frequencies: np.ndarray = field(init=False, repr=False)
    phases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        bw = np.asarray(self.bandwidths, dtype=np.float64).ravel()
        if bw.size < 1 or np.any(bw <= 0):
            raise ValidationError("RFF bandwidths must be positive")
        if self.n_features < 1:
            raise ValidationError("n_features must be >= 1")
        rng = make_rng(self.seed, "rff")
        std = np.sqrt(2.0) / bw
        freqs = rng.standard_normal((bw.size, self.n_features)) * std[:, None]
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(bw.size, self.n_features))
        for name, val in (("bandwidths", bw), ("frequencies", freqs), ("phases", phases)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def p(self) -> int:
        return self.bandwidths.size

    def to_dict(self) -> dict:
        return {"bandwidths": self.bandwidths.tolist(), "n_features": int(self.n_features), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "RffMap":
        return cls(np.asarray(d["bandwidths"]), int(d["n_features"]), int(d["seed"]))


def rff_features(rff: RffMap, j: int, value, mask_j: float = 1.0) -> np.ndarray:
    """``sqrt(2/D) cos(omega_j * (m_j v) + b_j)``; a vector of ``D`` values, or ``(len(v), D)``."""
    if not 0 <= j < rff.p:
        raise ValidationError(f"coordinate {j} outside the map's {rff.p} coordinates")
    v = mask_j * np.asarray(value, dtype=np.float64)
    arg = np.multiply.outer(v, rff.frequencies[j]) + rff.phases[j]
    return np.sqrt(2.0 / rff.n_features) * np.cos(arg)


# ---------------------------------------------------------------------------
# Gram providers used by the solvers


def factor_block(block: np.ndarray, rank_tol: float = 1e-12):
    """Eigen-factor a PSD block as ``V diag(w) V^T`` keeping ``w > rank_tol * max(w)``."""
    w, V = np.linalg.eigh(block)
    keep = w > rank_tol * max(w[-1], 0.0)
    if not keep.any():
        return np.zeros((block.shape[0], 0)), np.zeros(0)
    return V[:, keep], w[keep]


@dataclass(eq=False)
class BlockFactors:
    """Orthonormal bases and eigenvalues of every masked block, zero-padded to a common rank."""

    basis: np.ndarray  # (p, n, r)
    values: np.ndarray  # (p, r), zero in padded slots

    @property
    def design(self) -> np.ndarray:
        """``(n, p, r)`` array with ``design[:, j, :] = V_j diag(w_j)``."""
        return (self.basis * self.values[:, None, :]).transpose(1, 0, 2)


class _GramProvider:
    """Shared masking logic: ``m = 1`` uses the cached base block, ``m = 0`` a constant block."""

    def _setup(self):
        self._base_sq = None
        self._base_factors = None

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def blocks(self, mask) -> np.ndarray:
        mask = np.asarray(mask, dtype=np.float64).ravel()
        out = np.empty_like(self._base)
        for j, m in enumerate(mask):
            if m == 1.0:
                out[j] = self._base[j]
            elif m == 0.0:
                out[j] = self._constant(j)
            else:
                out[j] = self._block(j, m)
        return out

    def gram_sum(self, mask, blocks=None) -> np.ndarray:
        """``sum_j G_j G_j^T`` for the masked blocks."""
        mask = np.asarray(mask, dtype=np.float64).ravel()
        if np.all((mask == 0) | (mask == 1)):
            if self._base_sq is None:
                self._base_sq = np.matmul(self._base, self._base)
            K = self._base_sq[mask == 1].sum(axis=0)
            consts = [self._constant(j) for j in np.flatnonzero(mask == 0)]
            return K + self.n * float(np.sum(np.square(consts)))
        if blocks is None:
            blocks = self.blocks(mask)
        return np.einsum("jik,jlk->il", blocks, blocks, optimize=True)

    def factors(self, mask, rank_tol: float = 1e-12) -> BlockFactors:
        mask = np.asarray(mask, dtype=np.float64).ravel()
        if self._base_factors is None:
            self._base_factors = [factor_block(self._base[j], rank_tol) for j in range(self.p)]
        n = self.n
        parts = []
        for j, m in enumerate(mask):
            if m == 1.0:
                parts.append(self._base_factors[j])
            elif m == 0.0:
                parts.append((np.full((n, 1), 1.0 / np.sqrt(n)), np.array([n * self._constant(j)])))
            else:
                parts.append(factor_block(self._block(j, m), rank_tol))
        r = max(1, max(w.size for _, w in parts))
        basis = np.zeros((self.p, n, r))
        values = np.zeros((self.p, r))
        for j, (V, w) in enumerate(parts):
            basis[j, :, : w.size] = V
            values[j, : w.size] = w
        return BlockFactors(basis, values)


class ExactGrams(_GramProvider):
    """Masked Gram blocks ``G_j[i, k] = k_j(m_j x_ij, m_j x_kj)`` on the training rows."""

    def __init__(self, X, bandwidths):
        self.X = np.asarray(X, dtype=np.float64)
        self.bandwidths = np.asarray(bandwidths, dtype=np.float64).ravel()
        if self.bandwidths.size != self.X.shape[1]:
            raise ValidationError("one bandwidth per column required")
        diff = self.X.T[:, :, None] - self.X.T[:, None, :]
        self._scaled_sq = (diff * diff) / self.bandwidths[:, None, None] ** 2
        self._base = np.exp(-self._scaled_sq)
        self._setup()

    def _constant(self, j) -> float:
        return 1.0

    def _block(self, j, m):
        return np.exp(-(m * m) * self._scaled_sq[j])

    def cross(self, mask, X_new) -> np.ndarray:
        """Blocks of shape ``(p, len(X_new), n)`` between new rows and training rows."""
        X_new = np.asarray(X_new, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64).ravel()
        d = mask[:, None, None] * (X_new.T[:, :, None] - self.X.T[:, None, :])
        return np.exp(-(d * d) / self.bandwidths[:, None, None] ** 2)


class RffGrams(_GramProvider):
    """Gram blocks approximated by ``Z_j Z_j^T`` with per-coordinate RFF maps.

    A masked-out coordinate has constant features, so its block is the constant
    ``(2/D) sum_k cos(b_jk)^2``.
    """

    def __init__(self, X, rff: RffMap):
        self.X = np.asarray(X, dtype=np.float64)
        self.rff = rff
        if rff.p != self.X.shape[1]:
            raise ValidationError("RFF map must cover every column")
        self._base = np.stack([self._block(j, 1.0) for j in range(self.p)])
        self._ones = (2.0 / rff.n_features) * np.sum(np.cos(rff.phases) ** 2, axis=1)
        self._setup()

    @property
    def bandwidths(self):
        return self.rff.bandwidths

    def _constant(self, j) -> float:
        return float(self._ones[j])

    def _block(self, j, m):
        Z = rff_features(self.rff, j, self.X[:, j], m)
        return Z @ Z.T

    def cross(self, mask, X_new) -> np.ndarray:
        X_new = np.asarray(X_new, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64).ravel()
        out = np.empty((self.p, X_new.shape[0], self.n))
        for j in range(self.p):
            Zn = rff_features(self.rff, j, X_new[:, j], mask[j])
            Zt = rff_features(self.rff, j, self.X[:, j], mask[j])
            out[j] = Zn @ Zt.T
        return out
