"""Orthogonal matching pursuit over a composite dictionary.

This is the victim-side decomposition: a donor vector is expressed over
shared-token anchors and the resulting coefficients are reused verbatim on
the base side (:func:`reuse_reconstruct`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, NumericalError

RESIDUAL_TOL = 1e-10
RIDGE_FALLBACK = 1e-12


@dataclass
class SparseDesign:
    """Support indices into the shared alignment and their coefficients.

    Used both for coefficients recovered by the operator and for
    coefficients produced by the attacker-side designer.
    """

    support: tuple[int, ...]
    coeffs: np.ndarray
    k: int
    residual_norm: float = 0.0
    residual_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.support = tuple(int(i) for i in self.support)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if len(self.support) != self.coeffs.size:
            raise ConfigError("support and coeffs lengths differ")
        if len(set(self.support)) != len(self.support):
            raise ConfigError("support indices must be unique")
        if len(self.support) > self.k:
            raise ConfigError(f"|support|={len(self.support)} exceeds budget k={self.k}")
        if not np.all(np.isfinite(self.coeffs)):
            raise NumericalError("non-finite coefficients")

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[list(self.support)] = self.coeffs
        return out

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.support, self.coeffs.tolist()))


def least_squares_on_support(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """min ||A c - x|| via QR; ridge fallback when A is rank deficient."""
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() > RIDGE_FALLBACK * max(diag.max(), 1.0):
        return solve_triangular(R, Q.T @ x)
    G = A.T @ A + RIDGE_FALLBACK * np.eye(A.shape[1])
    return np.linalg.solve(G, A.T @ x)


def omp_decompose(dictionary, x: np.ndarray, k: int) -> SparseDesign:
    """Greedy sparse decomposition of ``x`` over dictionary rows.

    ``dictionary`` is a :class:`~sharedbasis.geometry.CompositeDictionary`
    or a bare (N, d) array of anchor rows. Atoms are picked by maximal
    absolute correlation with the residual (lowest index on ties) and the
    coefficients are re-fit by least squares on the whole support after
    every pick.
    """
    Phi = np.asarray(getattr(dictionary, "rows", dictionary), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if Phi.ndim != 2 or Phi.shape[1] != x.size:
        raise ConfigError(f"dictionary shape {Phi.shape} incompatible with vector of size {x.size}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("input vector is not finite")
    if np.any(np.linalg.norm(Phi, axis=1) == 0):
        raise ConfigError("dictionary contains zero rows")

    budget = min(k, Phi.shape[0])
    support: list[int] = []
    coeffs = np.zeros(0)
    r = x.copy()
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    available = np.ones(Phi.shape[0], dtype=bool)
    while len(support) < budget and rnorm >= RESIDUAL_TOL:
        corr = np.abs(Phi @ r)
        corr[~available] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 1e-12 * rnorm:
            break
        support.append(j)
        available[j] = False
        A = Phi[support].T
        coeffs = least_squares_on_support(A, x)
        r = x - A @ coeffs
        new_norm = float(np.linalg.norm(r))
        if new_norm > rnorm * (1 + 1e-9) + 1e-14:
            raise NumericalError(f"OMP residual increased: {rnorm:.3e} -> {new_norm:.3e}")
        rnorm = new_norm
        history.append(rnorm)
    return SparseDesign(support=tuple(support), coeffs=coeffs, k=k,
                        residual_norm=rnorm, residual_history=history)


def reuse_reconstruct(dictionary, design: SparseDesign) -> np.ndarray:
    """Apply ``design`` coefficients to another dictionary's anchors."""
    Phi = np.asarray(getattr(dictionary, "rows", dictionary), dtype=np.float64)
    if not design.support:
        return np.zeros(Phi.shape[1])
    idx = np.asarray(design.support)
    if idx.min() < 0 or idx.max() >= Phi.shape[0]:
        raise IndexError(f"support index out of range for {Phi.shape[0]} anchors")
    return Phi[idx].T @ design.coeffs
