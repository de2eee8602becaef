"""Differentiable shared-basis transplant operators.

Each operator maps a donor vector to a convex (or sub-convex) mixture of
base anchors. The classes expose ``__call__`` for the forward map and
``vjp(x, g)``, the gradient of ``<g, f(x)>`` with respect to ``x``, which
is what the gradient designer needs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

DEFAULT_TEMPERATURE = 10.0
DEFAULT_CLP_EPS = 1e-8
DEFAULT_KNN = 10


def _rows(d) -> np.ndarray:
    return np.asarray(getattr(d, "rows", d), dtype=np.float64)


def _unit(x: np.ndarray, what: str = "input vector") -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(x))
    if n == 0.0 or not np.isfinite(n):
        raise NumericalError(f"{what} has zero or non-finite norm")
    return x / n, n


def _unit_rows(X: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ConfigError("anchor matrix contains zero rows")
    return X / n


def _normalize_vjp(xhat: np.ndarray, norm: float, v: np.ndarray) -> np.ndarray:
    # d(x/|x|)/dx = (I - xhat xhat^T) / |x|
    return (v - xhat * (xhat @ v)) / norm


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


class FocusOperator:
    """Softmax over cosine similarity to every donor anchor."""

    name = "focus"

    def __init__(self, donor_anchors, base_anchors, temperature: float = DEFAULT_TEMPERATURE):
        if temperature <= 0:
            raise ConfigError("FOCUS temperature must be positive")
        self.donor = _unit_rows(_rows(donor_anchors))
        self.base = _rows(base_anchors)
        self.temperature = float(temperature)

    def weights(self, x: np.ndarray) -> np.ndarray:
        xhat, _ = _unit(np.asarray(x, dtype=np.float64))
        return softmax(self.temperature * (self.donor @ xhat))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.base.T @ self.weights(x)

    def vjp(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        xhat, n = _unit(np.asarray(x, dtype=np.float64))
        w = softmax(self.temperature * (self.donor @ xhat))
        q = self.base @ g
        dc = self.temperature * w * (q - w @ q)
        return _normalize_vjp(xhat, n, self.donor.T @ dc)


class ClpOperator:
    """Rectified cosine similarities, renormalized with a small epsilon."""

    name = "clp"

    def __init__(self, donor_anchors, base_anchors, epsilon: float = DEFAULT_CLP_EPS):
        if epsilon <= 0:
            raise ConfigError("CLP epsilon must be positive")
        self.donor = _unit_rows(_rows(donor_anchors))
        self.base = _rows(base_anchors)
        self.epsilon = float(epsilon)

    def weights(self, x: np.ndarray) -> np.ndarray:
        xhat, _ = _unit(np.asarray(x, dtype=np.float64))
        a = np.maximum(self.donor @ xhat, 0.0)
        return a / (self.epsilon + a.sum())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.base.T @ self.weights(x)

    def vjp(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        xhat, n = _unit(np.asarray(x, dtype=np.float64))
        c = self.donor @ xhat
        a = np.maximum(c, 0.0)
        denom = self.epsilon + a.sum()
        w = a / denom
        q = self.base @ g
        da = (q - w @ q) / denom
        dc = np.where(c > 0, da, 0.0)
        return _normalize_vjp(xhat, n, self.donor.T @ dc)


@dataclass(frozen=True)
class ProcrustesMap:
    """Affine map ``x -> (x - mu_src) @ A + mu_tgt`` with semi-orthogonal ``A``."""

    A: np.ndarray
    mu_src: np.ndarray
    mu_tgt: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mu_src) @ self.A + self.mu_tgt


def procrustes_fit(shared_d: np.ndarray, shared_b: np.ndarray) -> ProcrustesMap:
    """Orthogonal Procrustes on centred shared rows.

    Minimizes ``||(X_d - mu_src) A - (X_b - mu_tgt)||_F`` over matrices with
    orthonormal rows or columns (whichever the shapes allow), using the thin
    SVD of the centred cross-covariance.
    """
    Xd = np.asarray(_rows(shared_d), dtype=np.float64)
    Xb = np.asarray(_rows(shared_b), dtype=np.float64)
    if Xd.shape[0] != Xb.shape[0]:
        raise ConfigError("shared matrices must have the same number of rows")
    n = Xd.shape[0]
    if n < max(Xd.shape[1], Xb.shape[1]):
        raise ConfigError(
            f"need at least max(d_donor, d_base)={max(Xd.shape[1], Xb.shape[1])} shared rows, got {n}")
    mu_src = Xd.mean(axis=0)
    mu_tgt = Xb.mean(axis=0)
    M = (Xd - mu_src).T @ (Xb - mu_tgt)
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    if s.size and s[-1] <= 1e-10 * max(s[0], np.finfo(float).tiny):
        warnings.warn("rank-deficient cross-covariance; Procrustes solution is not unique",
                      RuntimeWarning, stacklevel=2)
    return ProcrustesMap(A=u @ vt, mu_src=mu_src, mu_tgt=mu_tgt)


class WechselOperator:
    """Procrustes alignment followed by a softmax k-NN mixture of base anchors.

    Neighbours are chosen by cosine similarity between the aligned proxy and
    the base anchors; ties go to the lower anchor index.
    """

    name = "wechsel"

    def __init__(self, pmap: ProcrustesMap, base_anchors, knn_k: int = DEFAULT_KNN,
                 temperature: float = DEFAULT_TEMPERATURE):
        self.pmap = pmap
        self.base = _rows(base_anchors)
        self.base_unit = _unit_rows(self.base)
        if not 1 <= knn_k <= self.base.shape[0]:
            raise ConfigError(f"knn_k={knn_k} must lie in [1, {self.base.shape[0]}]")
        if temperature < 0:
            raise ConfigError("WECHSEL temperature must be non-negative")
        self.knn_k = int(knn_k)
        self.temperature = float(temperature)

    def _forward(self, x):
        xt = self.pmap.apply(x)
        that, tn = _unit(xt, "aligned proxy")
        cos = self.base_unit @ that
        nbrs = np.argsort(-cos, kind="stable")[: self.knn_k]
        w = softmax(self.temperature * cos[nbrs])
        return that, tn, nbrs, w

    def neighbours(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, _, nbrs, w = self._forward(x)
        return nbrs, w

    def weights(self, x: np.ndarray) -> np.ndarray:
        nbrs, w = self.neighbours(x)
        full = np.zeros(self.base.shape[0])
        full[nbrs] = w
        return full

    def __call__(self, x: np.ndarray) -> np.ndarray:
        nbrs, w = self.neighbours(x)
        return self.base[nbrs].T @ w

    def vjp(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        that, tn, nbrs, w = self._forward(x)
        q = self.base[nbrs] @ g
        dc = self.temperature * w * (q - w @ q)
        d_xt = _normalize_vjp(that, tn, self.base_unit[nbrs].T @ dc)
        return self.pmap.A @ d_xt


def focus_map(x, dict_d, dict_b, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    return FocusOperator(dict_d, dict_b, temperature)(x)


def clp_map(x, dict_d, dict_b, epsilon: float = DEFAULT_CLP_EPS) -> np.ndarray:
    return ClpOperator(dict_d, dict_b, epsilon)(x)


def wechsel_map(x, pmap: ProcrustesMap, base_anchor_rows, knn_k: int = DEFAULT_KNN,
                temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    return WechselOperator(pmap, base_anchor_rows, knn_k, temperature)(x)
