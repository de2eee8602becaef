"""Breaker design for the differentiable operators (FOCUS, CLP, WECHSEL).

Minimizes ``||f(x) - mu_base||^2 + lam ||U x||^2 + rho ||x||^2`` over the
donor row ``x`` with Adam, starting from a reverse projection of
``mu_base`` onto nearby anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .designer import DEFAULT_RHO, DesignedToken
from .errors import ConfigError, NumericalError
from .geometry import TargetSpec
from .tensorio import ModelBundle
from .transplant import Transplanter, TransplantParams

DIFF_OPERATORS = ("focus", "clp", "wechsel")
DEFAULT_STEPS = 2000
DEFAULT_LR = 1e-2
DEFAULT_INIT_KNN = 32
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class DesignLoss:
    """Loss and gradient of the dual objective for one operator."""

    def __init__(self, operator, mu_base: np.ndarray, U: np.ndarray, lam: float, rho: float):
        if lam < 0 or rho < 0:
            raise ConfigError("lambda and rho must be non-negative")
        self.operator = operator
        self.mu_base = np.asarray(mu_base, dtype=np.float64)
        self.U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        self.lam = float(lam)
        self.rho = float(rho)

    def value(self, x: np.ndarray) -> float:
        diff = self.operator(x) - self.mu_base
        Ux = self.U @ x
        return float(diff @ diff + self.lam * Ux @ Ux + self.rho * x @ x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        diff = self.operator(x) - self.mu_base
        return (2.0 * self.operator.vjp(x, diff)
                + 2.0 * self.lam * self.U.T @ (self.U @ x)
                + 2.0 * self.rho * x)

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.value(x), self.grad(x)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    k = idx[u - css / idx > 0][-1]
    return np.maximum(v - css[k - 1] / k, 0.0)


def simplex_least_squares(A: np.ndarray, b: np.ndarray, iters: int = 2000) -> np.ndarray:
    """min ||A w - b|| subject to w on the simplex, by accelerated projected gradient."""
    n = A.shape[1]
    L = 2.0 * np.linalg.norm(A, 2) ** 2
    if L == 0:
        return np.full(n, 1.0 / n)
    w = np.full(n, 1.0 / n)
    y, t = w.copy(), 1.0
    for _ in range(iters):
        w_new = project_simplex(y - 2.0 * A.T @ (A @ y - b) / L)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_new + (t - 1.0) / t_new * (w_new - w)
        w, t = w_new, t_new
    return w


def reverse_projection_init(op: str, base_anchors: np.ndarray, donor_anchors: np.ndarray,
                            mu_base: np.ndarray, U: np.ndarray, lam: float,
                            init_knn: int = DEFAULT_INIT_KNN) -> np.ndarray:
    """Starting donor row from the anchors nearest ``mu_base``.

    Fits ``mu_base`` with the ``init_knn`` most cosine-similar base anchors
    (simplex weights for softmax operators, non-negative for CLP), maps the
    weights through the matching donor anchors and applies
    ``(I + lam U^T U)^{-1}`` to damp the donor-subspace component.
    """
    if op not in DIFF_OPERATORS:
        raise ConfigError(f"unknown differentiable operator {op!r}")
    n = base_anchors.shape[0]
    if not 1 <= init_knn:
        raise ConfigError("init_knn must be >= 1")
    kk = min(init_knn, n)
    cos = base_anchors @ mu_base / (np.linalg.norm(base_anchors, axis=1) * np.linalg.norm(mu_base))
    nbrs = np.argsort(-cos, kind="stable")[:kk]
    A = base_anchors[nbrs].T
    if op == "clp":
        w, _ = nnls(A, mu_base)
    else:
        w = simplex_least_squares(A, mu_base)
    x0 = donor_anchors[nbrs].T @ w
    if not np.any(x0):
        x0 = donor_anchors[nbrs[0]].copy()
    # U has orthonormal rows, so (I + lam U^T U)^{-1} = I - lam/(1+lam) U^T U
    return x0 - (lam / (1.0 + lam)) * U.T @ (U @ x0)


@dataclass
class AdamResult:
    x: np.ndarray
    loss: float
    best_history: list[float]
    loss_history: list[float]


def adam_minimize(loss: DesignLoss, x0: np.ndarray, steps: int = DEFAULT_STEPS,
                  lr: float = DEFAULT_LR) -> AdamResult:
    """Plain Adam; returns the lowest-loss iterate seen."""
    if steps < 0 or lr <= 0:
        raise ConfigError("steps must be >= 0 and lr positive")
    b1, b2 = ADAM_BETAS
    x = np.asarray(x0, dtype=np.float64).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best = x.copy(), np.inf
    best_hist, hist = [], []
    for t in range(steps + 1):
        f, g = loss.value_and_grad(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite loss at step {t}; learning rate too large?")
        hist.append(f)
        if f < best:
            best, best_x = f, x.copy()
        best_hist.append(best)
        if t == steps:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (t + 1))
        vhat = v / (1 - b2 ** (t + 1))
        x = x - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return AdamResult(x=best_x, loss=float(best), best_history=best_hist, loss_history=hist)


def design_breaker_differentiable(op: str, base: ModelBundle, donor: ModelBundle,
                                  targets: TargetSpec, lam: float, rho: float = DEFAULT_RHO,
                                  steps: int = DEFAULT_STEPS, lr: float = DEFAULT_LR,
                                  init_knn: int = DEFAULT_INIT_KNN,
                                  token_string: str = "<|breaker|>",
                                  params: TransplantParams | None = None,
                                  transplanter: Transplanter | None = None) -> DesignedToken:
    if op not in DIFF_OPERATORS:
        raise ConfigError(f"unknown differentiable operator {op!r}; choose from {DIFF_OPERATORS}")
    if token_string in donor.vocab:
        raise ConfigError(f"token {token_string!r} already exists in the donor vocabulary")
    tr = transplanter if transplanter is not None else Transplanter(base, donor, op, params)
    if tr.op != op:
        raise ConfigError(f"transplanter operator {tr.op!r} does not match {op!r}")
    loss = DesignLoss(tr.operator, targets.mu_base, targets.U, lam, rho)
    x0 = reverse_projection_init(op, tr.dict_b.rows, tr.dict_d.rows, targets.mu_base,
                                 targets.U, lam, init_knn)
    res = adam_minimize(loss, x0, steps, lr)
    return DesignedToken(
        token_string=token_string,
        x_d=res.x,
        x_d_head=res.x.copy(),
        lam=float(lam),
        rho=float(rho),
        operator=op,
        x_b_designed=tr.operator(res.x),
        provenance={
            "optimizer": "adam", "betas": list(ADAM_BETAS), "eps": ADAM_EPS,
            "steps": steps, "lr": lr, "init_knn": init_knn,
            "init_loss": res.loss_history[0], "final_loss": res.loss,
            "params": tr.params.to_dict(), "m": targets.m,
        },
    )
