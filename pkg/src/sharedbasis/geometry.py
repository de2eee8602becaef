"""Shared-vocabulary alignment, composite anchors and target estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .tensorio import ModelBundle, Vocab

# Production PCA width for the donor innocuity subspace.
DEFAULT_COMPONENTS = 256


@dataclass(frozen=True)
class SharedAlignment:
    """Pairs of (base_id, donor_id) whose token strings coincide."""

    base_ids: np.ndarray
    donor_ids: np.ndarray
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.base_ids.tolist(), self.donor_ids.tolist()))


@dataclass(frozen=True)
class CompositeDictionary:
    """Unit-norm anchor rows, one per shared token, in alignment order."""

    rows: np.ndarray
    w_e: float = 1.0
    w_h: float = 1.0
    per_view_norm: bool = True

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class TargetSpec:
    mu_base: np.ndarray
    mu_donor: np.ndarray
    U: np.ndarray
    explained_variance: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.U.shape[0]


def align_shared(base_vocab: Vocab, donor_vocab: Vocab) -> SharedAlignment:
    """Exact string intersection, ordered by ascending base id."""
    base_ids, donor_ids, tokens = [], [], []
    for bid, tok in enumerate(base_vocab):
        did = donor_vocab.get(tok)
        if did is not None:
            base_ids.append(bid)
            donor_ids.append(did)
            tokens.append(tok)
    if not tokens:
        raise ConfigError("base and donor vocabularies share no tokens")
    return SharedAlignment(
        base_ids=np.asarray(base_ids, dtype=np.int64),
        donor_ids=np.asarray(donor_ids, dtype=np.int64),
        tokens=tuple(tokens),
    )


def _unit_rows(X: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms.ravel() == 0)[:5].tolist()
        raise NumericalError(f"zero {what} row(s) at positions {bad}")
    return X / norms


def composite_rows(E: np.ndarray, H: np.ndarray, w_e: float = 1.0, w_h: float = 1.0,
                   per_view_norm: bool = True) -> np.ndarray:
    """normalize(w_e * norm(e) + w_h * norm(h)) row-wise."""
    if w_e == 0 and w_h == 0:
        raise ConfigError("view weights w_e and w_h cannot both be zero")
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if per_view_norm:
        E = _unit_rows(E, "embedding") if w_e else E
        H = _unit_rows(H, "head") if w_h else H
    mixed = w_e * E + w_h * H
    return _unit_rows(mixed, "composite")


def build_composites(bundle: ModelBundle, ids, w_e: float = 1.0, w_h: float = 1.0,
                     per_view_norm: bool = True) -> CompositeDictionary:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= bundle.n_tokens):
        raise ConfigError(f"ids out of range for a bundle of {bundle.n_tokens} tokens")
    rows = composite_rows(bundle.embeddings[ids], bundle.head_view[ids], w_e, w_h, per_view_norm)
    return CompositeDictionary(rows=rows, w_e=w_e, w_h=w_h, per_view_norm=per_view_norm)


def token_vector(bundle: ModelBundle, token_id: int, w_e: float = 1.0, w_h: float = 1.0) -> np.ndarray:
    """Magnitude-preserving donor-side query for a token being transplanted.

    The weighted mean of the raw embedding and head rows. For tied bundles
    (or ``w_h == 0``) this is the raw embedding row, so a row written as a
    combination of anchors decomposes back to exactly that combination.
    """
    if w_e == 0 and w_h == 0:
        raise ConfigError("view weights w_e and w_h cannot both be zero")
    e = bundle.embeddings[token_id]
    h = bundle.head_view[token_id]
    return (w_e * e + w_h * h) / (w_e + w_h)


def pca(states: np.ndarray, m: int, rank_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Top-``m`` principal directions of mean-centred ``states``.

    Returns ``(components, explained_variance)``; components are orthonormal
    rows ordered by non-increasing variance, each with its first non-zero
    coordinate positive.
    """
    X = np.asarray(states, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("states must be a 2-D matrix")
    if m < 1:
        raise ConfigError("m must be at least 1")
    n, d = X.shape
    if m > d:
        raise ConfigError(f"m={m} exceeds state dimension {d}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    rank = int(np.sum(evals > rank_tol * max(scale, np.finfo(float).tiny)))
    if scale == 0.0:
        rank = 0
    if m > rank:
        raise NumericalError(f"m={m} exceeds the rank ({rank}) of the centred states")
    comps = evecs[:, :m].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return comps, np.clip(evals[:m], 0.0, None)


def estimate_targets(base_states: np.ndarray, donor_states: np.ndarray,
                     m: int = DEFAULT_COMPONENTS) -> TargetSpec:
    """Column means of both state sets plus the donor PCA subspace."""
    base_states = np.asarray(base_states, dtype=np.float64)
    donor_states = np.asarray(donor_states, dtype=np.float64)
    if base_states.shape[0] < m + 1 or donor_states.shape[0] < m + 1:
        raise ConfigError(f"need at least m+1={m + 1} states on each side")
    if not (np.all(np.isfinite(base_states)) and np.all(np.isfinite(donor_states))):
        raise NumericalError("non-finite hidden states")
    U, ev = pca(donor_states, m)
    return TargetSpec(
        mu_base=base_states.mean(axis=0),
        mu_donor=donor_states.mean(axis=0),
        U=U,
        explained_variance=ev,
    )
