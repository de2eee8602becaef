"""Defender-side audits of a vocabulary's embedding rows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .synthmodel import top1_rates
from .tensorio import ModelBundle

DEFAULT_ALPHA = 0.01
DEFAULT_COS_THRESHOLD = 0.9
NORM_COLLAPSE = "norm_collapse"
GARBAGE_ALIGNED = "garbage_aligned"
ZERO_NORM = "zero_norm"


@dataclass
class TokenAudit:
    id: int
    token: str | None = None
    residual_ratio: float = float("nan")
    zscore: float = float("nan")
    norm: float = float("nan")
    flags: set[str] = field(default_factory=set)

    def to_dict(self) -> dict:
        def num(v):
            return None if not np.isfinite(v) else float(v)
        return {"id": self.id, "token": self.token, "residual_ratio": num(self.residual_ratio),
                "zscore": num(self.zscore), "norm": num(self.norm), "flags": sorted(self.flags)}


@dataclass
class AuditReport:
    per_token: list[TokenAudit]
    thresholds: dict

    def __getitem__(self, i: int) -> TokenAudit:
        return self.per_token[i]

    def flagged(self, flag: str) -> list[int]:
        return [t.id for t in self.per_token if flag in t.flags]

    def zscores(self) -> np.ndarray:
        return np.array([t.zscore for t in self.per_token])

    def merged(self, other: "AuditReport") -> "AuditReport":
        """Combine two fragments over the same rows; ``other`` wins on norms."""
        if len(other.per_token) != len(self.per_token):
            raise ConfigError("audit fragments cover different row counts")
        out = []
        for a, b in zip(self.per_token, other.per_token):
            out.append(TokenAudit(
                id=a.id, token=a.token or b.token,
                residual_ratio=a.residual_ratio if np.isfinite(a.residual_ratio) else b.residual_ratio,
                zscore=a.zscore if np.isfinite(a.zscore) else b.zscore,
                norm=b.norm if np.isfinite(b.norm) else a.norm,
                flags=a.flags | b.flags))
        return AuditReport(out, {**self.thresholds, **other.thresholds})

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds, "per_token": [t.to_dict() for t in self.per_token]}


def residual_ratios(rows: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``||x - U^T U x|| / ||x||`` per row; NaN for zero rows."""
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if U.shape[1] != X.shape[1]:
        raise ConfigError(f"U has dim {U.shape[1]}, rows have dim {X.shape[1]}")
    norms = np.linalg.norm(X, axis=1)
    resid = np.linalg.norm(X - (X @ U.T) @ U, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(norms > 0, resid / norms, np.nan)
    return np.clip(ratio, 0.0, 1.0)


def spectral_zscores(rows: np.ndarray, U: np.ndarray, tokens=None) -> AuditReport:
    """Residual ratio outside ``span(U)``, standardized over the vocabulary.

    Z-scores use the population mean and standard deviation of the finite
    ratios; zero rows are flagged and get no score.
    """
    ratio = residual_ratios(rows, U)
    ok = np.isfinite(ratio)
    z = np.full(ratio.shape, np.nan)
    if ok.any():
        mu = ratio[ok].mean()
        sd = ratio[ok].std()
        z[ok] = (ratio[ok] - mu) / sd if sd > 0 else 0.0
    norms = np.linalg.norm(np.atleast_2d(rows), axis=1)
    per = [TokenAudit(id=i, token=None if tokens is None else tokens[i],
                      residual_ratio=float(ratio[i]), zscore=float(z[i]), norm=float(norms[i]),
                      flags=set() if ok[i] else {ZERO_NORM})
           for i in range(ratio.size)]
    return AuditReport(per, {"subspace_dim": int(np.atleast_2d(U).shape[0])})


def garbage_centroid(E: np.ndarray, garbage_ids) -> np.ndarray:
    G = np.asarray(E, dtype=np.float64)[sorted(garbage_ids)]
    n = np.linalg.norm(G, axis=1, keepdims=True)
    G = G[n[:, 0] > 0] / n[n[:, 0] > 0]
    if G.shape[0] == 0:
        raise ConfigError("garbage ids select only zero rows")
    return G.mean(axis=0)


def norm_garbage_audit(E: np.ndarray, alpha_quantile: float = DEFAULT_ALPHA, garbage_ids=(),
                       cos_threshold: float = DEFAULT_COS_THRESHOLD, tokens=None) -> AuditReport:
    """Under-trained-token flags.

    ``norm_collapse``: row norm strictly below the ``alpha_quantile``
    empirical quantile (linear interpolation) of all row norms.
    ``garbage_aligned``: cosine to the mean unit row of ``garbage_ids``
    strictly above ``cos_threshold``; skipped when ``garbage_ids`` is empty.
    """
    if not 0.0 < alpha_quantile < 1.0:
        raise ConfigError("alpha_quantile must lie in (0, 1)")
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    norms = np.linalg.norm(E, axis=1)
    q = float(np.quantile(norms, alpha_quantile))
    collapse = norms < q
    aligned = np.zeros(E.shape[0], dtype=bool)
    cos = np.full(E.shape[0], np.nan)
    garbage_ids = sorted(set(int(i) for i in garbage_ids))
    if garbage_ids:
        c = garbage_centroid(E, garbage_ids)
        cn = np.linalg.norm(c)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = (E @ c) / (norms * cn)
        aligned = np.nan_to_num(cos, nan=-np.inf) > cos_threshold
    per = []
    for i in range(E.shape[0]):
        flags = set()
        if collapse[i]:
            flags.add(NORM_COLLAPSE)
        if aligned[i]:
            flags.add(GARBAGE_ALIGNED)
        per.append(TokenAudit(id=i, token=None if tokens is None else tokens[i],
                              norm=float(norms[i]), flags=flags))
    return AuditReport(per, {"alpha_quantile": alpha_quantile, "norm_quantile_value": q,
                             "cos_threshold": cos_threshold, "garbage_ids": garbage_ids})


def audit_bundle(bundle: ModelBundle, U: np.ndarray, view: str = "composite",
                 alpha_quantile: float = DEFAULT_ALPHA, garbage_ids=(),
                 cos_threshold: float = DEFAULT_COS_THRESHOLD, w_e: float = 1.0,
                 w_h: float = 1.0) -> AuditReport:
    """Spectral plus norm/garbage audit of every row of a bundle.

    ``view="composite"`` scores the normalized embedding+head mixture (the
    rows the transplant operators see); ``"raw"`` scores embedding rows.
    Norm flags always use raw embedding norms.
    """
    if view == "composite":
        E = bundle.embeddings
        H = bundle.head_view
        ne = np.linalg.norm(E, axis=1, keepdims=True)
        nh = np.linalg.norm(H, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            rows = w_e * np.where(ne > 0, E / ne, 0.0) + w_h * np.where(nh > 0, H / nh, 0.0)
    elif view == "raw":
        rows = bundle.embeddings
    else:
        raise ConfigError("view must be 'composite' or 'raw'")
    tokens = list(bundle.vocab)
    spec = spectral_zscores(rows, U, tokens)
    spec.thresholds["view"] = view
    return spec.merged(norm_garbage_audit(bundle.embeddings, alpha_quantile, garbage_ids,
                                          cos_threshold, tokens))


@dataclass
class EmissionDelta:
    token: str
    before: float
    after: float

    @property
    def delta(self) -> float:
        return self.after - self.before

    def to_dict(self) -> dict:
        return {"token": self.token, "before": self.before, "after": self.after,
                "delta": self.delta}


def differential_emission(before: ModelBundle, after: ModelBundle,
                          states: np.ndarray) -> list[EmissionDelta]:
    """Per-token change in Hits@1 between two bundles on the same states.

    Tokens are matched by string; tokens new in ``after`` use a prior rate
    of 0. Sorted by descending delta, then by token string.
    """
    rb = top1_rates(before, states)
    ra = top1_rates(after, states)
    common = [t for t in after.vocab if t in before.vocab]
    if not common:
        raise ConfigError("bundles share no tokens")
    out = []
    for j, tok in enumerate(after.vocab):
        i = before.vocab.get(tok)
        out.append(EmissionDelta(tok, 0.0 if i is None else float(rb[i]), float(ra[j])))
    out.sort(key=lambda d: (-d.delta, d.token))
    return out
