"""Embedding merges against a clean reference and magnitude-scaling stress."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .synthmodel import EmissionReport, _ranks, emission_proxy
from .tensorio import ModelBundle

MERGE_METHODS = ("linear", "slerp", "ties")
STRESS_GRID = (1.0, 1.2, 1.5, 2.0)
SLERP_EPS = 1e-6


@dataclass(frozen=True)
class MergeParams:
    method: str = "linear"
    t: float = 0.5
    ties_density: float = 1.0
    ties_mix: float = 0.5

    def __post_init__(self):
        if self.method not in MERGE_METHODS:
            raise ConfigError(f"unknown merge method {self.method!r}; choose from {MERGE_METHODS}")
        if not 0.0 <= self.t <= 1.0:
            raise ConfigError("t must lie in [0, 1]")
        if not 0.0 < self.ties_density <= 1.0:
            raise ConfigError("ties_density must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    return (1.0 - t) * a + t * b


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Great-circle interpolation of direction, linear interpolation of norm.

    Falls back to :func:`lerp` for zero vectors and for (anti)parallel pairs
    where the great circle is degenerate.
    """
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return lerp(a, b, t)
    ua, ub = a / na, b / nb
    cos = float(np.clip(ua @ ub, -1.0, 1.0))
    theta = np.arccos(cos)
    if theta < SLERP_EPS or np.pi - theta < SLERP_EPS:
        return lerp(a, b, t)
    s = np.sin(theta)
    u = (np.sin((1.0 - t) * theta) * ua + np.sin(t * theta) * ub) / s
    return ((1.0 - t) * na + t * nb) * u


def ties_merge(reference: np.ndarray, models: list[np.ndarray], density: float = 1.0,
               mix: float = 0.5) -> np.ndarray:
    """TIES merge of ``models`` onto ``reference`` (rows are merged independently).

    Per model, differences from the reference are trimmed to the top
    ``density`` fraction by magnitude within each row; each coordinate's
    sign is elected by summed trimmed mass; entries agreeing with the
    elected sign are averaged and the mean, scaled by ``mix``, is added back.
    """
    ref = np.atleast_2d(reference)
    deltas = np.stack([np.atleast_2d(m) - ref for m in models])  # (n_models, rows, dim)
    if density < 1.0:
        keep = max(1, int(np.ceil(density * deltas.shape[-1])))
        order = np.argsort(-np.abs(deltas), axis=-1, kind="stable")
        mask = np.zeros(deltas.shape, dtype=bool)
        np.put_along_axis(mask, order[..., :keep], True, axis=-1)
        deltas = np.where(mask, deltas, 0.0)
    sign = np.sign(deltas.sum(axis=0))
    agree = (np.sign(deltas) == sign) & (deltas != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, deltas, 0.0).sum(axis=0)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    out = ref + mix * mean
    return out.reshape(np.shape(reference))


def _merge_rows(A: np.ndarray, R: np.ndarray, p: MergeParams) -> np.ndarray:
    if p.method == "linear":
        return lerp(A, R, p.t)
    if p.method == "slerp":
        return np.vstack([slerp(a, r, p.t) for a, r in zip(A, R)]) if len(A) else A.copy()
    return ties_merge(R, [A], p.ties_density, p.ties_mix)


def merge_models(attacked: ModelBundle, reference: ModelBundle,
                 params: MergeParams | None = None) -> ModelBundle:
    """Merge rows shared by token string; attacked-only rows are copied verbatim.

    The output keeps the attacked vocabulary and id order, so a breaker
    token that the reference lacks passes through bit-for-bit.
    """
    p = params or MergeParams()
    missing = [t for t in reference.vocab if t not in attacked.vocab]
    if missing:
        raise ConfigError(f"{len(missing)} reference token(s) absent from the attacked bundle, "
                          f"e.g. {missing[0]!r}")
    if reference.dim != attacked.dim:
        raise ConfigError("reference and attacked bundles differ in dimension")
    a_ids = np.array([attacked.vocab.id_of(t) for t in reference.vocab], dtype=np.int64)
    E = attacked.embeddings.copy()
    E[a_ids] = _merge_rows(attacked.embeddings[a_ids], reference.embeddings, p)
    head = None
    if attacked.head is not None:
        head = attacked.head.copy()
        head[a_ids] = _merge_rows(attacked.head[a_ids], reference.head_view, p)
    meta = {**attacked.meta, "merge": {**p.to_dict(), "n_merged": int(a_ids.size),
                                       "slerp_norm": "linear"}}
    return ModelBundle(embeddings=E, vocab=attacked.vocab, head=head, tied=attacked.tied,
                       meta=meta)


def scale_stress(bundle: ModelBundle, token_id: int, f_grid=STRESS_GRID, states=None,
                 ks=(1, 10, 20)) -> list[EmissionReport]:
    """One emission report per magnitude factor; the bundle is not modified."""
    if states is None:
        raise ConfigError("scale_stress needs a state matrix")
    f_grid = [float(f) for f in f_grid]
    if any(f <= 0 for f in f_grid):
        raise ConfigError("scaling factors must be positive")
    return [emission_proxy(bundle, token_id, states, ks, scale_f=f) for f in f_grid]


def top1_membership(bundle: ModelBundle, token_id: int, states: np.ndarray,
                    scale_f: float = 1.0) -> np.ndarray:
    """Boolean per state: is the (scaled) token the top-1 logit?"""
    logits = np.atleast_2d(states) @ bundle.head_view.T
    logits[:, token_id] *= scale_f
    return _ranks(logits, token_id) == 0
