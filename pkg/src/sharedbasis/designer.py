"""Breaker-token design against the OMP shared-basis operator.

The designer runs OMP "in reverse": it picks a support of shared anchors
and coefficients whose base-side reconstruction points at ``mu_base``
while the donor-side vector built from the same coefficients stays out of
the donor's principal state subspace ``U``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .geometry import TargetSpec, align_shared, build_composites
from .omp import SparseDesign
from .synthmodel import DEFAULT_KS, EmissionReport, emission_proxy
from .tensorio import ModelBundle, read_matrix, write_matrix
from .transplant import Transplanter, TransplantParams

DEFAULT_RHO = 1e-3
DEFAULT_DESIGN_K = 64
DEFAULT_DONOR_THRESHOLD = 0.01
LAMBDA_GRID = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 768, 1024, 1280, 1536, 2048)
GREEDY_RESIDUAL_TOL = 1e-8


def normal_system(B: np.ndarray, D: np.ndarray, U: np.ndarray, mu_base: np.ndarray,
                  lam: float, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Matrix and right-hand side of the ridge-stabilized normal equations.

    (2 B B^T + lam (D U^T)(D U^T)^T + rho I) alpha = B mu_base
    """
    DU = D @ U.T
    M = 2.0 * B @ B.T + lam * DU @ DU.T + rho * np.eye(B.shape[0])
    return M, B @ mu_base


def solve_coefficients(B: np.ndarray, D: np.ndarray, U: np.ndarray, mu_base: np.ndarray,
                       lam: float, rho: float) -> np.ndarray:
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    mu_base = np.asarray(mu_base, dtype=np.float64)
    if rho <= 0:
        raise ConfigError("rho must be positive")
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    if B.shape[0] != D.shape[0] or D.shape[1] != U.shape[1] or B.shape[1] != mu_base.size:
        raise ConfigError(f"inconsistent shapes B{B.shape} D{D.shape} U{U.shape} mu{mu_base.shape}")
    for name, arr in (("B", B), ("D", D), ("U", U), ("mu_base", mu_base)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"{name} contains non-finite values")
    M, rhs = normal_system(B, D, U, mu_base, lam, rho)
    alpha = np.linalg.solve(M, rhs)
    # one step of iterative refinement; cheap and tightens large-lambda solves
    alpha += np.linalg.solve(M, rhs - M @ alpha)
    return alpha


def system_residual(B, D, U, mu_base, lam, rho, alpha) -> float:
    M, rhs = normal_system(B, D, U, mu_base, lam, rho)
    return float(np.linalg.norm(M @ alpha - rhs))


def greedy_support(dict_b, dict_d, U: np.ndarray, mu_base: np.ndarray, lam: float,
                   rho: float = DEFAULT_RHO, k: int = DEFAULT_DESIGN_K) -> SparseDesign:
    """Donor-aware greedy support selection.

    Each step scores every unused anchor by
    ``<phi_b_j, r> - lam * ||U phi_d_j||^2`` (signed inner product, so the
    base reconstruction is pulled toward ``mu_base``), adds the best one,
    re-solves the normal equations on the support and updates
    ``r = mu_base - B^T alpha``.
    """
    Phi_b = np.asarray(getattr(dict_b, "rows", dict_b), dtype=np.float64)
    Phi_d = np.asarray(getattr(dict_d, "rows", dict_d), dtype=np.float64)
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    mu_base = np.asarray(mu_base, dtype=np.float64)
    if Phi_b.shape[0] == 0:
        raise ConfigError("empty candidate set")
    if Phi_b.shape[0] != Phi_d.shape[0]:
        raise ConfigError("base and donor dictionaries must be aligned row-for-row")
    if k < 1:
        raise ConfigError("k must be >= 1")
    penalty = lam * np.sum((Phi_d @ U.T) ** 2, axis=1)
    available = np.ones(Phi_b.shape[0], dtype=bool)
    support: list[int] = []
    alpha = np.zeros(0)
    r = mu_base.copy()
    history = [float(np.linalg.norm(r))]
    while len(support) < min(k, Phi_b.shape[0]) and history[-1] >= GREEDY_RESIDUAL_TOL:
        score = Phi_b @ r - penalty
        score[~available] = -np.inf
        j = int(np.argmax(score))
        support.append(j)
        available[j] = False
        B, D = Phi_b[support], Phi_d[support]
        alpha = solve_coefficients(B, D, U, mu_base, lam, rho)
        r = mu_base - B.T @ alpha
        history.append(float(np.linalg.norm(r)))
    return SparseDesign(support=tuple(support), coeffs=alpha, k=k,
                        residual_norm=history[-1], residual_history=history)


@dataclass
class DesignedToken:
    """A crafted donor row plus everything needed to reproduce it."""

    token_string: str
    x_d: np.ndarray
    x_d_head: np.ndarray
    lam: float
    rho: float
    eta: float = 0.0
    operator: str = "omp"
    design: SparseDesign | None = None
    support_tokens: tuple[str, ...] = ()
    x_b_designed: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_d = np.asarray(self.x_d, dtype=np.float64).reshape(-1)
        self.x_d_head = np.asarray(self.x_d_head, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.x_d)) or not np.any(self.x_d):
            raise NumericalError("designed donor row must be finite and non-zero")

    def to_dict(self) -> dict:
        d = {
            "token": self.token_string,
            "operator": self.operator,
            "lambda": self.lam,
            "rho": self.rho,
            "eta": self.eta,
            "norm_x_d": float(np.linalg.norm(self.x_d)),
            "provenance": self.provenance,
        }
        if self.design is not None:
            d["support"] = list(self.design.support)
            d["support_tokens"] = list(self.support_tokens)
            d["coeffs"] = self.design.coeffs.tolist()
            d["k"] = self.design.k
            d["residual_norm"] = self.design.residual_norm
        return d

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_matrix(d / "x_d.emb", self.x_d[None, :])
        write_matrix(d / "x_d_head.emb", self.x_d_head[None, :])
        if self.x_b_designed is not None:
            write_matrix(d / "x_b_designed.emb", self.x_b_designed[None, :])
        (d / "token.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True,
                                                 ensure_ascii=False) + "\n", encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory) -> "DesignedToken":
        d = Path(directory)
        rec = json.loads((d / "token.json").read_text(encoding="utf-8"))
        design = None
        if "support" in rec:
            design = SparseDesign(support=rec["support"], coeffs=rec["coeffs"], k=rec["k"],
                                  residual_norm=rec.get("residual_norm", 0.0))
        xb = d / "x_b_designed.emb"
        return cls(
            token_string=rec["token"],
            x_d=read_matrix(d / "x_d.emb")[0],
            x_d_head=read_matrix(d / "x_d_head.emb")[0],
            lam=rec["lambda"], rho=rec["rho"], eta=rec.get("eta", 0.0),
            operator=rec.get("operator", "omp"), design=design,
            support_tokens=tuple(rec.get("support_tokens", ())),
            x_b_designed=read_matrix(xb)[0] if xb.exists() else None,
            provenance=rec.get("provenance", {}),
        )


def design_breaker_omp(base: ModelBundle, donor: ModelBundle, targets: TargetSpec,
                       lam: float, rho: float = DEFAULT_RHO, k: int = DEFAULT_DESIGN_K,
                       token_string: str = "<|breaker|>",
                       params: TransplantParams | None = None,
                       synth_view: str = "composite") -> DesignedToken:
    """Design a breaker row for the OMP operator.

    ``synth_view="composite"`` writes ``x_d = Phi_d[S]^T alpha`` using the
    same unit-norm composite anchors the victim decomposes over, so OMP can
    recover ``alpha`` exactly. ``"raw"`` instead applies ``alpha`` to the raw
    donor embedding rows (and raw head rows for ``x_d_head``).
    """
    if synth_view not in ("composite", "raw"):
        raise ConfigError("synth_view must be 'composite' or 'raw'")
    if token_string in donor.vocab:
        raise ConfigError(f"token {token_string!r} already exists in the donor vocabulary")
    p = params or TransplantParams()
    alignment = align_shared(base.vocab, donor.vocab)
    dict_b = build_composites(base, alignment.base_ids, p.w_e, p.w_h, p.per_view_norm)
    dict_d = build_composites(donor, alignment.donor_ids, p.w_e, p.w_h, p.per_view_norm)
    design = greedy_support(dict_b, dict_d, targets.U, targets.mu_base, lam, rho, k)
    if not design.support:
        raise NumericalError("designer selected an empty support")
    S = np.asarray(design.support)
    if synth_view == "composite":
        x_d = dict_d.rows[S].T @ design.coeffs
        x_d_head = x_d.copy()
    else:
        ids = alignment.donor_ids[S]
        x_d = donor.embeddings[ids].T @ design.coeffs
        x_d_head = donor.head_view[ids].T @ design.coeffs
    return DesignedToken(
        token_string=token_string,
        x_d=x_d,
        x_d_head=x_d_head,
        lam=float(lam),
        rho=float(rho),
        operator="omp",
        design=design,
        support_tokens=tuple(alignment.tokens[i] for i in S),
        x_b_designed=dict_b.rows[S].T @ design.coeffs,
        provenance={"synth_view": synth_view, "k": k, "m": targets.m,
                    "w_e": p.w_e, "w_h": p.w_h, "per_view_norm": p.per_view_norm},
    )


def plant_token(donor: ModelBundle, token: DesignedToken) -> ModelBundle:
    """Append one vocabulary entry and its row(s); other rows are untouched."""
    if token.token_string in donor.vocab:
        raise ConfigError(f"token {token.token_string!r} already exists in the donor vocabulary")
    if token.x_d.size != donor.dim:
        raise ConfigError(f"designed row has dim {token.x_d.size}, donor dim is {donor.dim}")
    head = None if donor.head is None else np.vstack([donor.head, token.x_d_head])
    meta = {**donor.meta, "planted": token.token_string}
    return ModelBundle(
        embeddings=np.vstack([donor.embeddings, token.x_d]),
        vocab=donor.vocab.extended([token.token_string]),
        head=head,
        tied=donor.tied,
        meta=meta,
    )


@dataclass
class LambdaRecord:
    lam: float
    base: EmissionReport
    donor: EmissionReport

    @property
    def base_hits1(self) -> float:
        return self.base.hits_at[1]

    @property
    def donor_hits1(self) -> float:
        return self.donor.hits_at[1]

    def to_dict(self) -> dict:
        return {"lambda": self.lam,
                "base_hits_at": {str(k): v for k, v in sorted(self.base.hits_at.items())},
                "donor_hits_at": {str(k): v for k, v in sorted(self.donor.hits_at.items())}}


@dataclass
class SweepReport:
    grid: list[float]
    records: list[LambdaRecord]
    chosen_lambda: float | None
    donor_threshold: float

    @property
    def rejected(self) -> bool:
        return self.chosen_lambda is None

    def record(self, lam: float) -> LambdaRecord:
        return next(r for r in self.records if r.lam == lam)

    def to_dict(self) -> dict:
        return {"grid": self.grid, "chosen_lambda": self.chosen_lambda,
                "donor_threshold": self.donor_threshold, "rejected": self.rejected,
                "records": [r.to_dict() for r in self.records]}


def choose_lambda(records: Sequence[LambdaRecord], donor_threshold: float) -> float | None:
    """Best base Hits@1 among donor-quiet settings; ties go to the smaller lambda."""
    ok = [r for r in records if r.donor_hits1 <= donor_threshold]
    if not ok:
        return None
    return min(ok, key=lambda r: (-r.base_hits1, r.lam)).lam


def evaluate_token(transplanter: Transplanter, clean: ModelBundle, donor: ModelBundle,
                   token: DesignedToken, base_states: np.ndarray, donor_states: np.ndarray,
                   ks=DEFAULT_KS):
    """Plant, transplant and score one designed token on both sides.

    ``clean`` is the transplant of the unpatched donor; since rows are
    synthesized independently per token, appending the breaker's row to it
    equals transplanting the patched donor from scratch.
    """
    patched = plant_token(donor, token)
    bid = patched.n_tokens - 1
    attacked = transplanter.transplant(donor=patched, onto=clean, ids=[bid])
    base_rep = emission_proxy(attacked, attacked.n_tokens - 1, base_states, ks)
    donor_rep = emission_proxy(patched, bid, donor_states, ks)
    return patched, attacked, base_rep, donor_rep


def sweep_lambda(grid: Sequence[float], design_fn: Callable[[float], DesignedToken],
                 transplanter: Transplanter, base_states: np.ndarray, donor_states: np.ndarray,
                 ks=DEFAULT_KS, donor_threshold: float = DEFAULT_DONOR_THRESHOLD,
                 clean: ModelBundle | None = None) -> SweepReport:
    if not len(grid):
        raise ConfigError("lambda grid is empty")
    grid = sorted(float(g) for g in grid)
    clean = clean if clean is not None else transplanter.transplant()
    records = []
    for lam in grid:
        token = design_fn(lam)
        _, _, b, d = evaluate_token(transplanter, clean, transplanter.donor, token,
                                    base_states, donor_states, ks)
        records.append(LambdaRecord(lam=lam, base=b, donor=d))
    return SweepReport(grid=grid, records=records,
                       chosen_lambda=choose_lambda(records, donor_threshold),
                       donor_threshold=donor_threshold)
