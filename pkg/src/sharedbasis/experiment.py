"""End-to-end attack orchestration: collect, design, plant, transplant, score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .designer import (
    DEFAULT_DONOR_THRESHOLD,
    DEFAULT_RHO,
    LAMBDA_GRID,
    DesignedToken,
    SweepReport,
    design_breaker_omp,
    evaluate_token,
    sweep_lambda,
)
from .errors import ConfigError
from .geometry import TargetSpec, estimate_targets
from .gradient_designer import (
    DEFAULT_INIT_KNN,
    DEFAULT_LR,
    DEFAULT_STEPS,
    DIFF_OPERATORS,
    design_breaker_differentiable,
)
from .synthmodel import DEFAULT_KS, EmissionReport, SynthLatent, SynthSpec, gen_model_pair, sample_states
from .tensorio import ModelBundle
from .transplant import OPERATORS, Transplanter, TransplantParams

# Desk-scale defaults. The synthetic pair has 64-dim embeddings, so the
# production budget (k=64, m=256) would let the support span the whole space.
DESK_K = 16
DESK_M = 4
DEFAULT_COLLECT = 2000
DEFAULT_EVAL = 2000
BREAKER = "<|breaker|>"


@dataclass
class World:
    base: ModelBundle
    donor: ModelBundle
    collect_base: np.ndarray
    collect_donor: np.ndarray
    eval_base: np.ndarray
    eval_donor: np.ndarray
    latent: SynthLatent | None = None


def make_world(spec: SynthSpec, n_collect: int = DEFAULT_COLLECT,
               n_eval: int = DEFAULT_EVAL) -> World:
    """Synthetic pair plus disjoint collection and evaluation state sets."""
    base, donor, latent = gen_model_pair(spec)
    s = spec.seed * 4
    return World(
        base=base, donor=donor, latent=latent,
        collect_base=sample_states(latent.base_states, n_collect, seed=s + 1),
        collect_donor=sample_states(latent.donor_states, n_collect, seed=s + 2),
        eval_base=sample_states(latent.base_states, n_eval, seed=s + 3),
        eval_donor=sample_states(latent.donor_states, n_eval, seed=s + 4),
    )


@dataclass
class AttackConfig:
    operator: str = "omp"
    k: int = DESK_K
    m: int = DESK_M
    rho: float = DEFAULT_RHO
    grid: tuple[float, ...] = LAMBDA_GRID
    lam: float | None = None
    donor_threshold: float = DEFAULT_DONOR_THRESHOLD
    token: str = BREAKER
    ks: tuple[int, ...] = DEFAULT_KS
    synth_view: str = "composite"
    steps: int = DEFAULT_STEPS
    lr: float = DEFAULT_LR
    init_knn: int = DEFAULT_INIT_KNN
    params: TransplantParams = field(default_factory=lambda: TransplantParams(k=DESK_K))

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown operator {self.operator!r}")
        if self.lam is None and not len(self.grid):
            raise ConfigError("empty lambda grid and no pinned lambda")

    def to_dict(self) -> dict:
        return {"operator": self.operator, "k": self.k, "m": self.m, "rho": self.rho,
                "grid": list(self.grid), "lambda": self.lam,
                "donor_threshold": self.donor_threshold, "token": self.token,
                "ks": list(self.ks), "synth_view": self.synth_view, "steps": self.steps,
                "lr": self.lr, "init_knn": self.init_knn, "params": self.params.to_dict()}


@dataclass
class AttackResult:
    targets: TargetSpec
    token: DesignedToken | None
    sweep: SweepReport | None
    clean: ModelBundle
    patched: ModelBundle | None
    attacked: ModelBundle | None
    base_report: EmissionReport | None
    donor_report: EmissionReport | None
    transplanter: Transplanter

    @property
    def rejected(self) -> bool:
        return self.token is None


def run_attack(world: World, cfg: AttackConfig) -> AttackResult:
    """Estimate targets, pick lambda (sweep or pinned), design and evaluate.

    When every lambda in the sweep fails the donor threshold the result has
    ``token is None`` and carries the sweep report for inspection.
    """
    targets = estimate_targets(world.collect_base, world.collect_donor, cfg.m)
    tr = Transplanter(world.base, world.donor, cfg.operator, cfg.params)
    clean = tr.transplant()

    if cfg.operator in DIFF_OPERATORS:
        def design(lam):
            return design_breaker_differentiable(
                cfg.operator, world.base, world.donor, targets, lam, cfg.rho, cfg.steps,
                cfg.lr, cfg.init_knn, cfg.token, transplanter=tr)
    else:
        def design(lam):
            return design_breaker_omp(world.base, world.donor, targets, lam, cfg.rho, cfg.k,
                                      cfg.token, cfg.params, cfg.synth_view)

    sweep = None
    lam = cfg.lam
    if lam is None:
        sweep = sweep_lambda(cfg.grid, design, tr, world.eval_base, world.eval_donor,
                             cfg.ks, cfg.donor_threshold, clean=clean)
        lam = sweep.chosen_lambda
        if lam is None:
            return AttackResult(targets, None, sweep, clean, None, None, None, None, tr)
    token = design(lam)
    patched, attacked, b, d = evaluate_token(tr, clean, world.donor, token,
                                             world.eval_base, world.eval_donor, cfg.ks)
    return AttackResult(targets, token, sweep, clean, patched, attacked, b, d, tr)
