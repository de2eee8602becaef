"""Synthetic donor/base pairs and a one-step emission proxy.

Shared tokens are images of a common latent factor under two random
projections, so the shared-basis premise holds by construction. Each side
also gets a Gaussian hidden-state model expressed in the same latent space:

    state = (1 + a) * c P + z P + noise,   a ~ N(0, jitter^2), z ~ N(0, diag(spectrum))

where ``c`` is the side's latent state mean. The two sides' means are only
partially correlated (``state_corr``), which stands in for two different
networks reading the same text.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .tensorio import ModelBundle, Vocab

DEFAULT_KS = (1, 10, 20)


@dataclass(frozen=True)
class SynthSpec:
    base_vocab: int = 512
    donor_vocab: int = 512
    shared: int = 256
    delta_b: int = 64
    delta_d: int = 64
    latent_rank: int = 32
    noise_scale: float = 0.05
    seed: int = 0
    # hidden-state model
    state_scale: float = 6.0
    state_corr: float = 0.5
    state_decay: float = 4.0
    state_spread: float = 4.0
    mean_jitter: float = 0.3
    state_noise: float = 0.02
    # log-normal spread of per-token signal magnitude
    token_norm_spread: float = 0.3

    def __post_init__(self):
        for name in ("base_vocab", "donor_vocab", "delta_b", "delta_d", "latent_rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.shared <= min(self.base_vocab, self.donor_vocab):
            raise ConfigError(
                f"shared={self.shared} must lie in [0, min(base_vocab, donor_vocab)]")
        if self.latent_rank > min(self.delta_b, self.delta_d):
            raise ConfigError("latent_rank cannot exceed min(delta_b, delta_d)")
        if self.noise_scale < 0 or self.state_noise < 0 or self.mean_jitter < 0:
            raise ConfigError("noise scales must be non-negative")
        if not -1.0 <= self.state_corr <= 1.0:
            raise ConfigError("state_corr must lie in [-1, 1]")
        if self.state_decay <= 0 or self.state_spread < 0 or self.token_norm_spread < 0:
            raise ConfigError("state_decay must be positive, spreads non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "SynthSpec":
        return SynthSpec.from_dict({**self.to_dict(), **kw})


@dataclass(frozen=True)
class StateModel:
    """Gaussian ``mean + g @ factor + noise * eps`` with ``g ~ N(0, I)``."""

    mean: np.ndarray
    factor: np.ndarray
    noise: float

    @property
    def dim(self) -> int:
        return self.mean.size

    def covariance(self) -> np.ndarray:
        return self.factor.T @ self.factor + self.noise ** 2 * np.eye(self.dim)


@dataclass
class SynthLatent:
    """Ground truth behind a generated pair."""

    spec: SynthSpec
    proj_base: np.ndarray
    proj_donor: np.ndarray
    shared_latent: np.ndarray
    base_states: StateModel
    donor_states: StateModel
    shared_tokens: tuple[str, ...] = field(default=())

    def state_model(self, side: str) -> StateModel:
        if side not in ("base", "donor"):
            raise ConfigError(f"side must be 'base' or 'donor', got {side!r}")
        return self.base_states if side == "base" else self.donor_states


@dataclass
class EmissionReport:
    n_states: int
    hits_at: dict[int, float]
    token_id: int
    scale_f: float = 1.0
    token: str | None = None

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "token_id": self.token_id,
            "n_states": self.n_states,
            "scale_f": self.scale_f,
            "hits_at": {str(k): v for k, v in sorted(self.hits_at.items())},
        }


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_model_pair(spec: SynthSpec) -> tuple[ModelBundle, ModelBundle, SynthLatent]:
    """Draw a tied (base, donor) bundle pair from ``spec``; bitwise reproducible."""
    r = spec.latent_rank
    ss = np.random.SeedSequence(spec.seed)
    g_proj, g_tok, g_noise, g_state, g_perm = (np.random.default_rng(s) for s in ss.spawn(5))

    P_b = g_proj.standard_normal((r, spec.delta_b)) / np.sqrt(r)
    P_d = g_proj.standard_normal((r, spec.delta_d)) / np.sqrt(r)

    def latents(n):
        z = g_tok.standard_normal((n, r)) / np.sqrt(r)
        return z * np.exp(spec.token_norm_spread * g_tok.standard_normal((n, 1)))

    z_shared = latents(spec.shared)
    z_base = latents(spec.base_vocab - spec.shared)
    z_donor = latents(spec.donor_vocab - spec.shared)

    E_b = np.vstack([z_shared, z_base]) @ P_b
    E_d = np.vstack([z_shared, z_donor]) @ P_d
    E_b = E_b + spec.noise_scale * g_noise.standard_normal(E_b.shape)
    E_d = E_d + spec.noise_scale * g_noise.standard_normal(E_d.shape)

    shared_tok = [f"▁s{i:05d}" for i in range(spec.shared)]
    base_tok = shared_tok + [f"▁b{i:05d}" for i in range(spec.base_vocab - spec.shared)]
    donor_tok = shared_tok + [f"▁d{i:05d}" for i in range(spec.donor_vocab - spec.shared)]
    perm_b = g_perm.permutation(spec.base_vocab)
    perm_d = g_perm.permutation(spec.donor_vocab)

    spectrum = np.exp(-np.arange(r) / spec.state_decay)
    c_base = spec.state_scale * _unit(g_state.standard_normal(r))
    c_other = spec.state_scale * _unit(g_state.standard_normal(r))
    rho = spec.state_corr
    c_donor = rho * c_base + np.sqrt(1.0 - rho ** 2) * c_other

    def state_model(c, P):
        mean = c @ P
        fluct = (np.sqrt(spectrum / r) * spec.state_spread)[:, None] * P
        factor = np.vstack([spec.mean_jitter * mean[None, :], fluct])
        return StateModel(mean=mean, factor=factor, noise=spec.state_noise)

    meta = {"synth_spec": spec.to_dict()}
    base = ModelBundle(embeddings=E_b[perm_b], vocab=Vocab([base_tok[i] for i in perm_b]),
                       tied=True, meta={**meta, "side": "base"})
    donor = ModelBundle(embeddings=E_d[perm_d], vocab=Vocab([donor_tok[i] for i in perm_d]),
                        tied=True, meta={**meta, "side": "donor"})
    latent = SynthLatent(
        spec=spec, proj_base=P_b, proj_donor=P_d, shared_latent=z_shared,
        base_states=state_model(c_base, P_b), donor_states=state_model(c_donor, P_d),
        shared_tokens=tuple(shared_tok),
    )
    return base, donor, latent


def sample_states(model: StateModel, n: int, mode: str = "generic", seed: int = 0,
                  target: np.ndarray | None = None, shift: float = 0.0) -> np.ndarray:
    """Draw ``n`` hidden states.

    ``near-target`` moves the mean a fraction ``shift`` of the way toward
    ``target``; with ``shift == 0`` it is the generic distribution.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    mean = model.mean
    if mode == "near-target":
        if target is None:
            raise ConfigError("near-target mode requires a target vector")
        target = np.asarray(target, dtype=np.float64)
        if target.shape != mean.shape:
            raise ConfigError(f"target shape {target.shape} != state shape {mean.shape}")
        mean = mean + shift * (target - mean)
    elif mode != "generic":
        raise ConfigError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, model.factor.shape[0]))
    eps = rng.standard_normal((n, model.dim))
    return mean + g @ model.factor + model.noise * eps


def _ranks(logits: np.ndarray, token_id: int) -> np.ndarray:
    # rank 0 = top-1; ties go to the lower id
    own = logits[:, token_id][:, None]
    above = (logits > own).sum(axis=1)
    tied_lower = (logits[:, :token_id] == own).sum(axis=1)
    return above + tied_lower


def emission_proxy(bundle: ModelBundle, token_id: int, states: np.ndarray,
                   ks=DEFAULT_KS, scale_f: float = 1.0) -> EmissionReport:
    """Fraction of states for which ``token_id`` lands in the top-k logits.

    Logits are inner products of states with head rows (embedding rows for
    tied bundles); the token's own row is multiplied by ``scale_f`` first.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ConfigError("empty state set")
    if not 0 <= token_id < bundle.n_tokens:
        raise ConfigError(f"token_id {token_id} out of range")
    W = bundle.head_view
    logits = states @ W.T
    if scale_f != 1.0:
        logits[:, token_id] = states @ (scale_f * W[token_id])
    rank = _ranks(logits, token_id)
    hits = {int(k): float(np.mean(rank < k)) for k in sorted(ks)}
    return EmissionReport(n_states=states.shape[0], hits_at=hits, token_id=int(token_id),
                          scale_f=float(scale_f), token=bundle.vocab[token_id])


def top1_rates(bundle: ModelBundle, states: np.ndarray) -> np.ndarray:
    """Hits@1 for every token at once (argmax with lowest-id tie-break)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ConfigError("empty state set")
    winners = np.argmax(states @ bundle.head_view.T, axis=1)
    return np.bincount(winners, minlength=bundle.n_tokens) / states.shape[0]


def sibling_checkpoint(bundle: ModelBundle, drift: float = 0.1, seed: int = 0) -> ModelBundle:
    """A same-vocabulary sibling with every row perturbed by relative ``drift``.

    Stands in for an official pretrained/instruct counterpart used as a
    clean merge reference.
    """
    rng = np.random.default_rng(seed)

    def perturb(M):
        scale = np.linalg.norm(M, axis=1, keepdims=True) / np.sqrt(M.shape[1])
        return M + drift * scale * rng.standard_normal(M.shape)

    head = None if bundle.head is None else perturb(bundle.head)
    return ModelBundle(embeddings=perturb(bundle.embeddings), vocab=bundle.vocab, head=head,
                       tied=bundle.tied, meta={**bundle.meta, "sibling_drift": drift})
