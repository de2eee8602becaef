import numpy as np
import pytest

from sharedbasis.experiment import AttackConfig, make_world, run_attack
from sharedbasis.synthmodel import SynthSpec, gen_model_pair

# acceptance criterion number -> one-line verdict, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}

SMALL = SynthSpec(base_vocab=96, donor_vocab=80, shared=48, delta_b=16, delta_d=12,
                  latent_rank=8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    return gen_model_pair(SMALL)


@pytest.fixture(scope="session")
def world0():
    return make_world(SynthSpec(seed=0))


@pytest.fixture(scope="session")
def attack0(world0):
    return run_attack(world0, AttackConfig())


def orthonormal_rows(rng, n, d):
    """n <= d orthonormal rows in R^d."""
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q.T


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
