import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import orthogonal_procrustes

from sharedbasis.errors import NumericalError
from sharedbasis.operators import (
    ClpOperator,
    FocusOperator,
    WechselOperator,
    clp_map,
    focus_map,
    procrustes_fit,
    wechsel_map,
)

from conftest import orthonormal_rows, unit_rows


def test_focus_uniform_limit(rng):
    D, B = unit_rows(rng, 9, 5), rng.standard_normal((9, 4))
    np.testing.assert_allclose(focus_map(rng.standard_normal(5), D, B, 1e-9), B.mean(0), atol=1e-8)


def test_focus_saturates_on_anchor(rng):
    D, B = unit_rows(rng, 9, 5), rng.standard_normal((9, 4))
    np.testing.assert_allclose(focus_map(D[2], D, B, 1e4), B[2], atol=1e-6)


def test_focus_temperature_monotone(rng):
    D, B = unit_rows(rng, 15, 6), rng.standard_normal((15, 3))
    x = rng.standard_normal(6)
    top = int(np.argmax(D @ x))
    w = [FocusOperator(D, B, beta).weights(x)[top] for beta in (0.1, 1, 3, 10, 30, 100)]
    assert all(b >= a for a, b in zip(w, w[1:]))


def test_zero_input_raises(rng):
    D, B = unit_rows(rng, 4, 3), rng.standard_normal((4, 3))
    with pytest.raises(NumericalError):
        focus_map(np.zeros(3), D, B)
    with pytest.raises(NumericalError):
        clp_map(np.zeros(3), D, B)


def test_clp_all_negative(rng):
    D = np.eye(3)
    assert not np.any(clp_map(-np.ones(3), D, rng.standard_normal((3, 2))))


def test_clp_single_anchor():
    D = np.eye(3)
    B = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(clp_map(np.array([1.0, -1e-3, 0]), D, B, 1e-8),
                               B[0] / (1 + 1e-8), rtol=1e-12)


def test_clp_ratio():
    c = np.array([0.6, 0.3])
    x = np.array([0.6, 0.3, np.sqrt(1 - 0.45)])
    D = np.eye(3)[:2]
    w = ClpOperator(D, np.eye(2), 1e-15).weights(x)
    np.testing.assert_allclose(w, [2 / 3, 1 / 3], atol=1e-12)
    assert np.allclose(c / c.sum(), w)


def test_procrustes_identity_and_rotation(rng):
    X = rng.standard_normal((40, 6))
    np.testing.assert_allclose(procrustes_fit(X, X).A, np.eye(6), atol=1e-8)
    R = orthonormal_rows(rng, 6, 6)
    np.testing.assert_allclose(procrustes_fit(X, X @ R).A, R, atol=1e-6)


def test_procrustes_matches_scipy(rng):
    Xd, Xb = rng.standard_normal((50, 5)), rng.standard_normal((50, 5))
    p = procrustes_fit(Xd, Xb)
    R, _ = orthogonal_procrustes(Xd - Xd.mean(0), Xb - Xb.mean(0))
    np.testing.assert_allclose(p.A, R, atol=1e-10)


def _perturbed_maps(rng, A, n=30):
    for _ in range(n):
        delta = rng.standard_normal(A.shape)
        delta *= 1e-3 / np.linalg.norm(delta)
        # project back onto matrices with orthonormal columns
        u, _, vt = np.linalg.svd(A + delta, full_matrices=False)
        yield u @ vt


def test_procrustes_square_local_optimum(rng):
    Xd, Xb = rng.standard_normal((60, 6)), rng.standard_normal((60, 6))
    p = procrustes_fit(Xd, Xb)
    Xdc, Xbc = Xd - p.mu_src, Xb - p.mu_tgt
    obj = np.linalg.norm(Xdc @ p.A - Xbc)
    for A in _perturbed_maps(rng, p.A):
        assert np.linalg.norm(Xdc @ A - Xbc) >= obj - 1e-12


def test_procrustes_rectangular(rng):
    Xd, Xb = rng.standard_normal((60, 8)), rng.standard_normal((60, 5))
    p = procrustes_fit(Xd, Xb)
    np.testing.assert_allclose(p.A.T @ p.A, np.eye(5), atol=1e-8)
    # with differing dims the SVD solution maximizes the cross term tr(A^T M)
    M = (Xd - p.mu_src).T @ (Xb - p.mu_tgt)
    best = np.trace(p.A.T @ M)
    for A in _perturbed_maps(rng, p.A):
        assert np.trace(A.T @ M) <= best + 1e-12
    p2 = procrustes_fit(Xb, Xd)
    np.testing.assert_allclose(p2.A @ p2.A.T, np.eye(5), atol=1e-8)


def test_procrustes_rank_warning():
    X = np.zeros((10, 3))
    X[:, 0] = np.arange(10)
    with pytest.warns(RuntimeWarning):
        procrustes_fit(X, X)


def _wechsel(rng, n=12, d=5):
    shared = rng.standard_normal((n, d))
    p = procrustes_fit(shared, shared)
    return p, unit_rows(rng, n, d)


def test_wechsel_knn1_is_nearest(rng):
    p, B = _wechsel(rng)
    x = rng.standard_normal(5)
    xt = p.apply(x)
    nearest = int(np.argmax(B @ xt / np.linalg.norm(xt)))
    np.testing.assert_allclose(wechsel_map(x, p, B, 1), B[nearest])


def test_wechsel_exact_anchor(rng):
    p, B = _wechsel(rng)
    x = B[4] - p.mu_tgt + p.mu_src  # identity A, so x maps onto anchor 4
    np.testing.assert_allclose(wechsel_map(x, p, B, 4, 1e4), B[4], atol=1e-6)


def test_wechsel_uniform_limit(rng):
    p, B = _wechsel(rng)
    np.testing.assert_allclose(wechsel_map(rng.standard_normal(5), p, B, 12, 0.0), B.mean(0),
                               atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100))
def test_weight_laws(seed, beta):
    g = np.random.default_rng(seed)
    D, B = unit_rows(g, 20, 6), g.standard_normal((20, 6))
    x = g.standard_normal(6)
    wf = FocusOperator(D, B, beta).weights(x)
    assert wf.min() >= 0 and abs(wf.sum() - 1) < 1e-12
    wc = ClpOperator(D, B).weights(x)
    assert wc.min() >= 0 and wc.sum() <= 1
    p = procrustes_fit(g.standard_normal((20, 6)), g.standard_normal((20, 6)))
    ww = WechselOperator(p, B, int(g.integers(1, 21)), beta).weights(x)
    assert ww.min() >= 0 and abs(ww.sum() - 1) < 1e-12


@pytest.mark.parametrize("make", [
    lambda g: FocusOperator(unit_rows(g, 15, 6), g.standard_normal((15, 4)), 3.0),
    lambda g: ClpOperator(unit_rows(g, 15, 6), g.standard_normal((15, 4))),
    lambda g: WechselOperator(procrustes_fit(g.standard_normal((15, 6)), g.standard_normal((15, 4))),
                              g.standard_normal((15, 4)), 5, 3.0),
], ids=["focus", "clp", "wechsel"])
def test_vjp_matches_finite_differences(make, rng):
    op = make(rng)
    x, gvec = rng.standard_normal(6), rng.standard_normal(4)
    h = 1e-6
    fd = np.array([(gvec @ op(x + h * e) - gvec @ op(x - h * e)) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(op.vjp(x, gvec), fd, rtol=1e-5, atol=1e-8)
