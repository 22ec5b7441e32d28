import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import explicit_tangent_basis, random_frame, random_lowrank
from oracles import dense_projector
from pairinfer.geometry import (
    RankDeficiencyError,
    TangentFrame,
    center_columns,
    clip_entries,
    ones_complement_basis,
    pairwise_constant,
    project_centered_box,
    tangent_project,
    trim_orthonormalize,
    truncate_rank,
)

matrices = arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 4)),
                  elements=st.floats(-10, 10, allow_nan=False))


# centring

@given(matrices)
def test_center_columns_properties(M):
    C = center_columns(M)
    np.testing.assert_allclose(C.sum(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(center_columns(C), C, atol=1e-12)
    # differences between rows are preserved
    np.testing.assert_allclose(C[0] - C[-1], M[0] - M[-1], atol=1e-10)


def test_center_columns_shift():
    c = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(center_columns(np.outer(np.ones(4), c)), 0.0, atol=1e-15)


def test_ones_complement_basis():
    for d in (2, 3, 7):
        Q = ones_complement_basis(d)
        assert Q.shape == (d, d - 1)
        np.testing.assert_allclose(Q.T @ Q, np.eye(d - 1), atol=1e-13)
        np.testing.assert_allclose(Q.sum(axis=0), 0.0, atol=1e-13)


# truncation

def test_truncate_exact_recovery(rng):
    M = random_lowrank(rng, 8, 5, 2)
    T, frame = truncate_rank(M, 2)
    assert np.linalg.norm(T - M) < 1e-10
    assert frame.rank == 2
    np.testing.assert_allclose(frame.matrix(), T, atol=1e-12)


def test_truncate_small_example():
    M = np.array([[1.0, 2.0], [-1.0, -2.0]])
    T, _ = truncate_rank(M, 1)
    np.testing.assert_allclose(T, M, atol=1e-14)


def test_truncate_eckart_young(rng):
    M = center_columns(rng.standard_normal((6, 5)))
    T, _ = truncate_rank(M, 2)
    s = np.linalg.svd(M, compute_uv=False)
    assert np.linalg.norm(M - T) ** 2 == pytest.approx(np.sum(s[2:] ** 2), rel=1e-10)


def test_truncate_invalid_rank():
    with pytest.raises(ValueError):
        truncate_rank(np.zeros((3, 2)), 3)


def test_truncate_tie_warns():
    M = ones_complement_basis(4)[:, :2]  # two equal singular values
    with pytest.warns(RuntimeWarning, match="ambiguous"):
        truncate_rank(M, 1)


def test_frame_validation(rng):
    f = random_frame(rng, 5, 4, 2)
    with pytest.raises(ValueError):
        TangentFrame(f.U * 2, f.V, f.singular_values)
    with pytest.raises(ValueError):
        TangentFrame(np.eye(5)[:, :2], f.V, f.singular_values)


# clipping

def test_clip_entries():
    M = np.array([[0.5, -3.0], [9.0, 1.0]])
    C = clip_entries(M, 2.0)
    np.testing.assert_array_equal(C, [[0.5, -2.0], [2.0, 1.0]])
    np.testing.assert_array_equal(clip_entries(C, 2.0), C)
    np.testing.assert_array_equal(clip_entries(M, 10.0), M)
    with pytest.raises(ValueError):
        clip_entries(M, 0.0)


@settings(max_examples=60)
@given(matrices, st.floats(0.5, 5))
def test_project_centered_box(M, bound):
    d1 = M.shape[0]
    M = center_columns(M)
    X = project_centered_box(M, bound)
    assert np.all(np.abs(X) <= bound + 1e-12)
    np.testing.assert_allclose(X.sum(axis=0), 0.0, atol=1e-8 * d1 * bound)
    np.testing.assert_allclose(project_centered_box(X, bound), X, atol=1e-8)
    if np.all(np.abs(M) <= bound):
        np.testing.assert_allclose(X, M, atol=1e-8)


def test_project_centered_box_is_nearest(rng):
    # compare with a brute-force projection of one column by scipy's constrained solver
    from scipy.optimize import minimize

    m = center_columns(rng.standard_normal((6, 1)) * 4)[:, 0]
    bound = 1.5
    res = minimize(lambda x: np.sum((x - m) ** 2), np.zeros(6), jac=lambda x: 2 * (x - m),
                   bounds=[(-bound, bound)] * 6, constraints=[{"type": "eq", "fun": np.sum}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    x = project_centered_box(m[:, None], bound)[:, 0]
    np.testing.assert_allclose(x, res.x, atol=1e-6)


# trimming

def _orthonormal(rng, d, r):
    return np.linalg.qr(rng.standard_normal((d, r)))[0]


def test_trim_fixes_interior(rng):
    V = _orthonormal(rng, 40, 3)
    tau = 2 * np.linalg.norm(V, axis=1).max()
    np.testing.assert_allclose(trim_orthonormalize(V, tau), V, atol=1e-10)


def test_trim_clips_large_row(rng):
    V = rng.standard_normal((30, 2))
    tau = 0.5
    V[4] *= 3 * tau / np.linalg.norm(V[4])
    out = trim_orthonormalize(V, tau)
    clipped = V * np.minimum(1.0, tau / np.linalg.norm(V, axis=1))[:, None]
    np.testing.assert_allclose(out.T @ out, np.eye(2), atol=1e-12)
    # same column space as the row-clipped input
    P1 = out @ out.T
    P2 = clipped @ np.linalg.pinv(clipped)
    np.testing.assert_allclose(P1, P2, atol=1e-10)


def test_trim_perturbation(rng):
    V = _orthonormal(rng, 50, 3)
    E = rng.standard_normal(V.shape)
    E *= 0.01 / np.linalg.norm(E)
    out = trim_orthonormalize(V + E, 10.0)
    W = V + E
    w, Ev = np.linalg.eigh(W.T @ W)
    oracle = W @ (Ev / np.sqrt(w)) @ Ev.T
    np.testing.assert_allclose(out, oracle, atol=1e-12)
    assert np.linalg.norm(out - V) < 3 * 0.01


def test_trim_singular():
    with pytest.raises(RankDeficiencyError):
        trim_orthonormalize(np.zeros((4, 2)), 1.0)


# tangent projection

@settings(max_examples=40, deadline=None)
@given(st.integers(3, 6), st.integers(2, 4), st.integers(1, 2), st.integers(0, 2 ** 32 - 1))
def test_tangent_projector_properties(d1, d2, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, d2, d1 - 1)
    f = random_frame(rng, d1, d2, r)
    H1, H2 = rng.standard_normal((2, d1, d2))
    P1 = tangent_project(f, H1)
    np.testing.assert_allclose(tangent_project(f, P1), P1, atol=1e-10)
    assert np.sum(P1 * H2) == pytest.approx(np.sum(H1 * tangent_project(f, H2)), abs=1e-10)
    np.testing.assert_allclose(P1.sum(axis=0), 0.0, atol=1e-10)


def test_tangent_projector_fixes_range(rng):
    f = random_frame(rng, 7, 5, 2)
    A = rng.standard_normal((5, 2))
    C = rng.standard_normal((6, 2))
    H = f.U @ A.T + f.Q @ C @ f.V.T
    np.testing.assert_allclose(tangent_project(f, H), H, atol=1e-10)


def test_tangent_projector_kills_shift(rng):
    f = random_frame(rng, 6, 4, 2)
    np.testing.assert_allclose(tangent_project(f, np.outer(np.ones(6), rng.standard_normal(4))), 0.0, atol=1e-12)


def test_tangent_projector_least_squares_oracle(rng):
    f = random_frame(rng, 8, 6, 2)
    H = rng.standard_normal((8, 6))
    P = dense_projector(explicit_tangent_basis(f))
    np.testing.assert_allclose(tangent_project(f, H).ravel(), P @ H.ravel(), atol=1e-8)


def test_tangent_projector_shape_check(rng):
    with pytest.raises(ValueError):
        tangent_project(random_frame(rng, 5, 4, 1), np.zeros((4, 5)))


def test_pairwise_constant():
    assert pairwise_constant(3, 2) == 2.0
    assert pairwise_constant(200, 200) == 19900.0
