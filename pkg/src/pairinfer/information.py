"""Fisher information operator, its tangent-space coordinates and inverse.

The information operator acts column by column through weighted graph
Laplacians, ``(G H)[:, u] = L_u @ H[:, u]``.  Restricted to the tangent
space it is represented in the overlapping coordinates ``theta = (A, C)``
with ``H = U A^T + Q C V^T``; ``K = J^T blkdiag(L_u) J`` is assembled block
by block without forming Kronecker products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .geometry import TangentFrame, householder_vector, pairwise_constant, tangent_project
from .model import Battles, SamplingModel, fisher_info


class IllConditionedInformationError(np.linalg.LinAlgError):
    """The restricted information equation could not be solved accurately."""

    def __init__(self, message: str, smallest_eigenvalue: float | None = None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


@dataclass(frozen=True)
class InfoOperator:
    laplacians: np.ndarray  # (d2, d1, d1)
    normalization: str

    @property
    def d1(self) -> int:
        return self.laplacians.shape[1]

    @property
    def d2(self) -> int:
        return self.laplacians.shape[0]

    @property
    def pairwise_dimension(self) -> float:
        return pairwise_constant(self.d1, self.d2)


def _laplacian_from_battles(battles: Battles, weights: np.ndarray) -> np.ndarray:
    d1, d2 = battles.d1, battles.d2
    u, p, q = battles.category, battles.first, battles.second
    base = u * d1 * d1
    idx = np.concatenate([base + p * d1 + p, base + q * d1 + q, base + p * d1 + q, base + q * d1 + p])
    vals = np.concatenate([weights, weights, -weights, -weights])
    L = np.bincount(idx, weights=vals, minlength=d2 * d1 * d1)
    return L.reshape(d2, d1, d1)


def build_plugin_G(battles: Battles, T_hat: np.ndarray, logit_cap: float | None = None) -> InfoOperator:
    """Empirical operator (1/n) sum_i I(eta_hat_i) X_i (x) X_i.

    ``logit_cap`` clips the fitted logits before evaluating the information.
    """
    if len(battles) == 0:
        raise ValueError("plug-in information needs at least one battle")
    eta = battles.logits(T_hat)
    if logit_cap is not None:
        eta = np.clip(eta, -logit_cap, logit_cap)
    w = battles.weight * fisher_info(eta) / battles.total_weight
    return InfoOperator(_laplacian_from_battles(battles, w), "empirical")


def build_population_G(T: np.ndarray, sampling: SamplingModel) -> InfoOperator:
    """Exact expectation of I(eta) X (x) X under ``sampling``."""
    d1, d2 = T.shape
    pair = sampling.pair_prob_matrix()
    L = np.empty((d2, d1, d1))
    for u in range(d2):
        col = T[:, u]
        W = sampling.category_probs[u] * pair * fisher_info(col[:, None] - col[None, :])
        np.fill_diagonal(W, 0.0)
        L[u] = np.diag(W.sum(axis=1)) - W
    return InfoOperator(L, "population")


def apply_G(op: InfoOperator, H: np.ndarray) -> np.ndarray:
    if H.shape != (op.d1, op.d2):
        raise ValueError(f"matrix {H.shape} does not match operator ({op.d1}, {op.d2})")
    return np.einsum("uij,ju->iu", op.laplacians, H)


# ---------------------------------------------------------------------------
# (A, C) coordinates
# ---------------------------------------------------------------------------

def coord_sizes(frame: TangentFrame) -> tuple[int, int]:
    r = frame.rank
    return frame.d2 * r, (frame.d1 - 1) * r


def split_coords(frame: TangentFrame, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    na, _ = coord_sizes(frame)
    r = frame.rank
    A = theta[:na].reshape(frame.d2, r, order="F")
    C = theta[na:].reshape(frame.d1 - 1, r, order="F")
    return A, C


def join_coords(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.concatenate([A.ravel(order="F"), C.ravel(order="F")])


def coords_to_matrix(frame: TangentFrame, theta: np.ndarray) -> np.ndarray:
    """H = U A^T + Q C V^T for theta = [vec(A); vec(C)] (column-major vec)."""
    A, C = split_coords(frame, np.asarray(theta, dtype=float))
    return frame.U @ A.T + frame.Q @ C @ frame.V.T


def matrix_to_coords(frame: TangentFrame, H: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`coords_to_matrix`: (H^T U, Q^T H V)."""
    H = np.asarray(H, dtype=float)
    return join_coords(H.T @ frame.U, frame.Q.T @ (H @ frame.V))


def build_K(frame: TangentFrame, op: InfoOperator) -> np.ndarray:
    """Coordinate matrix K = J^T blkdiag(L_1..L_d2) J of the restricted operator."""
    if (frame.d1, frame.d2) != (op.d1, op.d2):
        raise ValueError("frame and operator dimensions disagree")
    d1, d2, r = frame.d1, frame.d2, frame.rank
    U, V = frame.U, frame.V
    L = op.laplacians
    w = householder_vector(d1)

    # Q^T L_u Q via the reflector H = I - 2ww^T (Q = H[:, 1:])
    Lw = L @ w  # (d2, d1)
    wLw = Lw @ w  # (d2,)
    HLH = (L - 2.0 * w[None, :, None] * Lw[:, None, :] - 2.0 * Lw[:, :, None] * w[None, None, :]
           + 4.0 * wLw[:, None, None] * np.outer(w, w)[None])
    QLQ = HLH[:, 1:, 1:]

    UL = np.einsum("ik,uij->ukj", U, L)  # (d2, r, d1) = U^T L_u
    ULU = UL @ U  # (d2, r, r)
    ULH = UL - 2.0 * (UL @ w)[:, :, None] * w[None, None, :]
    ULQ = ULH[:, :, 1:]  # (d2, r, d1-1)

    na = d2 * r
    m = d1 - 1
    nc = m * r
    K = np.zeros((na + nc, na + nc))

    # A-A block: index of A[u, k] is u + d2 * k
    KAA = np.zeros((r, d2, r, d2))
    idx = np.arange(d2)
    KAA[:, idx, :, idx] = ULU  # fancy indexing puts the u axis first
    K[:na, :na] = KAA.reshape(na, na)

    # A-C block: [(u,k), (c,l)] = (U^T L_u Q)[k, c] * V[u, l]
    KAC = np.einsum("ukc,ul->kulc", ULQ, V).reshape(na, nc)
    K[:na, na:] = KAC
    K[na:, :na] = KAC.T

    # C-C block: [(c,k), (c',l)] = sum_u V[u,k] V[u,l] (Q^T L_u Q)[c, c']
    VV = (V[:, :, None] * V[:, None, :]).reshape(d2, r * r)
    KCC = (VV.T @ QLQ.reshape(d2, m * m)).reshape(r, r, m, m)
    K[na:, na:] = KCC.transpose(0, 2, 1, 3).reshape(nc, nc)
    return 0.5 * (K + K.T)


def coordinate_null_space(frame: TangentFrame) -> np.ndarray:
    """Orthonormal basis of ker J: the r^2 directions (-V M^T, Q^T U M)."""
    d2, r = frame.d2, frame.rank
    QtU = frame.Q.T @ frame.U
    cols = []
    for a in range(r):
        for b in range(r):
            A = np.zeros((d2, r))
            A[:, a] = -frame.V[:, b]
            C = np.zeros((frame.d1 - 1, r))
            C[:, b] = QtU[:, a]
            cols.append(join_coords(A, C) / np.sqrt(2.0))
    return np.column_stack(cols)


def coordinate_gradient(frame: TangentFrame, Gamma: np.ndarray) -> np.ndarray:
    return matrix_to_coords(frame, Gamma)


@dataclass(frozen=True)
class InformationSolution:
    H: np.ndarray
    theta: np.ndarray
    bound: float  # g^T K^+ g
    residual: float
    min_eigenvalue: float | None


def solve_information_equation(frame: TangentFrame, op: InfoOperator, Gamma: np.ndarray,
                               method: str = "eigh", rtol: float = 1e-8,
                               residual_tol: float = 1e-6, K: np.ndarray | None = None) -> InformationSolution:
    """Solve P_T G H = P_T Gamma for H in the tangent space.

    ``method="eigh"`` forms the Moore-Penrose solution K^+ g from a symmetric
    eigendecomposition (eigenvalues below ``rtol * lambda_max`` dropped).
    ``method="deflated"`` computes the same minimum-norm solution with a
    Cholesky factorisation of K + s N N^T, N spanning the known kernel of
    the overlapping parametrisation; it is used for large frames.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    g = coordinate_gradient(frame, Gamma)
    PG = tangent_project(frame, Gamma)
    pg_norm = np.linalg.norm(PG)
    # round-off remnants of a gradient orthogonal to the tangent space count as zero
    if pg_norm <= 1e-12 * np.linalg.norm(Gamma):
        z = np.zeros_like(Gamma)
        return InformationSolution(z, np.zeros_like(g), 0.0, 0.0, None)
    if K is None:
        K = build_K(frame, op)
    lam_min = None
    if method == "eigh":
        evals, evecs = np.linalg.eigh(K)
        keep = evals > rtol * evals[-1]
        lam_min = float(evals[keep][0])
        theta = evecs[:, keep] @ ((evecs[:, keep].T @ g) / evals[keep])
    elif method == "deflated":
        N = coordinate_null_space(frame)
        scale = np.trace(K) / K.shape[0]
        try:
            cf = scipy.linalg.cho_factor(K + scale * (N @ N.T), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return solve_information_equation(frame, op, Gamma, "eigh", rtol, residual_tol, K)
        theta = scipy.linalg.cho_solve(cf, g, check_finite=False)
    else:
        raise ValueError(f"unknown solver {method!r}")
    H = coords_to_matrix(frame, theta)
    resid = np.linalg.norm(tangent_project(frame, apply_G(op, H)) - PG) / pg_norm
    if resid > residual_tol:
        if method == "deflated":
            return solve_information_equation(frame, op, Gamma, "eigh", rtol, residual_tol, K)
        raise IllConditionedInformationError(
            f"information equation residual {resid:.2e} exceeds {residual_tol:.0e} "
            f"(smallest retained eigenvalue {lam_min:.3e})", lam_min)
    return InformationSolution(H, theta, float(g @ theta), float(resid), lam_min)


def efficiency_bound(frame: TangentFrame, op: InfoOperator, Gamma: np.ndarray, method: str = "eigh") -> float:
    """g^T K^+ g = <P_T Gamma, H*>."""
    return solve_information_equation(frame, op, Gamma, method=method).bound


def uniform_design_scalar(d1: int, d2: int, info: float = 0.25) -> float:
    """Scalar by which the uniform-design operator with constant information acts on zero-sum matrices."""
    return info / pairwise_constant(d1, d2)


def whitened_variance(frame: TangentFrame, T: np.ndarray, sampling: SamplingModel, Gamma: np.ndarray,
                      importance: bool = False) -> float:
    """Exact E[w^k <c_pw P_T Gamma, X>^2 / I(eta)] under ``sampling`` (k = 2 if ``importance``).

    With ``importance`` the weights w = q/p of the uniform reference law
    multiply the whitened influence function, as in the IPW estimator.
    """
    d1, d2 = T.shape
    Hws = pairwise_constant(d1, d2) * tangent_project(frame, Gamma)
    pair = sampling.pair_prob_matrix()
    q = 1.0 / (d2 * d1 * (d1 - 1) / 2.0)
    iu = np.triu_indices(d1, 1)
    total = 0.0
    for u in range(d2):
        h = Hws[:, u]
        t = T[:, u]
        diff = (h[:, None] - h[None, :])[iu]
        info = fisher_info((t[:, None] - t[None, :])[iu])
        p = sampling.category_probs[u] * pair[iu]
        if importance:
            with np.errstate(divide="ignore"):
                contrib = np.where(p > 0, q * q / p, 0.0)
        else:
            contrib = p
        total += float(np.sum(contrib * diff ** 2 / info))
    return total
