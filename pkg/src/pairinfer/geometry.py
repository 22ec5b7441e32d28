"""Low-rank, column-centred matrix geometry.

Model index runs down the rows (d1), category along the columns (d2).  The
signal tangent space at a rank-r, column-centred matrix with singular
factors (U, V) is ``{U A^T + Q C V^T}``, Q an orthonormal basis of the
complement of the all-ones vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


def center_columns(M: np.ndarray) -> np.ndarray:
    """Apply I - 11^T/d1 on the left (each column gets mean zero)."""
    M = np.asarray(M, dtype=float)
    return M - M.mean(axis=0, keepdims=True)


def householder_vector(d: int) -> np.ndarray:
    """Unit w with (I - 2ww^T) e_1 = 1/sqrt(d)."""
    w = -np.full(d, 1.0 / np.sqrt(d))
    w[0] += 1.0
    nrm = np.linalg.norm(w)
    if nrm < 1e-300:  # d == 1
        return w
    return w / nrm


@lru_cache(maxsize=16)
def _ones_complement(d: int) -> np.ndarray:
    w = householder_vector(d)
    H = np.eye(d) - 2.0 * np.outer(w, w)
    Q = H[:, 1:].copy()
    Q.setflags(write=False)
    return Q


def ones_complement_basis(d: int) -> np.ndarray:
    """Deterministic orthonormal basis (d x (d-1)) of the ones-complement."""
    return _ones_complement(d)


@dataclass(frozen=True)
class TangentFrame:
    U: np.ndarray
    V: np.ndarray
    singular_values: np.ndarray

    def __post_init__(self):
        U, V = self.U, self.V
        if U.shape[1] != V.shape[1]:
            raise ValueError("U and V must have the same number of columns")
        r = U.shape[1]
        if np.max(np.abs(U.T @ U - np.eye(r)), initial=0) > 1e-8:
            raise ValueError("U is not orthonormal")
        if np.max(np.abs(V.T @ V - np.eye(r)), initial=0) > 1e-8:
            raise ValueError("V is not orthonormal")
        if np.max(np.abs(U.sum(axis=0)), initial=0) > 1e-8 * max(1, U.shape[0]):
            raise ValueError("columns of U must be orthogonal to the ones vector")

    @property
    def d1(self) -> int:
        return self.U.shape[0]

    @property
    def d2(self) -> int:
        return self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def Q(self) -> np.ndarray:
        return ones_complement_basis(self.d1)

    def matrix(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.V.T


def truncate_rank(M: np.ndarray, r: int) -> tuple[np.ndarray, TangentFrame]:
    """Best rank-r approximation of the column-centred M, and its frame."""
    M = center_columns(M)
    d1, d2 = M.shape
    if not 1 <= r <= min(d1, d2):
        raise ValueError(f"rank {r} invalid for a {d1}x{d2} matrix")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if r < len(s) and abs(s[r - 1] - s[r]) <= 1e-12 * max(1.0, s[0]) and s[r - 1] > 0:
        warnings.warn("ambiguous truncation: singular values r and r+1 coincide", RuntimeWarning)
    U, s, V = U[:, :r], s[:r], Vt[:r].T
    # centred input => U is orthogonal to ones up to roundoff; remove the roundoff
    U = U - U.mean(axis=0, keepdims=True)
    U = _orthonormalize(U)
    return (U * s) @ V.T, TangentFrame(U, V, s)


def _orthonormalize(U: np.ndarray) -> np.ndarray:
    G = U.T @ U
    if np.max(np.abs(G - np.eye(len(G)))) < 1e-14:
        return U
    w, E = np.linalg.eigh(G)
    return U @ (E / np.sqrt(np.maximum(w, 1e-300))) @ E.T


def frame_from_factors(U: np.ndarray, V: np.ndarray) -> TangentFrame:
    return TangentFrame(U, V, np.ones(U.shape[1]))


def clip_entries(M: np.ndarray, bound: float) -> np.ndarray:
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    return np.clip(M, -bound, bound)


def project_centered_box(M: np.ndarray, bound: float, iters: int = 100) -> np.ndarray:
    """Euclidean projection of each column onto {|x| <= bound, sum x = 0}.

    The projection of column m is clip(m - c, -bound, bound) for the shift c
    that zeroes the sum; c is located by bisection.
    """
    M = np.asarray(M, dtype=float)
    lo = (M.min(axis=0) - bound)[None, :]
    hi = (M.max(axis=0) + bound)[None, :]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        tot = np.clip(M - mid, -bound, bound).sum(axis=0, keepdims=True)
        pos = tot > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    X = np.clip(M - 0.5 * (lo + hi), -bound, bound)
    # remove the residual bisection error without leaving the box
    resid = X.sum(axis=0) / X.shape[0]
    X = X - resid[None, :]
    return np.clip(X, -bound, bound)


def trim_orthonormalize(Vmat: np.ndarray, tau: float) -> np.ndarray:
    """Cap row norms at tau, then restore orthonormal columns.

    Returns ``V~ (V~^T V~)^{-1/2}`` where V~ is the row-clipped input.
    """
    Vmat = np.asarray(Vmat, dtype=float)
    norms = np.linalg.norm(Vmat, axis=1)
    scale = np.where(norms > tau, tau / np.maximum(norms, 1e-300), 1.0)
    Vt = Vmat * scale[:, None]
    G = Vt.T @ Vt
    w, E = np.linalg.eigh(G)
    if w.min() <= 1e-12 * max(1.0, w.max()):
        raise RankDeficiencyError("clipped Gram matrix is singular")
    return Vt @ (E / np.sqrt(w)) @ E.T


def tangent_project(frame: TangentFrame, H: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the centred tangent space.

    P(H) = U U^T H + (Q1 - U U^T) H V V^T with Q1 = I - 11^T/d1.
    """
    H = np.asarray(H, dtype=float)
    if H.shape != (frame.d1, frame.d2):
        raise ValueError(f"matrix {H.shape} does not match frame ({frame.d1}, {frame.d2})")
    U, V = frame.U, frame.V
    UtH = U.T @ H
    HV = H @ V
    first = U @ UtH
    second = (center_columns(HV) - U @ (UtH @ V)) @ V.T
    return first + second


def pairwise_constant(d1: int, d2: int) -> float:
    """c_pw = d2 (d1 - 1) / 2: inverse of the uniform-design Gram scalar on zero-sum matrices."""
    return d2 * (d1 - 1) / 2.0
