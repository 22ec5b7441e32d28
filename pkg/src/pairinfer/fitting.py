"""Low-rank BTL fitting: spectral start, alternating minimisation,
entrywise refinement and the per-category baseline.

All logistic subproblems go through :func:`batched_logistic_newton`, which
solves many small independent ridge-regularised (optionally ball-
constrained) logistic regressions at once.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from .geometry import TangentFrame, center_columns, project_centered_box, truncate_rank
from .model import Battles, sigmoid

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    rank: int = 5
    altmin_rounds: int = 3
    clip_bound: float = 7.0
    newton_max_iter: int = 50
    newton_tol: float = 1e-8
    ridge: float = 1e-6
    refinement_splits: str = "off"  # "off" | "three_way"
    refine: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.clip_bound <= 0:
            raise ValueError("clip bound must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.refinement_splits not in ("off", "three_way"):
            raise ValueError(f"unknown refinement_splits {self.refinement_splits!r}")

    @property
    def ball_scale(self) -> float:
        return 2.0 * self.clip_bound


@dataclass
class FitReport:
    estimate: np.ndarray
    frame: TangentFrame
    iterations: int
    neg_log_likelihood: float
    timings: dict = field(default_factory=dict)
    fallbacks: int = 0
    unobserved_rows: list = field(default_factory=list)
    unobserved_columns: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# logistic solvers
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class NewtonResult:
    theta: np.ndarray
    iterations: int
    grad_norm: np.ndarray
    objective: np.ndarray
    history: list | None = None
    fallbacks: int = 0


def batched_logistic_newton(features, offsets, outcomes, weights, groups, n_groups, theta0=None,
                            ridge=1e-6, radius=None, max_iter=50, tol=1e-8, record=False):
    """Minimise, for every group g independently,

        sum_{i in g} w_i [softplus(x_i.theta_g - o_i) - y_i (x_i.theta_g - o_i)] + ridge/2 |theta_g|^2

    over the ball |theta_g| <= radius.  Newton directions with step halving
    (at most 30 halvings) and projection onto the ball; a group whose
    Newton direction fails to decrease the objective falls back to a
    gradient step.
    """
    X = np.asarray(features, dtype=float)
    n, r = X.shape
    o = np.asarray(offsets, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    w = np.asarray(weights, dtype=float)
    g = np.asarray(groups, dtype=np.intp)
    theta = np.zeros((n_groups, r)) if theta0 is None else np.array(theta0, dtype=float)
    if radius is not None:
        theta = _project_ball(theta, radius)
    outer = (X[:, :, None] * X[:, None, :]).reshape(n, r * r)
    # group-by-sum as a product with a fixed sparse incidence pattern
    order = np.argsort(g, kind="stable")
    indptr = np.concatenate([[0], np.cumsum(np.bincount(g, minlength=n_groups))])

    def group_sum(vals, M):
        S = scipy.sparse.csr_matrix((vals[order], order, indptr), shape=(n_groups, n))
        return S @ M

    eye = np.eye(r)

    def objective(th):
        eta = np.einsum("ij,ij->i", X, th[g]) - o
        vals = w * (_softplus(eta) - y * eta)
        return np.bincount(g, weights=vals, minlength=n_groups) + 0.5 * ridge * np.sum(th * th, axis=1)

    def grad_hess(th):
        eta = np.einsum("ij,ij->i", X, th[g]) - o
        mu = sigmoid(eta)
        resid = w * (mu - y)
        grad = group_sum(resid, X) + ridge * th
        curv = w * mu * (1.0 - mu)
        hess = group_sum(curv, outer).reshape(n_groups, r, r) + ridge * eye
        return grad, hess

    f = objective(theta)
    history = [f.copy()] if record else None
    active = np.ones(n_groups, dtype=bool)
    fallbacks = 0
    gnorm = np.full(n_groups, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        grad, hess = grad_hess(theta)
        gnorm = _kkt_norm(theta, grad, radius)
        active &= gnorm >= tol
        if not active.any():
            it -= 1
            break
        # tiny diagonal jitter keeps empty groups (zero Hessian, ridge 0) solvable
        step = np.linalg.solve(hess + 1e-12 * eye, grad[:, :, None])[:, :, 0]
        descent = np.einsum("ij,ij->i", step, grad) > 0
        use_grad = active & ~descent
        if use_grad.any():
            fallbacks += int(use_grad.sum())
            scale = np.maximum(np.trace(hess, axis1=1, axis2=2), 1e-12)
            step[use_grad] = grad[use_grad] / scale[use_grad, None]
        t = np.ones(n_groups)
        pending = active.copy()
        new_theta = theta.copy()
        new_f = f.copy()
        for _ in range(31):
            trial = theta - t[:, None] * step
            if radius is not None:
                trial = _project_ball(trial, radius)
            ft = objective(np.where(pending[:, None], trial, theta))
            ok = pending & (ft <= f + 1e-12 * np.abs(f))
            new_theta[ok] = trial[ok]
            new_f[ok] = ft[ok]
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= 0.5
        # groups whose line search failed cannot make progress
        active &= ~pending
        theta, f = new_theta, new_f
        if record:
            history.append(f.copy())
    grad, _ = grad_hess(theta)
    gnorm = _kkt_norm(theta, grad, radius)
    return NewtonResult(theta, it, gnorm, f, history, fallbacks)


def _project_ball(theta, radius):
    nrm = np.linalg.norm(theta, axis=1)
    scale = np.where(nrm > radius, radius / np.maximum(nrm, 1e-300), 1.0)
    return theta * scale[:, None]


def _kkt_norm(theta, grad, radius):
    """Gradient norm, with the outward normal component removed at the ball boundary."""
    if radius is None:
        return np.linalg.norm(grad, axis=1)
    nrm = np.linalg.norm(theta, axis=1)
    on_boundary = nrm >= radius * (1 - 1e-10)
    radial = np.einsum("ij,ij->i", grad, theta) / np.maximum(nrm ** 2, 1e-300)
    pushes_out = on_boundary & (radial < 0)
    g = grad - np.where(pushes_out, radial, 0.0)[:, None] * theta
    return np.linalg.norm(g, axis=1)


def row_logistic_solve(features, offsets, outcomes, ball_radius=None, ridge=0.0, max_iter=100, tol=1e-8,
                       theta0=None) -> np.ndarray:
    """Offset logistic regression for a single parameter vector, eta = x.theta - offset."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    n = X.shape[0]
    res = batched_logistic_newton(X, offsets, outcomes, np.ones(n), np.zeros(n, dtype=np.intp), 1,
                                  None if theta0 is None else np.atleast_2d(theta0),
                                  ridge=ridge, radius=ball_radius, max_iter=max_iter, tol=tol)
    if res.grad_norm[0] > 100 * tol:
        raise ConvergenceError(f"logistic solve stopped with gradient norm {res.grad_norm[0]:.3e}")
    return res.theta[0]


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def neg_log_likelihood(T: np.ndarray, battles: Battles) -> float:
    eta = battles.logits(T)
    return float(np.sum(battles.weight * (_softplus(eta) - battles.outcome * eta)) / battles.total_weight)


# ---------------------------------------------------------------------------
# spectral initialisation
# ---------------------------------------------------------------------------

def signed_moment_matrix(battles: Battles) -> np.ndarray:
    d1, d2 = battles.d1, battles.d2
    c = battles.weight * (battles.outcome - 0.5)
    idx_p = battles.first * d2 + battles.category
    idx_q = battles.second * d2 + battles.category
    sums = (np.bincount(idx_p, weights=c, minlength=d1 * d2)
            - np.bincount(idx_q, weights=c, minlength=d1 * d2))
    counts = (np.bincount(idx_p, weights=battles.weight, minlength=d1 * d2)
              + np.bincount(idx_q, weights=battles.weight, minlength=d1 * d2))
    M = np.zeros(d1 * d2)
    seen = counts > 0
    M[seen] = 4.0 * sums[seen] / counts[seen]
    return M.reshape(d1, d2)


def spectral_init(battles: Battles, rank: int, clip_bound: float = 7.0) -> np.ndarray:
    """Signed-outcome moment matrix, centred, truncated to ``rank`` and clipped."""
    if len(battles) == 0:
        raise ValueError("spectral initialisation needs at least one battle")
    M = signed_moment_matrix(battles)
    T, _ = truncate_rank(M, rank)
    return project_centered_box(T, clip_bound)


# ---------------------------------------------------------------------------
# alternating minimisation
# ---------------------------------------------------------------------------

def _balanced_factors(T: np.ndarray, rank: int):
    Tr, frame = truncate_rank(T, rank)
    root = np.sqrt(frame.singular_values)
    return frame.U * root, frame.V * root


def _category_step(battles: Battles, U: np.ndarray, V: np.ndarray, cfg: FitConfig):
    X = U[battles.first] - U[battles.second]
    res = batched_logistic_newton(X, np.zeros(len(battles)), battles.outcome, battles.weight,
                                  battles.category, battles.d2, theta0=V, ridge=cfg.ridge,
                                  max_iter=cfg.newton_max_iter, tol=cfg.newton_tol)
    return res.theta, res


def _reoriented(battles: Battles):
    """Every battle seen from both participants: (row, opponent, category, outcome for row, weight)."""
    return (np.concatenate([battles.first, battles.second]),
            np.concatenate([battles.second, battles.first]),
            np.concatenate([battles.category, battles.category]),
            np.concatenate([battles.outcome, 1.0 - battles.outcome]),
            np.concatenate([battles.weight, battles.weight]))


def _model_step(battles: Battles, U: np.ndarray, V: np.ndarray, cfg: FitConfig, record: bool = False):
    """One sweep over the model factor: each row of U solved with V and the other rows fixed.

    Row j sees eta = u_j.v_c - u_opp.v_c, an offset logistic problem in u_j.
    The rows are updated simultaneously and then re-centred.
    """
    rows, opp, cats, z, w = _reoriented(battles)
    Vc = V[cats]
    off = np.einsum("ij,ij->i", U[opp], Vc)
    res = batched_logistic_newton(Vc, off, z, w, rows, battles.d1, theta0=U, ridge=cfg.ridge,
                                  max_iter=cfg.newton_max_iter, tol=cfg.newton_tol, record=record)
    return center_columns(res.theta), res


def altmin_fit(battles: Battles, config: FitConfig | None = None, T0: np.ndarray | None = None) -> FitReport:
    """Spectral start followed by ``config.altmin_rounds`` rounds of alternating minimisation.

    Each round solves over the category factor with the model factor fixed,
    then over the model factor, and projects the product back to rank r
    inside the centred box of half-width ``clip_bound``.
    """
    cfg = config or FitConfig()
    if len(battles) == 0:
        raise ValueError("altmin needs at least one battle")
    t0 = time.perf_counter()
    T = spectral_init(battles, cfg.rank, cfg.clip_bound) if T0 is None else np.asarray(T0, dtype=float)
    timings = {"spectral": time.perf_counter() - t0}
    iters = 0
    fallbacks = 0
    t1 = time.perf_counter()
    for _ in range(cfg.altmin_rounds):
        U, V = _balanced_factors(T, cfg.rank)
        V, res = _category_step(battles, U, V, cfg)
        iters += res.iterations
        fallbacks += res.fallbacks
        U, res = _model_step(battles, U, V, cfg)
        iters += res.iterations
        fallbacks += res.fallbacks
        T, _ = truncate_rank(U @ V.T, cfg.rank)
        T = project_centered_box(T, cfg.clip_bound)
    timings["altmin"] = time.perf_counter() - t1
    _, frame = truncate_rank(T, cfg.rank)
    return FitReport(T, frame, iters, neg_log_likelihood(T, battles), timings, fallbacks)


# ---------------------------------------------------------------------------
# entrywise refinement
# ---------------------------------------------------------------------------

def _row_refine(battles: Battles, T_init: np.ndarray, A_hat: np.ndarray, Theta0: np.ndarray, cfg: FitConfig):
    d1 = battles.d1
    rows, opp, cats, z, w = _reoriented(battles)
    X = A_hat[cats]
    off = T_init[opp, cats]
    radius = cfg.ball_scale * np.sqrt(d1)
    res = batched_logistic_newton(X, off, z, w, rows, d1, theta0=Theta0, ridge=cfg.ridge, radius=radius,
                                  max_iter=cfg.newton_max_iter, tol=cfg.newton_tol)
    seen = np.bincount(rows, minlength=d1) > 0
    theta = np.where(seen[:, None], res.theta, Theta0)
    return theta, np.flatnonzero(~seen).tolist(), res


def _column_refine(battles: Battles, Theta_bar: np.ndarray, A0: np.ndarray, cfg: FitConfig):
    d2 = battles.d2
    X = Theta_bar[battles.first] - Theta_bar[battles.second]
    radius = cfg.ball_scale * np.sqrt(d2)
    res = batched_logistic_newton(X, np.zeros(len(battles)), battles.outcome, battles.weight, battles.category,
                                  d2, theta0=A0, ridge=cfg.ridge, radius=radius,
                                  max_iter=cfg.newton_max_iter, tol=cfg.newton_tol)
    seen = np.bincount(battles.category, minlength=d2) > 0
    A = np.where(seen[:, None], res.theta, A0)
    return A, np.flatnonzero(~seen).tolist(), res


def refine_entrywise(T_init: np.ndarray, battles: Battles, config: FitConfig | None = None,
                     rng: np.random.Generator | None = None, row_battles: Battles | None = None,
                     column_battles: Battles | None = None) -> FitReport:
    """Row-wise then column-wise offset logistic refinement of a low-rank fit.

    With ``refinement_splits == "three_way"`` the battles are split in three
    parts; the second drives the row step and the third the column step (the
    first is reserved for fitting ``T_init``, see :func:`fit_lowrank`).
    Explicit ``row_battles`` / ``column_battles`` override the split.
    """
    cfg = config or FitConfig()
    t0 = time.perf_counter()
    if row_battles is None or column_battles is None:
        if cfg.refinement_splits == "three_way":
            rng = rng or np.random.default_rng(0)
            parts = np.array_split(rng.permutation(len(battles)), 3)
            row_battles, column_battles = battles.subset(parts[1]), battles.subset(parts[2])
        else:
            row_battles = column_battles = battles
    Tr, frame = truncate_rank(T_init, cfg.rank)
    root = np.sqrt(frame.singular_values)
    A_hat = frame.V * root
    Theta0 = frame.U * root
    offsets = project_centered_box(np.asarray(T_init, dtype=float), cfg.clip_bound)
    Theta, bad_rows, rres = _row_refine(row_battles, offsets, A_hat, Theta0, cfg)
    Theta_bar = center_columns(Theta)
    A, bad_cols, cres = _column_refine(column_battles, Theta_bar, A_hat, cfg)
    T, _ = truncate_rank(Theta_bar @ A.T, cfg.rank)
    T = project_centered_box(T, cfg.clip_bound)
    _, frame = truncate_rank(T, cfg.rank)
    if bad_rows or bad_cols:
        log.info("refinement kept initial values for %d rows / %d columns without data", len(bad_rows), len(bad_cols))
    return FitReport(T, frame, rres.iterations + cres.iterations, neg_log_likelihood(T, battles),
                     {"refine": time.perf_counter() - t0}, rres.fallbacks + cres.fallbacks, bad_rows, bad_cols)


def fit_lowrank(battles: Battles, config: FitConfig | None = None, rng: np.random.Generator | None = None) -> FitReport:
    """Full initial-estimation pipeline: AltMin, then (optionally) refinement."""
    cfg = config or FitConfig()
    if cfg.refinement_splits == "three_way" and cfg.refine:
        rng = rng or np.random.default_rng(0)
        parts = np.array_split(rng.permutation(len(battles)), 3)
        init = altmin_fit(battles.subset(parts[0]), cfg)
        ref = refine_entrywise(init.estimate, battles, cfg, row_battles=battles.subset(parts[1]),
                               column_battles=battles.subset(parts[2]))
    else:
        init = altmin_fit(battles, cfg)
        if not cfg.refine:
            return init
        ref = refine_entrywise(init.estimate, battles, cfg)
    ref.timings = {**init.timings, **ref.timings}
    ref.iterations += init.iterations
    ref.fallbacks += init.fallbacks
    return ref


# ---------------------------------------------------------------------------
# naive per-category baseline
# ---------------------------------------------------------------------------

def naive_per_task_btl(battles: Battles, d1: int | None = None, d2: int | None = None, ridge: float = 1e-4,
                       max_iter: int = 100, tol: float = 1e-9, return_hessian: bool = False):
    """Independent ridge-regularised BTL fit in every category.

    The ridge term keeps never-compared models at 0 and makes every column
    sum to zero at the optimum.  With ``return_hessian`` the per-category
    observed information (sum, not mean) is returned alongside.
    """
    d1 = battles.d1 if d1 is None else d1
    d2 = battles.d2 if d2 is None else d2
    u, p, q, y, w = battles.category, battles.first, battles.second, battles.outcome, battles.weight
    S = np.zeros((d2, d1))
    base = u * d1 * d1
    idx = np.concatenate([base + p * d1 + p, base + q * d1 + q, base + p * d1 + q, base + q * d1 + p])
    eye = np.eye(d1)

    def fval(S):
        eta = S[u, p] - S[u, q]
        vals = w * (_softplus(eta) - y * eta)
        return np.bincount(u, weights=vals, minlength=d2) + 0.5 * ridge * np.sum(S * S, axis=1)

    def grad_hess(S):
        eta = S[u, p] - S[u, q]
        mu = sigmoid(eta)
        r = w * (mu - y)
        grad = (np.bincount(u * d1 + p, weights=r, minlength=d1 * d2)
                - np.bincount(u * d1 + q, weights=r, minlength=d1 * d2)).reshape(d2, d1)
        c = w * mu * (1 - mu)
        H = np.bincount(idx, weights=np.concatenate([c, c, -c, -c]), minlength=d2 * d1 * d1)
        return grad + ridge * S, H.reshape(d2, d1, d1)

    f = fval(S)
    for _ in range(max_iter):
        grad, H = grad_hess(S)
        if np.max(np.linalg.norm(grad, axis=1)) < tol:
            break
        step = np.linalg.solve(H + ridge * eye, grad[:, :, None])[:, :, 0]
        t = np.ones(d2)
        pending = np.ones(d2, dtype=bool)
        newS = S.copy()
        for _ in range(31):
            trial = S - t[:, None] * step
            ft = fval(np.where(pending[:, None], trial, S))
            ok = pending & (ft <= f + 1e-12 * np.abs(f))
            newS[ok] = trial[ok]
            f = np.where(ok, ft, f)
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= 0.5
        S = newS
    T = S.T.copy()
    seen = np.zeros((d1, d2), dtype=bool)
    seen[p, u] = True
    seen[q, u] = True
    T[~seen] = 0.0
    if return_hessian:
        _, H = grad_hess(S)
        return T, H
    return T
