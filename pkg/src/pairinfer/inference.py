"""Cross-fitted one-step estimators for functionals of the score matrix.

Four influence-function corrections share one cross-fitting scaffold:

* ``efficient``: least-favourable direction from the information equation,
* ``whitened``: direction c_pw * P_T Gamma with the Fisher-whitened score,
* ``ipw_known`` / ``ipw_estimated``: whitened, times importance weights,
* ``efficient_nonuniform``: the efficient estimator run on non-uniform data.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .fitting import FitConfig, fit_lowrank, naive_per_task_btl
from .geometry import TangentFrame, pairwise_constant, tangent_project
from .information import (
    InfoOperator,
    build_K,
    build_plugin_G,
    build_population_G,
    coords_to_matrix,
    coord_sizes,
    efficiency_bound,
    solve_information_equation,
    whitened_variance,
)
from .model import Battles, OverlapError, SamplingModel, battle_weights, estimate_sampling, score, sigmoid, whitened_score

log = logging.getLogger(__name__)

MAX_IMPORTANCE_WEIGHT = 1e6
DIAGNOSTIC_MAX_SIZE = 2000

METHODS = ("efficient", "whitened", "ipw_known", "ipw_estimated", "efficient_nonuniform")


class FoldFitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionalSpec:
    """A finite-support functional of the score matrix.

    ``linear``: sum of coef * T[i, j] over ``entries``;
    ``winprob``: sigma(T[a, u] - T[b, u]);
    ``contrast``: T[a, u] - T[b, u].
    """

    kind: str
    entries: tuple = ()
    a: int = 0
    b: int = 0
    u: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "winprob", "contrast"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "linear":
            if not self.entries:
                raise ValueError("linear functional needs at least one entry")
            for (i, j), c in self.entries:
                if not np.isfinite(c):
                    raise ValueError("coefficients must be finite")
        elif self.a == self.b:
            raise ValueError("pairwise functional needs two distinct models")

    @classmethod
    def entry(cls, i: int, j: int) -> "FunctionalSpec":
        return cls("linear", (((int(i), int(j)), 1.0),))

    @classmethod
    def linear(cls, entries) -> "FunctionalSpec":
        return cls("linear", tuple(((int(i), int(j)), float(c)) for (i, j), c in entries))

    @classmethod
    def winprob(cls, a: int, b: int, u: int) -> "FunctionalSpec":
        return cls("winprob", a=int(a), b=int(b), u=int(u))

    @classmethod
    def contrast(cls, a: int, b: int, u: int) -> "FunctionalSpec":
        return cls("contrast", a=int(a), b=int(b), u=int(u))

    @property
    def is_linear(self) -> bool:
        return self.kind != "winprob"

    def support(self):
        if self.kind == "linear":
            return [ij for ij, _ in self.entries]
        return [(self.a, self.u), (self.b, self.u)]

    def check(self, d1: int, d2: int) -> None:
        for i, j in self.support():
            if not (0 <= i < d1 and 0 <= j < d2):
                raise IndexError(f"entry ({i}, {j}) outside a {d1}x{d2} score matrix")

    def value(self, T: np.ndarray) -> float:
        if self.kind == "linear":
            return float(sum(c * T[i, j] for (i, j), c in self.entries))
        diff = T[self.a, self.u] - T[self.b, self.u]
        return float(sigmoid(diff)) if self.kind == "winprob" else float(diff)

    def gradient(self, T: np.ndarray) -> np.ndarray:
        T = np.asarray(T)
        self.check(*T.shape)
        G = np.zeros(T.shape)
        if self.kind == "linear":
            for (i, j), c in self.entries:
                G[i, j] += c
            return G
        coef = 1.0
        if self.kind == "winprob":
            s = sigmoid(T[self.a, self.u] - T[self.b, self.u])
            coef = s * (1.0 - s)
        G[self.a, self.u] += coef
        G[self.b, self.u] -= coef
        return G

    def describe(self) -> str:
        if self.kind == "linear":
            if len(self.entries) == 1 and self.entries[0][1] == 1.0:
                (i, j), _ = self.entries[0]
                return f"entry:{i},{j}"
            return "linear:" + ";".join(f"{i},{j},{c:g}" for (i, j), c in self.entries)
        return f"{self.kind}:{self.a},{self.b},{self.u}"


def functional_gradient(spec: FunctionalSpec, T: np.ndarray) -> np.ndarray:
    return spec.gradient(T)


def parse_target(text: str) -> FunctionalSpec:
    """Parse ``entry:i,j``, ``winprob:a,b,u``, ``contrast:a,b,u`` or ``linear:i,j,c;...``."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "entry":
            i, j = (int(x) for x in rest.split(","))
            return FunctionalSpec.entry(i, j)
        if kind in ("winprob", "contrast"):
            a, b, u = (int(x) for x in rest.split(","))
            return getattr(FunctionalSpec, kind)(a, b, u)
        if kind == "linear":
            items = []
            for part in rest.split(";"):
                i, j, c = part.split(",")
                items.append(((int(i), int(j)), float(c)))
            return FunctionalSpec.linear(items)
    except ValueError as exc:
        raise ValueError(f"malformed target {text!r}") from exc
    raise ValueError(f"unknown target kind in {text!r}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EstimateReport:
    estimate: float
    variance: float
    standard_error: float
    ci_low: float
    ci_high: float
    n_used: int
    method: str
    folds: int
    level: float = 0.95
    se_mode: str = "crossfit"
    crossfit_se: float | None = None
    influence: np.ndarray | None = field(default=None, repr=False)

    @property
    def z_half_width(self) -> float:
        return float(norm.ppf(0.5 + self.level / 2))

    def covers(self, truth: float) -> bool:
        return self.ci_low <= truth <= self.ci_high


def _report(fold_estimates, influence, weight, method, folds, level) -> EstimateReport:
    est = float(np.mean(fold_estimates))
    n = float(np.sum(weight))
    var = float(np.sum(weight * influence ** 2) / n)
    if var == 0.0:
        warnings.warn("estimated influence variance is zero", RuntimeWarning)
    se = float(np.sqrt(var / n))
    z = float(norm.ppf(0.5 + level / 2))
    return EstimateReport(est, var, se, est - z * se, est + z * se, len(influence), method, folds, level,
                          crossfit_se=se, influence=influence)


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------

@dataclass
class FoldFit:
    """Nuisance fit for one fold: trained on every battle outside ``index``."""

    index: np.ndarray
    estimate: np.ndarray
    frame: TangentFrame
    _operator: InfoOperator | None = field(default=None, repr=False)
    _K: np.ndarray | None = field(default=None, repr=False)
    _sampling: SamplingModel | None = field(default=None, repr=False)


@dataclass
class CrossFit:
    battles: Battles
    folds: list
    fit_config: FitConfig

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def out_of_fold(self, k: int) -> Battles:
        mask = np.ones(len(self.battles), dtype=bool)
        mask[self.folds[k].index] = False
        return self.battles.subset(np.flatnonzero(mask))

    def operator(self, k: int) -> InfoOperator:
        f = self.folds[k]
        if f._operator is None:
            f._operator = build_plugin_G(self.out_of_fold(k), f.estimate, logit_cap=2 * self.fit_config.clip_bound)
        return f._operator

    def K(self, k: int) -> np.ndarray:
        f = self.folds[k]
        if f._K is None:
            f._K = build_K(f.frame, self.operator(k))
        return f._K

    def sampling_estimate(self, k: int) -> SamplingModel:
        f = self.folds[k]
        if f._sampling is None:
            f._sampling = estimate_sampling(self.out_of_fold(k))
        return f._sampling


def crossfit(battles: Battles, K_folds: int = 6, fit_config: FitConfig | None = None,
             rng: np.random.Generator | int | None = None) -> CrossFit:
    """Random partition into ``K_folds`` folds and one nuisance fit per fold."""
    if K_folds < 2:
        raise ValueError("cross-fitting needs at least two folds")
    if len(battles) < 2 * K_folds:
        raise ValueError("too few battles for the requested number of folds")
    cfg = fit_config or FitConfig()
    rng = np.random.default_rng(rng)
    parts = np.array_split(rng.permutation(len(battles)), K_folds)
    cf = CrossFit(battles, [], cfg)
    for k, idx in enumerate(parts):
        idx = np.sort(idx)
        cf.folds.append(FoldFit(idx, None, None))
        try:
            fit = fit_lowrank(cf.out_of_fold(k), cfg, rng=np.random.default_rng(rng.integers(2 ** 63)))
        except (np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            raise FoldFitError(f"nuisance fit failed on fold {k}: {exc}") from exc
        cf.folds[k].estimate = fit.estimate
        cf.folds[k].frame = fit.frame
    return cf


def _resolve(battles, spec, K_folds, fit_config, rng, folds):
    spec.check(battles.d1, battles.d2)
    if folds is None:
        return crossfit(battles, K_folds, fit_config, rng)
    if folds.battles is not battles:
        raise ValueError("precomputed folds belong to a different battle set")
    return folds


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def _one_step(cf: CrossFit, spec: FunctionalSpec, direction, method: str, level: float) -> EstimateReport:
    b = cf.battles
    N = b.total_weight  # battle count unless ties were split into half-weight battles
    K = cf.n_folds
    influence = np.empty(len(b))
    fold_estimates = []
    for k, f in enumerate(cf.folds):
        Gamma = spec.gradient(f.estimate)
        fold = b.subset(f.index)
        phi = direction(k, f, Gamma, fold)
        influence[f.index] = phi
        fold_estimates.append(spec.value(f.estimate) + K / N * float(np.sum(fold.weight * phi)))
    return _report(fold_estimates, influence, b.weight, method, K, level)


def efficient_one_step(battles: Battles, spec: FunctionalSpec, K_folds: int = 6, fit_config: FitConfig | None = None,
                       rng=None, level: float = 0.95, folds: CrossFit | None = None, solver: str = "deflated",
                       method: str = "efficient") -> EstimateReport:
    """Cross-fitted one-step estimator along the estimated least-favourable direction."""
    cf = _resolve(battles, spec, K_folds, fit_config, rng, folds)

    def direction(k, f, Gamma, fold):
        sol = solve_information_equation(f.frame, cf.operator(k), Gamma, method=solver, K=cf.K(k))
        return score(fold.outcome, fold.logits(f.estimate)) * fold.inner(sol.H)

    return _one_step(cf, spec, direction, method, level)


def efficient_nonuniform_one_step(battles: Battles, spec: FunctionalSpec, K_folds: int = 6,
                                  fit_config: FitConfig | None = None, rng=None, level: float = 0.95,
                                  folds: CrossFit | None = None, solver: str = "deflated") -> EstimateReport:
    """The efficient estimator applied to non-uniform data; the plug-in operator already carries p(x)."""
    return efficient_one_step(battles, spec, K_folds, fit_config, rng, level, folds, solver,
                              method="efficient_nonuniform")


def _whitened(cf, spec, level, method, weight_fn=None):
    b = cf.battles
    c_pw = pairwise_constant(b.d1, b.d2)

    def direction(k, f, Gamma, fold):
        H = c_pw * tangent_project(f.frame, Gamma)
        phi = whitened_score(fold.outcome, fold.logits(f.estimate)) * fold.inner(H)
        if weight_fn is not None:
            phi = phi * weight_fn(k, fold)
        return phi

    return _one_step(cf, spec, direction, method, level)


def whitened_one_step(battles: Battles, spec: FunctionalSpec, K_folds: int = 6, fit_config: FitConfig | None = None,
                      rng=None, level: float = 0.95, folds: CrossFit | None = None) -> EstimateReport:
    """Cross-fitted one-step estimator with the whitened score; no operator inversion."""
    cf = _resolve(battles, spec, K_folds, fit_config, rng, folds)
    return _whitened(cf, spec, level, "whitened")


def ipw_one_step(battles: Battles, spec: FunctionalSpec, K_folds: int = 6, fit_config: FitConfig | None = None,
                 sampling: SamplingModel | str = "estimate", rng=None, level: float = 0.95,
                 folds: CrossFit | None = None) -> EstimateReport:
    """Whitened estimator with each correction reweighted to the uniform reference design.

    ``sampling`` is either the known :class:`SamplingModel` or ``"estimate"``,
    in which case the design is estimated on each fold's training battles.
    """
    cf = _resolve(battles, spec, K_folds, fit_config, rng, folds)
    known = isinstance(sampling, SamplingModel)
    if not known and sampling != "estimate":
        raise ValueError("sampling must be a SamplingModel or 'estimate'")

    def weight_fn(k, fold):
        s = sampling if known else cf.sampling_estimate(k)
        with np.errstate(divide="ignore"):
            w = battle_weights(s, fold)
        if not np.all(np.isfinite(w)) or np.max(w, initial=0.0) > MAX_IMPORTANCE_WEIGHT:
            raise OverlapError("importance weight exceeds 1e6; the design lacks overlap")
        return w

    return _whitened(cf, spec, level, "ipw_known" if known else "ipw_estimated", weight_fn)


def full_sample_influence(battles: Battles, spec: FunctionalSpec, method: str, T_hat: np.ndarray, frame: TangentFrame,
                          clip_bound: float, sampling: SamplingModel | None = None, solver: str = "deflated") -> np.ndarray:
    """Influence values of every battle along the direction built from a fit on all battles."""
    Gamma = spec.gradient(T_hat)
    eta = battles.logits(T_hat)
    if method in ("efficient", "efficient_nonuniform"):
        op = build_plugin_G(battles, T_hat, logit_cap=2 * clip_bound)
        H = solve_information_equation(frame, op, Gamma, method=solver).H
        return score(battles.outcome, eta) * battles.inner(H)
    H = pairwise_constant(battles.d1, battles.d2) * tangent_project(frame, Gamma)
    phi = whitened_score(battles.outcome, eta) * battles.inner(H)
    if method == "whitened":
        return phi
    if method == "ipw_known":
        if sampling is None:
            raise ValueError("ipw_known needs the sampling model")
        return phi * battle_weights(sampling, battles)
    if method == "ipw_estimated":
        return phi * battle_weights(estimate_sampling(battles), battles)
    raise ValueError(f"unknown method {method!r}")


def with_full_sample_se(report: EstimateReport, battles: Battles, phi: np.ndarray) -> EstimateReport:
    """Same point estimate; variance from the full-sample influence values."""
    W = battles.total_weight
    var = float(np.sum(battles.weight * phi ** 2) / W)
    se = float(np.sqrt(var / W))
    z = float(norm.ppf(0.5 + report.level / 2))
    est = report.estimate
    return EstimateReport(est, var, se, est - z * se, est + z * se, report.n_used, report.method, report.folds,
                          report.level, "full_sample", report.standard_error, phi)


def estimate_all(battles: Battles, spec: FunctionalSpec, methods, K_folds: int = 6,
                 fit_config: FitConfig | None = None, rng=None, level: float = 0.95,
                 sampling: SamplingModel | None = None, solver: str = "deflated", se_mode: str = "crossfit") -> dict:
    """Run several methods on one shared cross-fit (same folds, same nuisance fits).

    ``se_mode="full_sample"`` keeps the cross-fitted point estimates but takes
    the standard error from one nuisance fit on all battles; the cross-fitted
    standard error is kept in ``crossfit_se``.
    """
    if se_mode not in ("crossfit", "full_sample"):
        raise ValueError(f"unknown se_mode {se_mode!r}")
    cfg = fit_config or FitConfig()
    rng = np.random.default_rng(rng)
    cf = crossfit(battles, K_folds, cfg, rng)
    spec.check(battles.d1, battles.d2)
    out = {}
    for m in methods:
        if m == "efficient":
            out[m] = efficient_one_step(battles, spec, folds=cf, level=level, solver=solver)
        elif m == "efficient_nonuniform":
            out[m] = efficient_nonuniform_one_step(battles, spec, folds=cf, level=level, solver=solver)
        elif m == "whitened":
            out[m] = whitened_one_step(battles, spec, folds=cf, level=level)
        elif m == "ipw_known":
            if sampling is None:
                raise ValueError("ipw_known needs the sampling model")
            out[m] = ipw_one_step(battles, spec, sampling=sampling, folds=cf, level=level)
        elif m == "ipw_estimated":
            out[m] = ipw_one_step(battles, spec, sampling="estimate", folds=cf, level=level)
        else:
            raise ValueError(f"unknown method {m!r}")
    if se_mode == "full_sample":
        fit = fit_lowrank(battles, cfg, rng=np.random.default_rng(rng.integers(2 ** 63)))
        for m, rep in out.items():
            phi = full_sample_influence(battles, spec, m, fit.estimate, fit.frame, cfg.clip_bound, sampling, solver)
            out[m] = with_full_sample_se(rep, battles, phi)
    return out


def naive_estimate(battles: Battles, spec: FunctionalSpec, level: float = 0.95, ridge: float = 1e-4) -> EstimateReport:
    """Per-category BTL plug-in with a delta-method standard error.

    The covariance of each category's scores is the pseudo-inverse of its
    observed information, a weighted graph Laplacian.
    """
    spec.check(battles.d1, battles.d2)
    T, H = naive_per_task_btl(battles, ridge=ridge, return_hessian=True)
    Gamma = spec.gradient(T)
    var = 0.0
    for u in np.flatnonzero(np.any(Gamma != 0, axis=0)):
        g = Gamma[:, u]
        var += float(g @ np.linalg.pinv(H[u], hermitian=True, rcond=1e-10) @ g)
    est = spec.value(T)
    se = float(np.sqrt(var))
    z = float(norm.ppf(0.5 + level / 2))
    n = battles.total_weight
    return EstimateReport(est, var * n, se, est - z * se, est + z * se, len(battles), "naive", 1, level)


# ---------------------------------------------------------------------------
# oracle variances
# ---------------------------------------------------------------------------

def oracle_variance(method: str, T: np.ndarray, sampling: SamplingModel, spec: FunctionalSpec, rank: int) -> float:
    """Asymptotic variance of one influence value at the truth under ``sampling``."""
    from .geometry import truncate_rank

    _, frame = truncate_rank(T, rank)
    Gamma = spec.gradient(T)
    if method in ("efficient", "efficient_nonuniform"):
        return efficiency_bound(frame, build_population_G(T, sampling), Gamma, method="deflated")
    if method == "whitened":
        return whitened_variance(frame, T, sampling, Gamma)
    if method in ("ipw_known", "ipw_estimated"):
        return whitened_variance(frame, T, sampling, Gamma, importance=True)
    raise ValueError(f"unknown method {method!r}")


def oracle_se(method: str, T: np.ndarray, sampling: SamplingModel, spec: FunctionalSpec, rank: int, n: int) -> float:
    return float(np.sqrt(oracle_variance(method, T, sampling, spec, rank) / n))


# ---------------------------------------------------------------------------
# entrywise diagnostic
# ---------------------------------------------------------------------------

def restricted_inverse_matrix(frame: TangentFrame, op: InfoOperator, rtol: float = 1e-8) -> np.ndarray:
    """Dense matrix of the pseudo-inverse of P_T G P_T, acting on vec(H) (row-major)."""
    d1, d2 = frame.d1, frame.d2
    K = build_K(frame, op)
    nA, nC = coord_sizes(frame)
    dim = nA + nC
    J = np.empty((d1 * d2, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        J[:, i] = coords_to_matrix(frame, e).ravel()
    w, E = np.linalg.eigh(K)
    keep = w > rtol * w.max()
    Kp = (E[:, keep] / w[keep]) @ E[:, keep].T
    return J @ Kp @ J.T


def entrywise_inverse_diagnostic(frame: TangentFrame, op: InfoOperator) -> float:
    """||(P_T G P_T)^+||_{inf->inf} / (2 c_pw), computed exactly on small instances."""
    d1, d2 = frame.d1, frame.d2
    if d1 * d2 > DIAGNOSTIC_MAX_SIZE:
        raise ValueError(f"diagnostic limited to d1*d2 <= {DIAGNOSTIC_MAX_SIZE}, got {d1 * d2}")
    M = restricted_inverse_matrix(frame, op)
    return float(np.abs(M).sum(axis=1).max() / (2.0 * pairwise_constant(d1, d2)))
