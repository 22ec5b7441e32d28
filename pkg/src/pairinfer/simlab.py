"""Synthetic studies: planted truths, replications and Monte Carlo summaries."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .fitting import FitConfig, altmin_fit, naive_per_task_btl, refine_entrywise
from .geometry import center_columns
from .inference import METHODS, estimate_all, oracle_se, parse_target
from .model import SamplingModel, sample_battles

log = logging.getLogger(__name__)

CSV_HEADER = ["method", "replication", "estimate", "se", "z", "covered"]


# ---------------------------------------------------------------------------
# truth and design
# ---------------------------------------------------------------------------

def gen_truth(d1: int, d2: int, r: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian rank-r product, column-centred, scaled so that max |entry| = alpha."""
    if r > min(d1, d2):
        raise ValueError("rank exceeds matrix dimensions")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    T = center_columns(rng.standard_normal((d1, r)) @ rng.standard_normal((d2, r)).T)
    return T * (alpha / np.abs(T).max())


def gen_dirichlet_sampling(d1: int, d2: int, concentration: float, rng: np.random.Generator) -> SamplingModel:
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    pi_J = rng.dirichlet(np.full(d2, float(concentration)))
    pi_M = rng.dirichlet(np.full(d1, float(concentration)))
    return SamplingModel.product(pi_J, pi_M)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    d1: int = 200
    d2: int = 200
    rank: int = 5
    alpha: float = 5.0
    n: int = 60_000
    replications: int = 500
    methods: tuple = ("efficient", "whitened")
    target: str = "entry:0,0"
    sampling: str = "uniform"  # "uniform" or "dirichlet:<concentration>"
    seed: int = 0
    K_folds: int = 6
    level: float = 0.95
    clip_bound: float | None = None  # defaults to alpha + 2
    altmin_rounds: int = 3
    refine: bool = True
    se_mode: str = "full_sample"  # standard error from a fit on all battles; "crossfit" uses the fold fits

    def __post_init__(self):
        if self.se_mode not in ("full_sample", "crossfit"):
            raise ValueError(f"unknown se_mode {self.se_mode!r}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        parse_target(self.target).check(self.d1, self.d2)
        self.sampling_concentration()

    def sampling_concentration(self) -> float | None:
        if self.sampling == "uniform":
            return None
        kind, _, conc = self.sampling.partition(":")
        if kind != "dirichlet":
            raise ValueError(f"unknown sampling {self.sampling!r}")
        return float(conc)

    @property
    def spec(self):
        return parse_target(self.target)

    @property
    def fit_config(self) -> FitConfig:
        clip = self.alpha + 2.0 if self.clip_bound is None else self.clip_bound
        return FitConfig(rank=self.rank, clip_bound=clip, altmin_rounds=self.altmin_rounds, refine=self.refine)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["methods"] = tuple(d.get("methods", cls.methods))
        return cls(**d)


def study_truth(cfg: SimConfig) -> tuple[np.ndarray, SamplingModel]:
    """The planted matrix and design, drawn once per study from the study seed."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    T = gen_truth(cfg.d1, cfg.d2, cfg.rank, cfg.alpha, rng)
    conc = cfg.sampling_concentration()
    if conc is None:
        return T, SamplingModel.uniform(cfg.d1, cfg.d2)
    return T, gen_dirichlet_sampling(cfg.d1, cfg.d2, conc, rng)


def replication_rng(cfg: SimConfig, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, rep)))


# ---------------------------------------------------------------------------
# replications
# ---------------------------------------------------------------------------

@dataclass
class MethodOutcome:
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    covered: bool
    z: float
    error: str | None = None
    crossfit_se: float = float("nan")
    crossfit_covered: bool = False


@dataclass
class ReplicationResult:
    replication: int
    truth_value: float
    outcomes: dict
    seconds: float = 0.0


def run_replication(cfg: SimConfig, rep: int, truth: np.ndarray | None = None,
                    sampling: SamplingModel | None = None) -> ReplicationResult:
    """Fresh battles on the study's fixed truth; every requested method on one shared cross-fit."""
    if truth is None or sampling is None:
        truth, sampling = study_truth(cfg)
    t0 = time.perf_counter()
    rng = replication_rng(cfg, rep)
    spec = cfg.spec
    psi = spec.value(truth)
    battles = sample_battles(truth, sampling, cfg.n, rng)
    outcomes = {}
    try:
        reports = estimate_all(battles, spec, cfg.methods, cfg.K_folds, cfg.fit_config, rng, cfg.level,
                               sampling=sampling, se_mode=cfg.se_mode)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.warning("replication %d failed: %s", rep, exc)
        nan = float("nan")
        outcomes = {m: MethodOutcome(nan, nan, nan, nan, False, nan, str(exc)) for m in cfg.methods}
        return ReplicationResult(rep, psi, outcomes, time.perf_counter() - t0)
    for m, rp in reports.items():
        z = (rp.estimate - psi) / rp.standard_error if rp.standard_error > 0 else float("nan")
        cse = float("nan") if rp.crossfit_se is None else rp.crossfit_se
        half = rp.z_half_width * cse
        outcomes[m] = MethodOutcome(rp.estimate, rp.standard_error, rp.ci_low, rp.ci_high, rp.covers(psi), z,
                                    None, cse, bool(abs(rp.estimate - psi) <= half))
    return ReplicationResult(rep, psi, outcomes, time.perf_counter() - t0)


def _replication_worker(args):
    cfg_dict, rep = args
    cfg = SimConfig.from_dict(cfg_dict)
    return run_replication(cfg, rep)


@dataclass
class StudyResult:
    config: SimConfig
    truth_value: float
    oracle_se: dict
    replications: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "truth_value": self.truth_value,
            "oracle_se": self.oracle_se,
            "replications": [
                {"replication": r.replication, "seconds": r.seconds,
                 "outcomes": {m: asdict(o) for m, o in r.outcomes.items()}}
                for r in self.replications
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyResult":
        reps = [ReplicationResult(r["replication"], d["truth_value"],
                                  {m: MethodOutcome(**o) for m, o in r["outcomes"].items()}, r.get("seconds", 0.0))
                for r in d["replications"]]
        return cls(SimConfig.from_dict(d["config"]), d["truth_value"], d["oracle_se"], reps)


def save_study(study: StudyResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(study.to_dict(), fh)


def load_study(path) -> StudyResult:
    with open(path, encoding="utf-8") as fh:
        return StudyResult.from_dict(json.load(fh))


def study_oracle_se(cfg: SimConfig, truth: np.ndarray, sampling: SamplingModel) -> dict:
    return {m: oracle_se(m, truth, sampling, cfg.spec, cfg.rank, cfg.n) for m in cfg.methods}


def run_study(cfg: SimConfig, workers: int = 1, progress=None) -> StudyResult:
    """All replications of ``cfg``; ``workers > 1`` fans replications out to processes.

    Results do not depend on ``workers``: every replication draws from its own
    seed stream.
    """
    truth, sampling = study_truth(cfg)
    study = StudyResult(cfg, cfg.spec.value(truth), study_oracle_se(cfg, truth, sampling))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            jobs = [(cfg.to_dict(), rep) for rep in range(cfg.replications)]
            for res in pool.map(_replication_worker, jobs):
                study.replications.append(res)
                if progress:
                    progress(res)
    else:
        for rep in range(cfg.replications):
            res = run_replication(cfg, rep, truth, sampling)
            study.replications.append(res)
            if progress:
                progress(res)
    return study


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

@dataclass
class MCSummary:
    method: str
    coverage: float
    median_se: float
    oracle_se: float
    se_ratio: float
    z_scores: np.ndarray = field(repr=False)
    mean_abs_z: float = float("nan")
    var_z: float = float("nan")
    ks_distance: float = float("nan")
    failures: int = 0
    crossfit_coverage: float = float("nan")
    crossfit_median_se: float = float("nan")

    def as_row(self) -> dict:
        return {"method": self.method, "coverage": self.coverage, "median_se": self.median_se,
                "oracle_se": self.oracle_se, "se_ratio": self.se_ratio, "mean_abs_z": self.mean_abs_z,
                "var_z": self.var_z, "ks_distance": self.ks_distance, "failures": self.failures,
                "replications": int(len(self.z_scores)), "crossfit_coverage": self.crossfit_coverage,
                "crossfit_median_se": self.crossfit_median_se}


def mc_summary(study: StudyResult) -> dict:
    out = {}
    for m in study.config.methods:
        rows = [r.outcomes[m] for r in study.replications if m in r.outcomes]
        ok = [o for o in rows if o.error is None]
        if not ok:
            raise ValueError(f"no successful replications for {m}")
        se = np.array([o.se for o in ok])
        z = np.array([o.z for o in ok])
        med = float(np.median(se))
        orc = float(study.oracle_se[m])
        out[m] = MCSummary(
            method=m,
            coverage=float(np.mean([o.covered for o in rows])),
            median_se=med,
            oracle_se=orc,
            se_ratio=med / orc if orc > 0 else float("nan"),
            z_scores=z,
            mean_abs_z=float(np.mean(np.abs(z))),
            var_z=float(np.var(z)),
            ks_distance=float(stats.kstest(z, "norm").statistic),
            failures=len(rows) - len(ok),
            crossfit_coverage=float(np.mean([o.crossfit_covered for o in rows])),
            crossfit_median_se=float(np.median([o.crossfit_se for o in ok])),
        )
    return out


def export_diagnostics(study: StudyResult, path) -> None:
    """Per-replication CSV: method, replication, estimate, se, z, covered."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for m in study.config.methods:
            for r in study.replications:
                o = r.outcomes[m]
                w.writerow([m, r.replication, repr(o.estimate), repr(o.se), repr(o.z), int(o.covered)])


# ---------------------------------------------------------------------------
# estimation-accuracy studies
# ---------------------------------------------------------------------------

def error_metrics(T_hat: np.ndarray, T: np.ndarray) -> dict:
    D = T_hat - T
    return {"relative_frobenius": float(np.linalg.norm(D) / np.linalg.norm(T)),
            "max_abs": float(np.abs(D).max()),
            "mean_abs": float(np.abs(D).mean())}


def fit_comparison(cfg: SimConfig, rep: int = 0) -> dict:
    """Naive per-category BTL against AltMin (and AltMin plus refinement) on one data set."""
    truth, sampling = study_truth(cfg)
    battles = sample_battles(truth, sampling, cfg.n, replication_rng(cfg, rep))
    fc = cfg.fit_config
    t0 = time.perf_counter()
    alt = altmin_fit(battles, fc)
    t1 = time.perf_counter()
    ref = refine_entrywise(alt.estimate, battles, fc)
    t2 = time.perf_counter()
    naive = naive_per_task_btl(battles)
    t3 = time.perf_counter()
    return {"naive": {**error_metrics(naive, truth), "seconds": t3 - t2},
            "altmin": {**error_metrics(alt.estimate, truth), "seconds": t1 - t0},
            "refined": {**error_metrics(ref.estimate, truth), "seconds": t2 - t0}}


def refinement_study(cfg: SimConfig, replications: int = 20) -> dict:
    """Max-norm error of AltMin alone and AltMin plus refinement over fresh data sets."""
    alt, ref = [], []
    for rep in range(replications):
        res = fit_comparison_fits_only(cfg, rep)
        alt.append(res[0])
        ref.append(res[1])
    return {"altmin_max_abs": alt, "refined_max_abs": ref,
            "median_altmin": float(np.median(alt)), "median_refined": float(np.median(ref))}


def fit_comparison_fits_only(cfg: SimConfig, rep: int) -> tuple[float, float]:
    truth, sampling = study_truth(cfg)
    battles = sample_battles(truth, sampling, cfg.n, replication_rng(cfg, rep))
    alt = altmin_fit(battles, cfg.fit_config)
    ref = refine_entrywise(alt.estimate, battles, cfg.fit_config)
    return float(np.abs(alt.estimate - truth).max()), float(np.abs(ref.estimate - truth).max())
