"""Battle-log ingestion, model persistence and leaderboards for arena-style data."""

from __future__ import annotations

import csv
import difflib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .fitting import FitConfig, fit_lowrank
from .geometry import TangentFrame
from .inference import (
    EstimateReport,
    FunctionalSpec,
    crossfit,
    efficient_one_step,
    ipw_one_step,
    naive_estimate,
    whitened_one_step,
)
from .model import Battles

FORMAT_VERSION = "1.0"
REQUIRED_COLUMNS = ("model_a", "model_b", "category", "winner")
WINNER_TOKENS = {"model_a": 1.0, "model_b": 0.0, "tie": None, "tie (bothbad)": None}
LEADERBOARD_HEADER = ["category", "rank", "model", "score", "se", "ci_low", "ci_high"]


class IngestError(ValueError):
    pass


class UnknownNameError(KeyError):
    def __str__(self):
        return self.args[0]


@dataclass
class ArenaData:
    battles: Battles
    model_names: list
    category_names: list
    records: int  # surviving log rows (a tie split in two halves counts once)
    ties: int = 0

    def model_index(self, name: str) -> int:
        return _lookup(name, self.model_names, "model")

    def category_index(self, name: str) -> int:
        return _lookup(name, self.category_names, "category")


def _lookup(name, names, what):
    try:
        return names.index(name)
    except ValueError:
        close = difflib.get_close_matches(name, names, n=3, cutoff=0.5)
        hint = f"; did you mean {', '.join(close)}?" if close else ""
        raise UnknownNameError(f"unknown {what} {name!r}{hint}") from None


def read_battle_log(path) -> list[tuple[str, str, str, str, int]]:
    """Rows (model_a, model_b, category, winner, line number); extra columns ignored."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"{path}: missing columns {', '.join(missing)}")
        for rec in reader:
            line = reader.line_num
            winner = rec["winner"].strip()
            if winner not in WINNER_TOKENS:
                raise IngestError(f"{path}:{line}: unknown winner token {winner!r}")
            a, b = rec["model_a"].strip(), rec["model_b"].strip()
            if not a or not b:
                raise IngestError(f"{path}:{line}: empty model name")
            rows.append((a, b, rec["category"].strip(), winner, line))
    return rows


def ingest(path, top_k: int | None = None, category_map: dict | None = None, tie_policy: str = "drop",
           model_names: list | None = None, category_names: list | None = None) -> ArenaData:
    """Parse a battle log into index-coded battles.

    Models are ranked by appearance count (ties by name) and the ``top_k``
    most frequent are kept.  ``category_map`` renames raw categories; rows
    whose category is not in a given map are dropped.  Ties are dropped or,
    with ``tie_policy="half"``, become one half-weight win for each side.
    Passing ``model_names``/``category_names`` fixes the index tables (rows
    outside them are dropped), e.g. to match a persisted model.
    """
    if tie_policy not in ("drop", "half"):
        raise IngestError(f"unknown tie policy {tie_policy!r}")
    rows = read_battle_log(path)
    if category_map is not None:
        rows = [(a, b, category_map[c], w, ln) for a, b, c, w, ln in rows if c in category_map]
    if model_names is None:
        counts = Counter()
        for a, b, _, _, _ in rows:
            counts[a] += 1
            counts[b] += 1
        ranked = sorted(counts, key=lambda m: (-counts[m], m))
        model_names = ranked[:top_k] if top_k else ranked
    keep = set(model_names)
    rows = [r for r in rows if r[0] in keep and r[1] in keep and r[0] != r[1]]
    if category_names is None:
        category_names = sorted({r[2] for r in rows})
    cats = set(category_names)
    rows = [r for r in rows if r[2] in cats]
    midx = {m: i for i, m in enumerate(model_names)}
    cidx = {c: j for j, c in enumerate(category_names)}
    first, second, cat, out, wt = [], [], [], [], []
    ties = 0
    records = 0
    for a, b, c, w, _ in rows:
        y = WINNER_TOKENS[w]
        if y is None:
            ties += 1
            if tie_policy == "drop":
                continue
            pairs = [(1.0, 0.5), (0.0, 0.5)]
        else:
            pairs = [(y, 1.0)]
        records += 1
        for yy, ww in pairs:
            first.append(midx[a])
            second.append(midx[b])
            cat.append(cidx[c])
            out.append(yy)
            wt.append(ww)
    if not first:
        raise IngestError(f"{path}: no records survive filtering")
    battles = Battles(np.array(cat, dtype=np.intp), np.array(first, dtype=np.intp), np.array(second, dtype=np.intp),
                      np.array(out), len(model_names), len(category_names), np.array(wt))
    return ArenaData(battles, list(model_names), list(category_names), records, ties)


def write_battle_log(path, battles: Battles, model_names, category_names) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for u, p, q, y in zip(battles.category, battles.first, battles.second, battles.outcome):
            w.writerow([model_names[p], model_names[q], category_names[u], "model_a" if y == 1 else "model_b"])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

@dataclass
class PersistedModel:
    model_names: list
    category_names: list
    rank: int
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray
    scores: np.ndarray
    metadata: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION

    def __post_init__(self):
        if len(self.model_names) != self.U.shape[0] or len(self.category_names) != self.V.shape[0]:
            raise ValueError("name tables do not match the factor dimensions")
        if self.scores.shape != (self.U.shape[0], self.V.shape[0]):
            raise ValueError("score matrix does not match the factor dimensions")

    @property
    def frame(self) -> TangentFrame:
        return TangentFrame(self.U, self.V, self.singular_values)

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "model_names": list(self.model_names),
            "category_names": list(self.category_names),
            "rank": int(self.rank),
            "U": self.U.tolist(),
            "singular_values": self.singular_values.tolist(),
            "V": self.V.tolist(),
            "scores": self.scores.tolist(),
            "metadata": self.metadata,
        }
        return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PersistedModel":
        doc = json.loads(text)
        version = str(doc.get("format_version", ""))
        if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
            raise ValueError(f"unsupported model format version {version!r}")
        return cls(doc["model_names"], doc["category_names"], int(doc["rank"]), np.array(doc["U"], dtype=float),
                   np.array(doc["singular_values"], dtype=float), np.array(doc["V"], dtype=float),
                   np.array(doc["scores"], dtype=float), doc.get("metadata", {}), version)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PersistedModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def fit_model(data: ArenaData, config: FitConfig, seed: int = 0, metadata: dict | None = None) -> PersistedModel:
    fit = fit_lowrank(data.battles, config, rng=np.random.default_rng(seed))
    meta = {"n": int(len(data.battles)), "records": int(data.records), "method": "altmin+refine",
            "seed": int(seed), "clip_bound": config.clip_bound, "altmin_rounds": config.altmin_rounds}
    meta.update(metadata or {})
    fr = fit.frame
    return PersistedModel(data.model_names, data.category_names, config.rank, fr.U, fr.singular_values, fr.V,
                          fit.estimate, meta)


# ---------------------------------------------------------------------------
# targets and inference
# ---------------------------------------------------------------------------

def parse_named_target(text: str, data: ArenaData) -> FunctionalSpec:
    """``entry:MODEL:CATEGORY``, ``winprob:A:B:CATEGORY`` or ``contrast:A:B:CATEGORY``."""
    parts = text.split(":")
    kind = parts[0]
    if kind == "entry" and len(parts) == 3:
        return FunctionalSpec.entry(data.model_index(parts[1]), data.category_index(parts[2]))
    if kind in ("winprob", "contrast") and len(parts) == 4:
        a, b = data.model_index(parts[1]), data.model_index(parts[2])
        if a == b:
            raise ValueError(f"degenerate target {text!r}: the two models coincide")
        return getattr(FunctionalSpec, kind)(a, b, data.category_index(parts[3]))
    raise ValueError(f"malformed target {text!r}")


def run_inference(data: ArenaData, spec: FunctionalSpec, method: str, config: FitConfig, folds: int = 6,
                  seed: int = 0, level: float = 0.95) -> EstimateReport:
    if method == "naive":
        return naive_estimate(data.battles, spec, level)
    rng = np.random.default_rng(seed)
    if method == "efficient":
        return efficient_one_step(data.battles, spec, folds, config, rng, level)
    if method == "whitened":
        return whitened_one_step(data.battles, spec, folds, config, rng, level)
    if method == "ipw":
        return ipw_one_step(data.battles, spec, folds, config, "estimate", rng, level)
    raise ValueError(f"unknown method {method!r}")


def leaderboard(data: ArenaData, config: FitConfig, method: str = "efficient", folds: int = 6, seed: int = 0,
                level: float = 0.95) -> list[dict]:
    """Entry-target inference for every (model, category), ranked within each category by score."""
    cf = None
    if method != "naive":
        cf = crossfit(data.battles, folds, config, np.random.default_rng(seed))
    rows = []
    for j, cat in enumerate(data.category_names):
        entries = []
        for i, name in enumerate(data.model_names):
            spec = FunctionalSpec.entry(i, j)
            if method == "naive":
                rep = naive_estimate(data.battles, spec, level)
            elif method == "efficient":
                rep = efficient_one_step(data.battles, spec, folds=cf, level=level)
            elif method == "whitened":
                rep = whitened_one_step(data.battles, spec, folds=cf, level=level)
            elif method == "ipw":
                rep = ipw_one_step(data.battles, spec, sampling="estimate", folds=cf, level=level)
            else:
                raise ValueError(f"unknown method {method!r}")
            entries.append((name, rep))
        entries.sort(key=lambda e: (-e[1].estimate, e[0]))
        for rank, (name, rep) in enumerate(entries, start=1):
            rows.append({"category": cat, "rank": rank, "model": name, "score": rep.estimate,
                         "se": rep.standard_error, "ci_low": rep.ci_low, "ci_high": rep.ci_high})
    return rows


def subsample_study(data: ArenaData, spec: FunctionalSpec, methods, fraction: float = 0.2, replications: int = 20,
                    config: FitConfig | None = None, folds: int = 6, seed: int = 0) -> dict:
    """Repeated uniform subsampling of records (without replacement); estimates per method."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    config = config or FitConfig(rank=3)
    out = {m: [] for m in methods}
    n = len(data.battles)
    for rep in range(replications):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))
        idx = np.sort(rng.choice(n, size=max(2 * folds, int(round(fraction * n))), replace=False))
        sub = ArenaData(data.battles.subset(idx), data.model_names, data.category_names, len(idx))
        for m in methods:
            out[m].append(run_inference(sub, spec, m, config, folds, int(rng.integers(2 ** 31)), 0.95).estimate)
    return {m: {"estimates": v, "std": float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")}
            for m, v in out.items()}
