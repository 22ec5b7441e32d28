"""Bradley-Terry-Luce observation model, design atoms and sampling laws.

Battles are stored column-wise in :class:`Battles` (parallel integer/float
arrays) because every downstream computation is a vectorised sum over
comparisons.  :class:`DesignAtom` and :class:`Battle` are the scalar value
types used by the public per-atom helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

# |eta| beyond which sigma(eta)(1 - sigma(eta)) is too small to divide by.
SATURATION_LOGIT = 36.0


class ExtremeLogitError(ValueError):
    """Raised when a whitened score is requested at a saturated logit."""


class OverlapError(ValueError):
    """Raised when an atom has zero (or vanishing) sampling probability."""


# ---------------------------------------------------------------------------
# link, score and information
# ---------------------------------------------------------------------------

def sigmoid(eta):
    """Logistic link, stable for large |eta|. Accepts scalars or arrays."""
    arr = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("sigmoid: non-finite logit")
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ez = np.exp(arr[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def score(y, eta):
    """Derivative of the Bernoulli log-likelihood in the logit: y - sigma(eta)."""
    s = sigmoid(eta)
    if np.ndim(s) == 0 and np.ndim(y) == 0:
        return float(y) - s
    return np.asarray(y, dtype=float) - s


def fisher_info(eta):
    """sigma(eta) * (1 - sigma(eta)), computed without cancellation."""
    arr = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("fisher_info: non-finite logit")
    a = np.abs(arr)
    e = np.exp(-a)
    out = e / (1.0 + e) ** 2
    if out.ndim == 0:
        return float(out)
    return out


def whitened_score(y, eta):
    """score / fisher_info; raises ExtremeLogitError past the saturation guard."""
    arr = np.asarray(eta, dtype=float)
    if np.any(np.abs(arr) > SATURATION_LOGIT):
        idx = int(np.argmax(np.abs(arr))) if arr.ndim else 0
        raise ExtremeLogitError(
            f"whitened score at saturated logit (index {idx}, |eta|={float(np.max(np.abs(arr))):.3g})"
        )
    return score(y, eta) / fisher_info(eta)


# ---------------------------------------------------------------------------
# design atoms and battles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignAtom:
    """Comparison of models ``first`` and ``second`` in category ``category``."""

    category: int
    first: int
    second: int

    def __post_init__(self):
        if self.first == self.second:
            raise ValueError("design atom needs two distinct models")
        if min(self.category, self.first, self.second) < 0:
            raise ValueError("design atom indices must be nonnegative")

    def check(self, d1: int, d2: int) -> None:
        if self.first >= d1 or self.second >= d1 or self.category >= d2:
            raise IndexError(f"atom {self} out of range for a {d1}x{d2} matrix")

    def matrix(self, d1: int, d2: int) -> np.ndarray:
        self.check(d1, d2)
        X = np.zeros((d1, d2))
        X[self.first, self.category] = 1.0
        X[self.second, self.category] = -1.0
        return X


@dataclass(frozen=True)
class Battle:
    atom: DesignAtom
    outcome: int

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ValueError("battle outcome must be 0 or 1")


def atom_inner(H: np.ndarray, atom: DesignAtom) -> float:
    """<H, X> for the contrast X = (e_p - e_q) e_u^T."""
    atom.check(*H.shape)
    return float(H[atom.first, atom.category] - H[atom.second, atom.category])


@dataclass
class Battles:
    """Column store of comparisons.

    ``weight`` is 1 for ordinary battles; the half-tie ingestion policy emits
    two rows of weight 0.5.  All sums over battles are weighted sums.
    """

    category: np.ndarray
    first: np.ndarray
    second: np.ndarray
    outcome: np.ndarray
    d1: int
    d2: int
    weight: np.ndarray = field(default=None)

    def __post_init__(self):
        self.category = np.asarray(self.category, dtype=np.intp)
        self.first = np.asarray(self.first, dtype=np.intp)
        self.second = np.asarray(self.second, dtype=np.intp)
        self.outcome = np.asarray(self.outcome, dtype=float)
        if self.weight is None:
            self.weight = np.ones(len(self.category))
        else:
            self.weight = np.asarray(self.weight, dtype=float)
        n = len(self.category)
        if not (len(self.first) == len(self.second) == len(self.outcome) == len(self.weight) == n):
            raise ValueError("battle columns have different lengths")
        if n:
            if np.any(self.first == self.second):
                raise ValueError("battle with identical models")
            if self.first.min() < 0 or self.second.min() < 0 or self.category.min() < 0:
                raise IndexError("negative battle index")
            if max(self.first.max(), self.second.max()) >= self.d1 or self.category.max() >= self.d2:
                raise IndexError("battle index out of range")
            if not np.all((self.outcome == 0) | (self.outcome == 1)):
                raise ValueError("battle outcomes must be 0/1")

    def __len__(self) -> int:
        return len(self.category)

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def subset(self, idx) -> "Battles":
        return Battles(self.category[idx], self.first[idx], self.second[idx],
                       self.outcome[idx], self.d1, self.d2, self.weight[idx])

    def logits(self, T: np.ndarray) -> np.ndarray:
        return T[self.first, self.category] - T[self.second, self.category]

    def inner(self, H: np.ndarray) -> np.ndarray:
        """<H, X_i> for every battle."""
        return H[self.first, self.category] - H[self.second, self.category]

    def __iter__(self) -> Iterator[Battle]:
        for u, p, q, y in zip(self.category, self.first, self.second, self.outcome):
            yield Battle(DesignAtom(int(u), int(p), int(q)), int(y))

    @classmethod
    def from_list(cls, battles, d1: int, d2: int) -> "Battles":
        battles = list(battles)
        return cls(
            [b.atom.category for b in battles],
            [b.atom.first for b in battles],
            [b.atom.second for b in battles],
            [b.outcome for b in battles],
            d1, d2,
        )

    def concat(self, other: "Battles") -> "Battles":
        return Battles(
            np.concatenate([self.category, other.category]),
            np.concatenate([self.first, other.first]),
            np.concatenate([self.second, other.second]),
            np.concatenate([self.outcome, other.outcome]),
            self.d1, self.d2,
            np.concatenate([self.weight, other.weight]),
        )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingModel:
    """Product law over categories and unordered model pairs.

    ``kind == "uniform"`` samples the category and the unordered pair
    uniformly.  ``kind == "product"`` draws the category from
    ``category_probs`` and two models independently from ``model_probs``,
    redrawing on collision.
    """

    kind: str
    category_probs: np.ndarray
    model_probs: np.ndarray

    def __post_init__(self):
        if self.kind not in ("uniform", "product"):
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        for name in ("category_probs", "model_probs"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim != 1 or len(v) == 0 or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a probability vector")
            object.__setattr__(self, name, v)

    @classmethod
    def uniform(cls, d1: int, d2: int) -> "SamplingModel":
        return cls("uniform", np.full(d2, 1.0 / d2), np.full(d1, 1.0 / d1))

    @classmethod
    def product(cls, category_probs, model_probs) -> "SamplingModel":
        return cls("product", category_probs, model_probs)

    @property
    def d1(self) -> int:
        return len(self.model_probs)

    @property
    def d2(self) -> int:
        return len(self.category_probs)

    def collision_mass(self) -> float:
        return float(np.sum(self.model_probs ** 2))

    def pair_prob_matrix(self) -> np.ndarray:
        """Probability of each unordered pair {p, q}, stored symmetrically (zero diagonal)."""
        d1 = self.d1
        if self.kind == "uniform":
            P = np.full((d1, d1), 2.0 / (d1 * (d1 - 1)))
        else:
            s = self.collision_mass()
            if s >= 1.0 - 1e-15:
                raise OverlapError("model distribution is degenerate: no distinct pair can be drawn")
            pi = self.model_probs
            P = 2.0 * np.outer(pi, pi) / (1.0 - s)
        np.fill_diagonal(P, 0.0)
        return P

    def atom_prob_tensor(self) -> np.ndarray:
        """Array (d2, d1, d1) with the probability of atom (u, {p, q})."""
        return self.category_probs[:, None, None] * self.pair_prob_matrix()[None]


def uniform_atom_probability(d1: int, d2: int) -> float:
    return 1.0 / (d2 * d1 * (d1 - 1) / 2.0)


def atom_probability(s: SamplingModel, atom: DesignAtom) -> float:
    atom.check(s.d1, s.d2)
    if s.kind == "uniform":
        return uniform_atom_probability(s.d1, s.d2)
    sq = s.collision_mass()
    if sq >= 1.0 - 1e-15:
        raise OverlapError("model distribution is degenerate: no distinct pair can be drawn")
    pi = s.model_probs
    return float(s.category_probs[atom.category] * 2.0 * pi[atom.first] * pi[atom.second] / (1.0 - sq))


def importance_weight(s: SamplingModel, atom: DesignAtom) -> float:
    p = atom_probability(s, atom)
    if p <= 0.0:
        raise OverlapError(f"atom {atom} has zero sampling probability")
    return uniform_atom_probability(s.d1, s.d2) / p


def battle_weights(s: SamplingModel, battles: Battles) -> np.ndarray:
    """Vectorised importance weights q(x)/p(x) for every battle."""
    if s.kind == "uniform":
        return np.ones(len(battles))
    probs = s.pair_prob_matrix()[battles.first, battles.second] * s.category_probs[battles.category]
    if np.any(probs <= 0.0):
        raise OverlapError("observed battle has zero sampling probability")
    return uniform_atom_probability(s.d1, s.d2) / probs


def sample_battles(T: np.ndarray, s: SamplingModel, n: int, rng: np.random.Generator) -> Battles:
    """Draw ``n`` battles from ``s`` with BTL outcomes under score matrix ``T``."""
    d1, d2 = T.shape
    if (d1, d2) != (s.d1, s.d2):
        raise ValueError(f"score matrix {T.shape} does not match sampling model ({s.d1}, {s.d2})")
    if s.kind == "uniform":
        u = rng.integers(d2, size=n)
        p = rng.integers(d1, size=n)
        q = rng.integers(d1 - 1, size=n)
        q = q + (q >= p)
    else:
        if s.collision_mass() >= 1.0 - 1e-15:
            raise OverlapError("model distribution is degenerate: no distinct pair can be drawn")
        u = rng.choice(d2, size=n, p=s.category_probs)
        p = rng.choice(d1, size=n, p=s.model_probs)
        q = rng.choice(d1, size=n, p=s.model_probs)
        bad = np.flatnonzero(p == q)
        while bad.size:
            p[bad] = rng.choice(d1, size=bad.size, p=s.model_probs)
            q[bad] = rng.choice(d1, size=bad.size, p=s.model_probs)
            bad = bad[p[bad] == q[bad]]
    eta = T[p, u] - T[q, u]
    y = (rng.random(n) < sigmoid(eta)).astype(float)
    return Battles(u, p, q, y, d1, d2)


def sample_battle(T: np.ndarray, s: SamplingModel, rng: np.random.Generator) -> Battle:
    return next(iter(sample_battles(T, s, 1, rng)))


def estimate_sampling(battles: Battles, d1: int | None = None, d2: int | None = None,
                      max_iter: int = 500, tol: float = 1e-13) -> SamplingModel:
    """Product-form estimate of the sampling law with add-one smoothing.

    Category probabilities are smoothed frequencies.  For models, the
    smoothed appearance shares ``f`` are mapped back through the collision
    law ``f_m = pi_m (1 - pi_m) / (1 - sum pi^2)``; this is the maximum
    likelihood equation for pairs drawn with redraw-on-collision, and
    reduces to ``pi = f`` when every model is rare.
    """
    d1 = battles.d1 if d1 is None else d1
    d2 = battles.d2 if d2 is None else d2
    if len(battles) == 0:
        raise ValueError("cannot estimate a sampling law from zero battles")
    w = battles.weight
    n = w.sum()
    cat = np.bincount(battles.category, weights=w, minlength=d2)
    app = np.bincount(battles.first, weights=w, minlength=d1) + np.bincount(battles.second, weights=w, minlength=d1)
    pi_j = (cat + 1.0) / (n + d2)
    f = (app + 1.0) / (2.0 * n + d1)
    pi = f.copy()
    for _ in range(max_iter):
        s = np.sum(pi ** 2)
        new = f * (1.0 - s) / (1.0 - pi)
        new /= new.sum()
        new = 0.5 * pi + 0.5 * new
        if np.max(np.abs(new - pi)) < tol:
            pi = new
            break
        pi = new
    pi_j = pi_j / pi_j.sum()
    pi = pi / pi.sum()
    return SamplingModel.product(pi_j, pi)


def enumerate_atoms(d1: int, d2: int):
    """All unordered atoms (u, p, q) with p < q."""
    for u in range(d2):
        for p in range(d1):
            for q in range(p + 1, d1):
                yield DesignAtom(u, p, q)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))
