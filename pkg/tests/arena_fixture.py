"""Synthetic arena battle log with a planted low-rank score matrix."""

import csv

import numpy as np

from pairinfer.model import SamplingModel, sample_battles
from pairinfer.simlab import gen_truth

CATEGORIES = ["coding", "math", "writing", "reasoning", "chat"]
STAR = "model-star"


def model_names(d: int) -> list:
    return [STAR] + [f"model-{i:02d}" for i in range(1, d)]


def planted_truth(d: int = 14, seed: int = 0) -> np.ndarray:
    """Rank-two scores: a random rank-one part plus a lead for the first model in every category."""
    rng = np.random.default_rng(seed)
    lead = np.zeros(d)
    lead[0] = 3.0
    return gen_truth(d, len(CATEGORIES), 1, 1.0, rng) + np.outer(lead - lead.mean(), np.ones(len(CATEGORIES)))


def write_log(path, n: int = 20_000, d: int = 14, tie_rate: float = 0.08, seed: int = 0) -> np.ndarray:
    """Write a battle log with a skewed design and a few ties; returns the planted truth."""
    rng = np.random.default_rng(seed)
    T = planted_truth(d, seed)
    s = SamplingModel.product(rng.dirichlet(np.full(len(CATEGORIES), 5.0)), rng.dirichlet(np.full(d, 3.0)))
    b = sample_battles(T, s, n, rng)
    names = model_names(d)
    tie = rng.random(n) < tie_rate
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_id", "model_a", "model_b", "category", "winner", "judge"])
        for t in range(n):
            winner = "tie" if tie[t] else ("model_a" if b.outcome[t] == 1 else "model_b")
            w.writerow([f"q{t}", names[b.first[t]], names[b.second[t]], CATEGORIES[b.category[t]], winner,
                        f"user{t % 97}"])
    return T
