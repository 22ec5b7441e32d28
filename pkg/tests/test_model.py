import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairinfer.model import (
    SATURATION_LOGIT,
    Battle,
    Battles,
    DesignAtom,
    ExtremeLogitError,
    OverlapError,
    SamplingModel,
    atom_inner,
    atom_probability,
    battle_weights,
    enumerate_atoms,
    estimate_sampling,
    fisher_info,
    importance_weight,
    sample_battles,
    score,
    sigmoid,
    uniform_atom_probability,
    whitened_score,
)

finite = st.floats(-30, 30, allow_nan=False)


# link functions

def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert abs(sigmoid(40.0) - 1.0) < 1e-15
    assert sigmoid(1.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert sigmoid(-800.0) == 0.0


def test_sigmoid_rejects_nan():
    with pytest.raises(ValueError):
        sigmoid(float("nan"))


@given(finite)
def test_sigmoid_symmetry(eta):
    assert sigmoid(eta) + sigmoid(-eta) == pytest.approx(1.0, abs=1e-15)


def test_score_values():
    assert score(1, 0.0) == 0.5
    assert score(0, 0.0) == -0.5


@given(finite)
def test_score_centred_under_model(eta):
    p = sigmoid(eta)
    assert p * score(1, eta) + (1 - p) * score(0, eta) == pytest.approx(0.0, abs=1e-15)


def test_fisher_info_values():
    assert fisher_info(0.0) == 0.25
    s = 1.0 / (1.0 + math.exp(-10.0))
    assert fisher_info(10.0) == pytest.approx(s * (1 - s), rel=1e-12)


@given(finite)
def test_fisher_info_even(eta):
    assert fisher_info(eta) == fisher_info(-eta)


def test_whitened_score_values():
    assert whitened_score(1, 0.0) == 2.0
    assert whitened_score(0, 0.0) == -2.0


@given(finite)
def test_whitened_score_centred(eta):
    p = sigmoid(eta)
    val = p * whitened_score(1, eta) + (1 - p) * whitened_score(0, eta)
    assert val == pytest.approx(0.0, abs=1e-9 * (1 + abs(whitened_score(1, eta))))


def test_whitened_score_saturation_guard():
    with pytest.raises(ExtremeLogitError):
        whitened_score(1, SATURATION_LOGIT + 1)
    with pytest.raises(ExtremeLogitError, match="index 2"):
        whitened_score(np.ones(3), np.array([0.0, 1.0, -50.0]))


# atoms and battles

def test_atom_inner():
    d1, d2 = 3, 2
    assert atom_inner(np.ones((d1, d2)), DesignAtom(1, 0, 2)) == 0.0
    E = np.zeros((d1, d2))
    E[0, 1] = 1.0
    assert atom_inner(E, DesignAtom(1, 0, 2)) == 1.0
    H = np.random.default_rng(1).standard_normal((d1, d2))
    assert atom_inner(H, DesignAtom(1, 0, 2)) == H[0, 1] - H[2, 1]


def test_atom_validation():
    with pytest.raises(ValueError):
        DesignAtom(0, 1, 1)
    with pytest.raises(IndexError):
        atom_inner(np.zeros((2, 2)), DesignAtom(0, 0, 5))
    with pytest.raises(ValueError):
        Battle(DesignAtom(0, 0, 1), 2)


def test_battles_validation():
    with pytest.raises(ValueError):
        Battles([0], [1], [1], [1], 2, 1)
    with pytest.raises(IndexError):
        Battles([1], [0], [1], [1], 2, 1)
    with pytest.raises(ValueError):
        Battles([0], [0], [1], [0.5], 2, 1)
    with pytest.raises(ValueError):
        Battles([0, 0], [0], [1], [1], 2, 1)


def test_battles_roundtrip_and_inner(rng):
    T = rng.standard_normal((4, 3))
    b = sample_battles(T, SamplingModel.uniform(4, 3), 50, rng)
    again = Battles.from_list(list(b), 4, 3)
    np.testing.assert_array_equal(again.first, b.first)
    np.testing.assert_array_equal(again.outcome, b.outcome)
    for i, battle in enumerate(b):
        assert b.logits(T)[i] == atom_inner(T, battle.atom)
    both = b.concat(b.subset(np.arange(5)))
    assert len(both) == 55
    assert both.total_weight == 55.0


# sampling

def test_null_outcomes_are_fair(rng):
    b = sample_battles(np.zeros((5, 3)), SamplingModel.uniform(5, 3), 40_000, rng)
    assert abs(b.outcome.mean() - 0.5) < 4 * 0.5 / math.sqrt(40_000)


def test_uniform_atom_frequencies(rng):
    n = 60_000
    b = sample_battles(np.zeros((3, 2)), SamplingModel.uniform(3, 2), n, rng)
    lo, hi = np.minimum(b.first, b.second), np.maximum(b.first, b.second)
    key = b.category * 9 + lo * 3 + hi
    counts = {k: int(np.sum(key == k)) for k in np.unique(key)}
    assert len(counts) == 6
    sd = math.sqrt(n * (1 / 6) * (5 / 6))
    for c in counts.values():
        assert abs(c - n / 6) < 3 * sd


def test_product_sampling_zero_mass(rng):
    s = SamplingModel.product([1.0], [0.5, 0.5, 0.0])
    b = sample_battles(np.zeros((3, 1)), s, 2000, rng)
    assert not np.any(b.first == 2) and not np.any(b.second == 2)


def test_degenerate_product_sampling(rng):
    with pytest.raises(OverlapError):
        sample_battles(np.zeros((2, 1)), SamplingModel.product([1.0], [1.0, 0.0]), 5, rng)


def test_atom_probability_values():
    u = SamplingModel.uniform(3, 2)
    for a in enumerate_atoms(3, 2):
        assert atom_probability(u, a) == pytest.approx(1 / 6)
    flat = SamplingModel.product([0.5, 0.5], [1 / 3] * 3)
    for a in enumerate_atoms(3, 2):
        assert atom_probability(flat, a) == pytest.approx(1 / 6, rel=1e-12)
    s = SamplingModel.product([1.0], [0.6, 0.3, 0.1])
    assert atom_probability(s, DesignAtom(0, 0, 1)) == pytest.approx(2 * 0.6 * 0.3 / (1 - 0.46), rel=1e-12)


def test_atom_probabilities_sum_to_one(rng):
    s = SamplingModel.product(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(5)))
    assert sum(atom_probability(s, a) for a in enumerate_atoms(5, 3)) == pytest.approx(1.0, abs=1e-12)
    assert s.atom_prob_tensor().sum() == pytest.approx(2.0, abs=1e-12)  # both orientations stored


def test_importance_weights(rng):
    assert importance_weight(SamplingModel.uniform(4, 2), DesignAtom(1, 0, 3)) == 1.0
    flat = SamplingModel.product([0.5, 0.5], [0.25] * 4)
    assert importance_weight(flat, DesignAtom(1, 0, 3)) == pytest.approx(1.0, rel=1e-12)
    s = SamplingModel.product(rng.dirichlet(np.ones(2)), rng.dirichlet(np.ones(4)))
    for a in enumerate_atoms(4, 2):
        assert importance_weight(s, a) * atom_probability(s, a) == pytest.approx(uniform_atom_probability(4, 2))
    b = sample_battles(np.zeros((4, 2)), s, 30, rng)
    expected = [importance_weight(s, x.atom) for x in b]
    np.testing.assert_allclose(battle_weights(s, b), expected, rtol=1e-12)


def test_importance_weight_zero_probability():
    s = SamplingModel.product([1.0], [0.5, 0.5, 0.0])
    with pytest.raises(OverlapError):
        importance_weight(s, DesignAtom(0, 0, 2))


def test_sampling_validation():
    with pytest.raises(ValueError):
        SamplingModel.product([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        SamplingModel("other", np.ones(1), np.ones(1))


def test_estimate_sampling_smoothing():
    n = 50
    b = Battles(np.zeros(n, int), np.zeros(n, int), np.ones(n, int), np.ones(n), 2, 2)
    s = estimate_sampling(b)
    np.testing.assert_allclose(s.category_probs, [(n + 1) / (n + 2), 1 / (n + 2)])
    one = estimate_sampling(Battles([0], [0], [1], [1], 2, 1))
    np.testing.assert_allclose(one.model_probs, [0.5, 0.5])


def test_estimate_sampling_concentration(rng):
    truth = SamplingModel.product(rng.dirichlet(np.full(4, 5.0)), rng.dirichlet(np.full(8, 5.0)))
    b = sample_battles(np.zeros((8, 4)), truth, 100_000, rng)
    est = estimate_sampling(b)
    assert np.max(np.abs(est.model_probs / truth.model_probs - 1)) < 0.05
    assert np.max(np.abs(est.category_probs / truth.category_probs - 1)) < 0.05


def test_estimate_sampling_empty():
    with pytest.raises(ValueError):
        estimate_sampling(Battles([], [], [], [], 2, 1))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_sampling_reproducible(d1, d2, seed):
    T = np.random.default_rng(seed).standard_normal((d1, d2))
    s = SamplingModel.uniform(d1, d2)
    a = sample_battles(T, s, 20, np.random.default_rng(seed))
    b = sample_battles(T, s, 20, np.random.default_rng(seed))
    for f in ("category", "first", "second", "outcome"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
