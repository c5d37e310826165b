import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from capplan.core import PlanWindow, ShapeError, TransitionMatrix, ValidationError
from capplan.infer import (
    SampledPlans,
    brute_force_decode,
    estimate_transition,
    marginal_distribution,
    plan,
    sample_plans,
    sample_plans_many,
    viterbi_decode,
)


def uniform(n):
    return TransitionMatrix(np.full((n, n), 1.0 / n))


# ---------------------------------------------------------------- oracle helpers

def enumerate_best(A, B):
    """Independent oracle: product-space probabilities, exact tie handling via a tolerance."""
    T, N = B.shape
    scored = []
    for p in itertools.product(range(N), repeat=T):
        prob = B[0, p[0]]
        for t in range(1, T):
            prob *= A[p[t - 1], p[t]] * B[t, p[t]]
        scored.append((prob, p))
    best = max(s for s, _ in scored)
    return min(p for s, p in scored if s >= best * (1 - 1e-9))


def random_instance(rng, N, T, tie=False):
    A = rng.random((N, N)) + 0.05
    A /= A.sum(1, keepdims=True)
    B = rng.random((T, N))
    B[rng.random((T, N)) < 0.2] = 0.0
    B[np.arange(T), rng.integers(N, size=T)] += 0.05
    if tie and N >= 2:
        i, j = sorted(rng.choice(N, 2, replace=False))
        B[:, j] = B[:, i]
        A[:, j] = A[:, i]
        A /= A.sum(1, keepdims=True)
        A[j] = A[i]
    B[~np.any(B > 0, axis=1)] = 0.05
    return A, B


# ---------------------------------------------------------------- Viterbi

def test_uniform_transitions_reduce_to_per_step_argmax():
    assert viterbi_decode(uniform(2), np.array([[0.9, 0.1], [0.2, 0.8]])) == (0, 1)


def test_viterbi_tie_prefers_lexicographically_smallest():
    A = np.array([[0.1, 0.9], [0.9, 0.1]])
    B = np.array([[0.6, 0.4], [0.6, 0.4]])
    # 01 and 10 both score 0.6 * 0.9 * 0.4 = 0.216
    assert math.isclose(0.6 * 0.9 * 0.4, 0.4 * 0.9 * 0.6)
    assert viterbi_decode(A, B) == (0, 1)
    assert brute_force_decode(A, B) == (0, 1)
    assert enumerate_best(A, B) == (0, 1)


def test_single_step_is_row_argmax():
    assert viterbi_decode(uniform(3), np.array([[0.2, 0.5, 0.3]])) == (1,)


def test_single_state_vocabulary():
    assert brute_force_decode(np.ones((1, 1)), np.ones((3, 1))) == (0, 0, 0)
    assert viterbi_decode(np.ones((1, 1)), np.ones((3, 1))) == (0, 0, 0)


def test_degenerate_emission_row_is_rejected():
    with pytest.raises(ValidationError, match="degenerate emissions at step 1"):
        viterbi_decode(uniform(2), np.array([[0.5, 0.5], [0.0, 0.0]]))


def test_brute_force_rejects_large_instances():
    with pytest.raises(ValidationError, match="too large"):
        brute_force_decode(uniform(10), np.full((7, 10), 0.1))


def test_viterbi_matches_independent_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(200):
        N, T = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        A, B = random_instance(rng, N, T, tie=bool(rng.integers(2)))
        assert viterbi_decode(A, B) == enumerate_best(A, B)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1), st.booleans())
def test_viterbi_equals_brute_force(N, T, seed, tie):
    A, B = random_instance(np.random.default_rng(seed), N, T, tie)
    assert viterbi_decode(A, B) == brute_force_decode(A, B)


# ---------------------------------------------------------------- marginals & transitions

def test_marginal_distribution_hand_counted():
    d = marginal_distribution(np.array([[0, 1], [0, 2], [1, 1], [0, 1]]), 3)
    assert np.allclose(d.probs, [[0.75, 0.25, 0.0], [0.0, 0.75, 0.25]], atol=0, rtol=0)


def test_marginal_single_sample_rows_are_one_hot():
    d = marginal_distribution(np.array([[2, 0, 1]]), 3)
    assert d.probs.tolist() == [[0, 0, 1], [1, 0, 0], [0, 1, 0]]


def test_marginal_rejects_out_of_vocab():
    with pytest.raises(ValidationError):
        marginal_distribution(np.array([[0, 3]]), 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 6), st.integers(2, 15), st.integers(0, 2**32 - 1))
def test_marginal_rows_sum_to_one_and_are_multiples_of_one_over_k(K, T, N, seed):
    plans = np.random.default_rng(seed).integers(N, size=(K, T))
    d = marginal_distribution(plans, N)
    assert np.all(np.abs(d.probs.sum(1) - 1) <= 1e-9)
    assert np.allclose(d.probs * K, np.round(d.probs * K), atol=1e-9)


def test_transition_worked_example():
    A = estimate_transition([[0, 1, 2], [0, 1, 1]], 3).probs
    e = math.e
    assert A[0] == pytest.approx([1 / (2 + e), e / (2 + e), 1 / (2 + e)], abs=1e-12)
    assert A[0] == pytest.approx([0.21194, 0.57612, 0.21194], abs=1e-4)
    # counts [0, 1, 1] -> L1 [0, .5, .5] -> softmax
    s = 1 + 2 * math.exp(0.5)
    assert A[1] == pytest.approx([1 / s, math.exp(0.5) / s, math.exp(0.5) / s], abs=1e-12)
    assert A[1] == pytest.approx([0.23270, 0.38365, 0.38365], abs=1e-4)
    # action 2 never precedes anything: uniform row
    assert A[2] == pytest.approx([1 / 3] * 3, abs=1e-15)


def test_transition_requires_some_transition():
    with pytest.raises(ValidationError, match="no transitions"):
        estimate_transition([[1], [2]], 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_transition_invariants(N, seed):
    rng = np.random.default_rng(seed)
    plans = [rng.integers(N, size=int(rng.integers(2, 7))).tolist() for _ in range(int(rng.integers(1, 20)))]
    A = estimate_transition(plans, N).probs
    assert np.all(A > 0)
    assert np.all(np.abs(A.sum(1) - 1) <= 1e-9)
    # duplicating every plan scales counts; L1 normalization cancels it
    assert np.array_equal(estimate_transition(plans * 2, N).probs, A)


# ---------------------------------------------------------------- sampling

def _windows(make_windows, count=3, T=3):
    return make_windows(count, T=T)


def test_sample_plans_shape(tiny_model, make_windows):
    w = _windows(make_windows)[0]
    s = sample_plans(tiny_model, w, K=4, seed=0)
    assert s.plans.shape == (4, 3)
    assert s.plans.min() >= 0 and s.plans.max() < 4


def test_sample_plans_deterministic(tiny_model, make_windows):
    w = _windows(make_windows)[0]
    assert sample_plans(tiny_model, w, 50, seed=3) == sample_plans(tiny_model, w, 50, seed=3)
    assert sample_plans(tiny_model, w, 50, seed=3) != sample_plans(tiny_model, w, 50, seed=4)


def test_noise_changes_plans_for_generic_weights(tiny_model, make_windows):
    with torch.no_grad():
        tiny_model.noise_proj.weight.mul_(20)
    s = sample_plans(tiny_model, _windows(make_windows)[0], 200, seed=0)
    assert len({tuple(p) for p in s.plans.tolist()}) > 1


def _freeze_head(model, bias):
    with torch.no_grad():
        for p in model.head.parameters():
            p.zero_()
        model.head[-1].bias.copy_(torch.tensor(bias))


def test_frozen_head_makes_all_samples_identical(tiny_model, make_windows):
    _freeze_head(tiny_model, [0.1, 0.3, 2.0, -1.0])
    s = sample_plans(tiny_model, _windows(make_windows)[0], 64, seed=0)
    assert np.all(s.plans == 2)


def test_argmax_ties_go_to_lowest_index(tiny_model, make_windows):
    _freeze_head(tiny_model, [0.0, 1.0, 1.0, 1.0])
    s = sample_plans(tiny_model, _windows(make_windows)[0], 8, seed=0)
    assert np.all(s.plans == 1)


def test_batched_sampling_matches_single_window(tiny_model, make_windows):
    ws = _windows(make_windows, count=5)
    many = sample_plans_many(tiny_model, ws, 30, seed=10, chunk_rows=60)
    for i, w in enumerate(ws):
        assert many[i] == sample_plans(tiny_model, w, 30, seed=10 + i)


def test_plan_with_deterministic_generator_and_uniform_transitions(tiny_model, make_windows):
    _freeze_head(tiny_model, [0.0, 0.0, 0.0, 5.0])
    decoded, dist = plan(tiny_model, _windows(make_windows)[0], K=20, A=uniform(4), seed=0)
    assert decoded == (3, 3, 3)
    assert dist.probs[:, 3].tolist() == [1.0, 1.0, 1.0]


def test_plan_deterministic(tiny_model, make_windows):
    w = _windows(make_windows)[0]
    A = estimate_transition([[0, 1, 2, 3], [1, 2]], 4)
    a = plan(tiny_model, w, 100, A, seed=5)
    b = plan(tiny_model, w, 100, A, seed=5)
    assert a[0] == b[0] and np.array_equal(a[1].probs, b[1].probs)


def test_sampled_plans_validation():
    with pytest.raises(ValidationError):
        SampledPlans(np.zeros((0, 3), dtype=int), 0)
    with pytest.raises(ValidationError):
        sample_plans_many(None, [], K=0)


def test_mixed_horizons_rejected(tiny_model, make_windows):
    ws = make_windows(1, T=2) + make_windows(1, T=3)
    with pytest.raises(ShapeError):
        sample_plans_many(tiny_model, ws, 4)
