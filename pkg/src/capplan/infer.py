"""Plan sampling, marginal aggregation, transition estimation and Viterbi decoding."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .core import (
    PlanDistribution,
    PlanWindow,
    ShapeError,
    TransitionMatrix,
    ValidationError,
    plans_as_array,
)

# Absolute tolerance (log-space) under which two path scores count as tied.
TIE_TOL = 1e-9
BRUTE_FORCE_LIMIT = 10**6
DEFAULT_K = 1500


@dataclass(frozen=True, eq=False)
class SampledPlans:
    plans: np.ndarray  # (K, T) int64
    seed: int

    def __post_init__(self):
        plans = plans_as_array(self.plans)
        if plans.shape[0] < 1:
            raise ValidationError("SampledPlans needs K >= 1")
        plans.setflags(write=False)
        object.__setattr__(self, "plans", plans)

    @property
    def K(self) -> int:
        return self.plans.shape[0]

    @property
    def T(self) -> int:
        return self.plans.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SampledPlans):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.plans, other.plans)

    __hash__ = None


def _draw_noise(seed: int, K: int, z_dim: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(K, z_dim, generator=gen, dtype=torch.float64)


@torch.no_grad()
def sample_plans(model, window: PlanWindow, K: int = DEFAULT_K, seed: int = 0) -> SampledPlans:
    """Draw K noise vectors, run the generator, and argmax each step (ties -> lowest index)."""
    return sample_plans_many(model, [window], K, seed)[0]


@torch.no_grad()
def sample_plans_many(model, windows: Sequence[PlanWindow], K: int = DEFAULT_K, seed: int = 0,
                      chunk_rows: int = 8192) -> list[SampledPlans]:
    """Batched ``sample_plans``; window ``i`` uses seed ``seed + i``."""
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    out: list[SampledPlans] = []
    if not windows:
        return out
    T = windows[0].horizon
    if any(w.horizon != T for w in windows):
        raise ShapeError("sample_plans_many needs windows of one horizon")
    cfg = model.config
    dtype = model.dtype
    per_chunk = max(1, chunk_rows // K)
    for lo in range(0, len(windows), per_chunk):
        group = windows[lo:lo + per_chunk]
        start = torch.as_tensor(np.stack([w.start_obs for w in group]), dtype=dtype)
        goal = torch.as_tensor(np.stack([w.goal_obs for w in group]), dtype=dtype)
        z = torch.stack([_draw_noise(seed + lo + i, K, cfg.z_dim) for i in range(len(group))])
        logits = model.generate(start, goal, z.to(dtype), T)  # (G, K, T, N)
        idx = np.argmax(logits.to(torch.float64).numpy(), axis=-1)
        for i in range(len(group)):
            out.append(SampledPlans(idx[i], seed + lo + i))
    return out


def marginal_distribution(samples: SampledPlans | np.ndarray, n_actions: int) -> PlanDistribution:
    plans = samples.plans if isinstance(samples, SampledPlans) else plans_as_array(samples)
    if plans.shape[0] < 1:
        raise ValidationError("marginal_distribution needs K >= 1")
    if plans.min() < 0 or plans.max() >= n_actions:
        raise ValidationError(f"plan indices must lie in [0, {n_actions})")
    counts = kernels.count_marginals(np.ascontiguousarray(plans), n_actions)
    return PlanDistribution(counts / counts.sum(axis=1, keepdims=True))


def transition_counts(train_plans: Sequence[Sequence[int]], n_actions: int) -> np.ndarray:
    seqs = [np.asarray(p, dtype=np.int64) for p in train_plans]
    lengths = np.array([s.size for s in seqs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    flat = np.concatenate(seqs) if seqs else np.zeros(0, dtype=np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= n_actions):
        raise ValidationError(f"plan indices must lie in [0, {n_actions})")
    return kernels.count_transitions(flat, offsets, n_actions)


def estimate_transition(train_plans: Sequence[Sequence[int]], n_actions: int,
                        tau: float = 1.0) -> TransitionMatrix:
    """Bigram counts, row L1-normalized, then a row softmax at temperature ``tau``.

    Rows for actions never seen as a source stay zero after L1 and come out
    uniform from the softmax.
    """
    counts = transition_counts(train_plans, n_actions).astype(np.float64)
    if counts.sum() == 0:
        raise ValidationError("no transitions: every plan has fewer than 2 steps")
    row = counts.sum(axis=1, keepdims=True)
    l1 = np.divide(counts, row, out=np.zeros_like(counts), where=row > 0)
    logits = l1 / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return TransitionMatrix(e / e.sum(axis=1, keepdims=True))


def _log_inputs(A, B):
    a = A.probs if isinstance(A, TransitionMatrix) else np.asarray(A, dtype=np.float64)
    b = B.probs if isinstance(B, PlanDistribution) else np.asarray(B, dtype=np.float64)
    if b.ndim != 2 or a.shape != (b.shape[1], b.shape[1]):
        raise ShapeError(f"transition {a.shape} incompatible with emissions {b.shape}")
    if np.any(a <= 0):
        raise ValidationError("transition matrix must be strictly positive")
    if np.any(b < 0):
        raise ValidationError("emissions must be non-negative")
    for t in range(b.shape[0]):
        if not np.any(b[t] > 0):
            raise ValidationError(f"degenerate emissions at step {t}")
    with np.errstate(divide="ignore"):
        return np.log(a), np.log(b)


def path_score(log_a: np.ndarray, log_b: np.ndarray, path: Sequence[int]) -> float:
    score = log_b[0, path[0]]
    for t in range(1, len(path)):
        score += log_a[path[t - 1], path[t]] + log_b[t, path[t]]
    return float(score)


def viterbi_decode(A, B) -> tuple:
    """Most probable action sequence under transitions A and per-step emissions B.

    No initial-state prior: the first step is scored by its emission alone.
    Among paths within ``TIE_TOL`` of the optimum the lexicographically
    smallest is returned.
    """
    log_a, log_b = _log_inputs(A, B)
    path = kernels.viterbi_path(np.ascontiguousarray(log_a), np.ascontiguousarray(log_b), TIE_TOL)
    return tuple(int(s) for s in path)


def brute_force_decode(A, B) -> tuple:
    """Exhaustive oracle for :func:`viterbi_decode` (same scoring and tie rule)."""
    log_a, log_b = _log_inputs(A, B)
    T, N = log_b.shape
    if N ** T > BRUTE_FORCE_LIMIT:
        raise ValidationError(f"instance too large for enumeration: N^T = {N ** T}")
    paths = list(itertools.product(range(N), repeat=T))
    scores = [path_score(log_a, log_b, p) for p in paths]
    best = max(scores)
    for p, s in zip(paths, scores):  # product() yields lexicographic order
        if s >= best - TIE_TOL:
            return tuple(p)
    raise AssertionError("unreachable")


def plan(model, window: PlanWindow, K: int, A: TransitionMatrix, seed: int = 0):
    samples = sample_plans(model, window, K, seed)
    dist = marginal_distribution(samples, A.num_actions)
    return viterbi_decode(A, dist), dist


def plan_many(model, windows: Sequence[PlanWindow], K: int, A: TransitionMatrix, seed: int = 0):
    """``plan`` over a list of same-horizon windows; returns (decoded, dists, samples)."""
    samples = sample_plans_many(model, windows, K, seed)
    dists = [marginal_distribution(s, A.num_actions) for s in samples]
    decoded = [viterbi_decode(A, d) for d in dists]
    return decoded, dists, samples
