"""Pure-Python/numpy versions of the hot kernels.

Semantics must match ``_kernels.pyx`` exactly; ``tests/test_kernels.py`` runs
both side by side.
"""
import numpy as np


def viterbi_path(log_a, log_b, tol):
    """Lexicographically smallest max-score path.

    Backward pass computes the best score-to-go for every (t, state); the
    forward pass then commits to the smallest state whose total is within
    ``tol`` of the best achievable, which yields the lexicographic tie-break.
    """
    log_a = np.asarray(log_a, dtype=np.float64)
    log_b = np.asarray(log_b, dtype=np.float64)
    T, N = log_b.shape
    beta = np.zeros((T, N))
    for t in range(T - 2, -1, -1):
        nxt = log_b[t + 1] + beta[t + 1]
        beta[t] = np.max(log_a + nxt[None, :], axis=1)
    path = np.empty(T, dtype=np.int64)
    vals = log_b[0] + beta[0]
    path[0] = _first_within(vals, tol)
    for t in range(1, T):
        vals = log_a[path[t - 1]] + log_b[t] + beta[t]
        path[t] = _first_within(vals, tol)
    return path


def _first_within(vals, tol):
    best = vals.max()
    return int(np.flatnonzero(vals >= best - tol)[0])


def count_marginals(plans, n_actions):
    plans = np.asarray(plans, dtype=np.int64)
    K, T = plans.shape
    counts = np.zeros((T, n_actions), dtype=np.int64)
    for t in range(T):
        counts[t] = np.bincount(plans[:, t], minlength=n_actions)[:n_actions]
    return counts


def count_transitions(flat, offsets, n_actions):
    """Bigram counts over sequences packed as ``flat[offsets[i]:offsets[i+1]]``."""
    flat = np.asarray(flat, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.zeros((n_actions, n_actions), dtype=np.int64)
    for i in range(len(offsets) - 1):
        seq = flat[offsets[i]:offsets[i + 1]]
        if seq.size >= 2:
            np.add.at(counts, (seq[:-1], seq[1:]), 1)
    return counts
