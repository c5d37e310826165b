"""Self-verification suites shared by ``capplan verify`` and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import infer, metrics
from .core import PlanWindow, TransitionMatrix
from .model import CriticConfig, GeneratorConfig, init_parameters
from .train import Batch, grad_check

TINY_CONFIG = GeneratorConfig(num_actions=4, max_horizon=3, obs_dim=16, hidden_dim=8, embed_hidden=16,
                              context_hidden=16, num_layers=2, num_heads=2, memory_size=8, z_dim=4,
                              ffn_mult=2)
TINY_CRITIC = CriticConfig((16, 8, 4))
ROW_TOL = 1e-9
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name, fn) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, passed, detail, time.perf_counter() - start)


def random_hmm(rng, N: int, T: int, tie: bool):
    """Random (A, B) instance; with ``tie`` two states are made interchangeable so optima tie exactly."""
    A = rng.random((N, N)) + 0.05
    B = rng.random((T, N))
    B[rng.random((T, N)) < 0.2] = 0.0
    if tie:
        i, j = rng.choice(N, 2, replace=False)
        A[:, j] = A[:, i]
        B[:, j] = B[:, i]
    A /= A.sum(1, keepdims=True)
    if tie:
        A[j] = A[i]
    B[~np.any(B > 0, axis=1)] = 0.5
    return TransitionMatrix(A), B


def viterbi_oracle(instances: int = 500, seed: int = 0):
    def run():
        rng = np.random.default_rng(seed)
        mismatches = ties = 0
        for k in range(instances):
            N, T = int(rng.integers(2, 7)), int(rng.integers(2, 6))
            tie = k % 3 == 0
            ties += tie
            A, B = random_hmm(rng, N, T, tie)
            if infer.viterbi_decode(A, B) != infer.brute_force_decode(A, B):
                mismatches += 1
        return mismatches == 0, f"{instances} instances ({ties} with engineered ties), {mismatches} mismatches"
    return _timed("viterbi_vs_brute_force", run)


def gradient_check(seed: int = 0, corrupt: tuple | None = None, tol: float = GRAD_TOL):
    def run():
        model = init_parameters(TINY_CONFIG, seed=seed, critic_config=TINY_CRITIC, dtype=torch.float64)
        rng = np.random.default_rng(seed)
        D = TINY_CONFIG.obs_dim
        windows = [PlanWindow(rng.standard_normal(D), rng.standard_normal(D), rng.standard_normal(D),
                              rng.standard_normal(D), rng.integers(TINY_CONFIG.num_actions, size=2), f"v{i}")
                   for i in range(3)]
        result = grad_check(model, Batch.from_windows(windows, torch.float64), corrupt=corrupt)
        per = ", ".join(f"{k}={v:.2e}" for k, v in result.per_loss.items())
        ok = result.max_rel_error <= tol
        where = "" if ok else f"; worst {result.worst[0]} at {result.worst[1]}[{result.worst[2]}]"
        return ok, f"max rel. error {result.max_rel_error:.2e} <= {tol:g} ({per}){where}"
    return _timed("gradient_check", run)


def row_sums(constructions: int = 1000, seed: int = 0):
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for k in range(constructions):
            N = int(rng.integers(2, 13))
            if k % 2 == 0:
                plans = rng.integers(N, size=(int(rng.integers(1, 200)), int(rng.integers(1, 7))))
                probs = infer.marginal_distribution(plans, N).probs
            else:
                plans = [rng.integers(N, size=int(rng.integers(2, 7))).tolist()
                         for _ in range(int(rng.integers(1, 30)))]
                probs = infer.estimate_transition(plans, N).probs
            worst = max(worst, float(np.abs(probs.sum(1) - 1).max()))
        A = infer.estimate_transition([[0, 1, 2], [0, 1, 1]], 3).probs
        example_err = float(np.abs(A[0] - [0.21194, 0.57612, 0.21194]).max())
        ok = worst <= ROW_TOL and example_err <= 1e-4
        return ok, (f"{constructions} constructions, worst |row sum - 1| = {worst:.1e}; "
                    f"worked example off by {example_err:.1e}")
    return _timed("row_sum_invariants", run)


def metric_identities(datasets: int = 100, seed: int = 0):
    def run():
        problems = []
        p, g = [[1, 2], [1, 3]], [[1, 2], [1, 2]]
        sr, macc, miou = metrics.success_rate(p, g), metrics.mean_accuracy(p, g), metrics.mean_iou(p, g)
        if sr != 50.0 or macc != 75.0 or abs(miou - 66.67) > 0.01:
            problems.append(f"hand example gave {sr}/{macc}/{miou:.4f}")

        rng = np.random.default_rng(seed)
        windows = []
        for i in range(30):
            s = int(rng.integers(3))
            windows.append(PlanWindow(np.full(4, float(s)), np.full(4, s + 3.0), np.zeros(4), np.zeros(4),
                                      rng.integers(5, size=3), f"v{i}", None, f"task0:{s}->{s + 3}"))
        A = TransitionMatrix(np.full((5, 5), 0.2))
        r = metrics.evaluate(None, windows, K=4, A=A, seed=0, sampler=metrics.oracle_sampler)[3]
        if (r.sr, r.macc, r.miou, r.mode_precision, r.mode_recall) != (100.0, 100.0, 100.0, 1.0, 1.0) \
                or abs(r.kl) > 1e-12:
            problems.append(f"oracle predictor gave {r.to_dict()}")

        for _ in range(datasets):
            B, T, N = int(rng.integers(1, 50)), int(rng.integers(1, 6)), int(rng.integers(2, 8))
            pr, gt = rng.integers(N, size=(B, T)), rng.integers(N, size=(B, T))
            if metrics.success_rate(pr, gt) > metrics.mean_accuracy(pr, gt):
                problems.append("SR > mAcc on a random dataset")
                break
        detail = "; ".join(problems) or f"hand example, oracle predictor, SR <= mAcc on {datasets} datasets"
        return not problems, detail
    return _timed("metric_identities", run)


def run_all(inject_fault: bool = False) -> list[CheckResult]:
    return [
        viterbi_oracle(),
        gradient_check(corrupt=("l_ca", 1.01) if inject_fault else None),
        metric_identities(),
        row_sums(),
    ]
