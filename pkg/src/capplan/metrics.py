"""Plan evaluation: SR / mAcc / mIoU on decoded plans and distributional metrics on samples."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import infer
from .core import (
    MetricReport,
    PlanDistribution,
    PlanWindow,
    ShapeError,
    TransitionMatrix,
    ValidationError,
    plans_as_array,
)

NORMALIZATION_TOL = 1e-6


def _pair(preds, gts):
    p = plans_as_array(preds)
    g = plans_as_array(gts)
    if p.shape != g.shape:
        raise ShapeError(f"predictions {p.shape} and ground truth {g.shape} differ in shape")
    if p.shape[0] == 0:
        raise ValidationError("no samples to score")
    return p, g


def success_rate(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return 100.0 * float(np.mean(np.all(p == g, axis=1)))


def mean_accuracy(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return 100.0 * float(np.mean(np.mean(p == g, axis=1)))


def mean_iou(preds, gts) -> float:
    """Per-sample set IoU, averaged over samples (not over mini-batches)."""
    p, g = _pair(preds, gts)
    ious = []
    for a, b in zip(p.tolist(), g.tolist()):
        sa, sb = set(a), set(b)
        ious.append(len(sa & sb) / len(sa | sb))
    return 100.0 * float(np.mean(ious))


def _check_normalized(dist: Mapping, what: str):
    total = sum(dist.values())
    if abs(total - 1.0) > NORMALIZATION_TOL or any(v < 0 for v in dist.values()):
        raise ValidationError(f"{what} is not a normalized distribution (sums to {total})")


def kl_divergence(pred_dist: Mapping, gt_dist: Mapping, epsilon: float = 1e-8) -> float:
    """KL(gt || pred) over the union support; pred is floored at ``epsilon`` and renormalized."""
    _check_normalized(pred_dist, "predicted distribution")
    _check_normalized(gt_dist, "ground-truth distribution")
    support = sorted(set(pred_dist) | set(gt_dist))
    q = np.array([max(pred_dist.get(k, 0.0), epsilon) for k in support])
    q /= q.sum()
    kl = 0.0
    for k, qk in zip(support, q):
        pk = gt_dist.get(k, 0.0)
        if pk > 0:
            kl += pk * math.log(pk / qk)
    return max(kl, 0.0)


def plan_frequencies(plans) -> dict:
    arr = plans_as_array(plans)
    counts = Counter(map(tuple, arr.tolist()))
    K = arr.shape[0]
    return {p: c / K for p, c in sorted(counts.items())}


@dataclass(frozen=True, eq=False)
class EvalGroup:
    """All windows sharing one (start, goal) context."""

    key: str
    gt_plans: tuple
    samples: np.ndarray  # (K_total, T) sampled plans pooled over the group's windows
    gt_distribution: Optional[dict] = None

    def __post_init__(self):
        gts = tuple(tuple(int(a) for a in p) for p in self.gt_plans)
        if not gts:
            raise ValidationError(f"group {self.key}: no ground-truth plans")
        if len({len(p) for p in gts}) != 1:
            raise ValidationError(f"group {self.key}: inconsistent horizons")
        samples = plans_as_array(self.samples)
        if samples.shape[0] == 0:
            raise ValidationError(f"group {self.key}: no samples")
        if samples.shape[1] != len(gts[0]):
            raise ShapeError(f"group {self.key}: samples have horizon {samples.shape[1]}")
        object.__setattr__(self, "gt_plans", gts)
        object.__setattr__(self, "samples", samples)

    @property
    def K(self) -> int:
        return self.samples.shape[0]

    def gt_dist(self) -> dict:
        if self.gt_distribution is not None:
            return dict(self.gt_distribution)
        return plan_frequencies(self.gt_plans)


def mode_metrics(group: EvalGroup) -> tuple[float, float]:
    modes = set(group.gt_plans)
    sampled = Counter(map(tuple, group.samples.tolist()))
    on_mode = sum(c for p, c in sampled.items() if p in modes)
    precision = on_mode / group.K
    recall = sum(1 for m in modes if m in sampled) / len(modes)
    return precision, recall


def nll(group: EvalGroup, epsilon: float | None = None) -> float:
    """Mean over GT plans of -log(sample frequency + epsilon); epsilon defaults to 1/(2K)."""
    eps = 1.0 / (2 * group.K) if epsilon is None else epsilon
    freq = plan_frequencies(group.samples)
    return float(np.mean([-math.log(freq.get(p, 0.0) + eps) for p in group.gt_plans]))


def cosine_distance(pred, gt) -> float:
    a = np.asarray(pred.probs if isinstance(pred, PlanDistribution) else pred, dtype=np.float64).ravel()
    b = np.asarray(gt.probs if isinstance(gt, PlanDistribution) else gt, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare distributions of shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine distance undefined for a zero vector")
    cos = float(a @ b) / (na * nb)
    return float(min(2.0, max(0.0, 1.0 - cos)))


def distribution_marginals(dist: Mapping, n_actions: int) -> PlanDistribution:
    """Per-step marginals of a distribution over whole plans."""
    T = len(next(iter(dist)))
    probs = np.zeros((T, n_actions))
    for plan, p in dist.items():
        probs[np.arange(T), list(plan)] += p
    return PlanDistribution(probs / probs.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- full evaluation

Sampler = Callable[[Sequence[PlanWindow], int, int], list]


def model_sampler(model) -> Sampler:
    def sample(windows, K, seed):
        return infer.sample_plans_many(model, windows, K, seed)
    return sample


def oracle_sampler(windows, K, seed):
    """Emits each window's ground truth K times."""
    return [infer.SampledPlans(np.tile(np.asarray(w.actions), (K, 1)), seed + i)
            for i, w in enumerate(windows)]


def uniform_sampler(n_actions: int) -> Sampler:
    def sample(windows, K, seed):
        return [infer.SampledPlans(
            np.random.default_rng(seed + i).integers(n_actions, size=(K, w.horizon)), seed + i)
            for i, w in enumerate(windows)]
    return sample


def canonical_order(windows: Sequence[PlanWindow]) -> list[PlanWindow]:
    """Order-independent ordering so per-window seeds do not depend on input order."""
    return sorted(windows, key=lambda w: (w.source_video_id, w.actions, w.start_obs.tobytes(),
                                          w.goal_obs.tobytes()))


def evaluate(model, windows: Sequence[PlanWindow], K: int = infer.DEFAULT_K,
             A: TransitionMatrix | None = None, seed: int = 0,
             horizons: Sequence[int] | None = None, sampler: Sampler | None = None,
             world=None) -> dict[int, MetricReport]:
    """One MetricReport per horizon.

    Decoded plans (samples -> marginals -> Viterbi) give SR/mAcc/mIoU; the raw
    samples, pooled per (start, goal) group, give the distributional metrics,
    which are averaged over groups in sorted key order.  With ``world`` the
    exact plan distribution replaces the empirical GT distribution for KL and
    cosine distance.
    """
    if not windows:
        raise ValidationError("evaluation set is empty")
    if A is None:
        raise ValidationError("a transition matrix is required for decoding")
    n_actions = A.num_actions
    sampler = sampler or model_sampler(model)
    wanted = sorted({w.horizon for w in windows}) if horizons is None else sorted(set(horizons))
    reports = {}
    for T in wanted:
        ws = canonical_order([w for w in windows if w.horizon == T])
        if not ws:
            continue
        samples = sampler(ws, K, seed)
        decoded = []
        for s in samples:
            dist = infer.marginal_distribution(s, n_actions)
            decoded.append(infer.viterbi_decode(A, dist))
        gts = [w.actions for w in ws]

        grouped: dict[str, list[int]] = {}
        for i, w in enumerate(ws):
            grouped.setdefault(w.group_key or f"{w.source_video_id}#{i}", []).append(i)
        kls, nlls, coss, precs, recs = [], [], [], [], []
        for key in sorted(grouped):
            idx = grouped[key]
            exact = _oracle_distribution(world, key, T) if world is not None else None
            group = EvalGroup(key, tuple(gts[i] for i in idx),
                              np.concatenate([samples[i].plans for i in idx]), exact)
            gt_dist = group.gt_dist()
            kls.append(kl_divergence(plan_frequencies(group.samples), gt_dist))
            nlls.append(nll(group))
            coss.append(cosine_distance(infer.marginal_distribution(group.samples, n_actions),
                                        distribution_marginals(gt_dist, n_actions)))
            p, r = mode_metrics(group)
            precs.append(p)
            recs.append(r)
        reports[T] = MetricReport(
            horizon=T,
            sr=success_rate(decoded, gts),
            macc=mean_accuracy(decoded, gts),
            miou=mean_iou(decoded, gts),
            kl=float(np.mean(kls)),
            nll=float(np.mean(nlls)),
            cosine_distance=float(np.mean(coss)),
            mode_precision=float(np.mean(precs)),
            mode_recall=float(np.mean(recs)),
            num_samples_K=K,
            seed=seed,
            num_windows=len(ws),
            num_groups=len(grouped),
        )
    return reports


def _oracle_distribution(world, key: str, T: int):
    from .synthworld import gt_plan_distribution, parse_group_key
    try:
        task, s, g = parse_group_key(key)
    except ValueError:
        return None
    return gt_plan_distribution(world, (task, s), g, T)
