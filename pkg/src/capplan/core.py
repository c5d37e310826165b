"""Domain types and elementary encodings shared across the package."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class CapPlanError(Exception):
    """Base class for package errors."""


class ValidationError(CapPlanError, ValueError):
    """Input violates a documented invariant.  ``violations`` lists every problem found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ShapeError(CapPlanError, ValueError):
    pass


class NumericError(CapPlanError, ArithmeticError):
    pass


ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ActionVocabulary:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValidationError(f"vocabulary needs at least 2 actions, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValidationError("action names must be unique")

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self):
        return len(self.names)

    def index(self, name) -> int:
        return self.names.index(name)

    @classmethod
    def numbered(cls, n: int) -> "ActionVocabulary":
        return cls(tuple(f"a{i:02d}" for i in range(n)))


def _frozen_vec(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PlanWindow:
    """One curated sample: start/goal embeddings, their captions and the GT steps between them.

    ``task_id`` and ``group_key`` are evaluation metadata; nothing that feeds the
    model reads them.
    """

    start_obs: np.ndarray
    goal_obs: np.ndarray
    start_caption_emb: np.ndarray
    goal_caption_emb: np.ndarray
    actions: tuple
    source_video_id: str
    task_id: Optional[str] = None
    group_key: Optional[str] = None

    def __post_init__(self):
        for name in ("start_obs", "goal_obs", "start_caption_emb", "goal_caption_emb"):
            object.__setattr__(self, name, _frozen_vec(getattr(self, name)))
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, PlanWindow):
            return NotImplemented
        return (
            self.actions == other.actions
            and self.source_video_id == other.source_video_id
            and self.task_id == other.task_id
            and self.group_key == other.group_key
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("start_obs", "goal_obs", "start_caption_emb", "goal_caption_emb")
            )
        )

    __hash__ = None

    def with_captions_zeroed(self) -> "PlanWindow":
        zero = np.zeros_like(self.start_caption_emb)
        return PlanWindow(self.start_obs, self.goal_obs, zero, zero, self.actions,
                          self.source_video_id, self.task_id, self.group_key)


def _check_row_stochastic(probs: np.ndarray, what: str, strict: bool = False):
    if probs.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValidationError(f"{what} has non-finite entries")
    lo_ok = np.all(probs > 0) if strict else np.all(probs >= 0)
    if not lo_ok or np.any(probs > 1):
        raise ValidationError(f"{what} entries outside {'(0,1)' if strict else '[0,1]'}")
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOL)
    if bad.size:
        raise ValidationError(f"{what} rows {bad.tolist()} do not sum to 1")


@dataclass(frozen=True, eq=False)
class PlanDistribution:
    """T x N matrix of per-step marginal action probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen_vec(self.probs)
        _check_row_stochastic(probs, "PlanDistribution")
        object.__setattr__(self, "probs", probs)

    @property
    def horizon(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen_vec(self.probs)
        if probs.ndim != 2 or probs.shape[0] != probs.shape[1]:
            raise ShapeError(f"TransitionMatrix must be square, got {probs.shape}")
        _check_row_stochastic(probs, "TransitionMatrix", strict=True)
        object.__setattr__(self, "probs", probs)

    @property
    def num_actions(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class MetricReport:
    horizon: int
    sr: float
    macc: float
    miou: float
    kl: float
    nll: float
    cosine_distance: float
    mode_precision: float
    mode_recall: float
    num_samples_K: int
    seed: int
    num_windows: int = 0
    num_groups: int = 0

    def __post_init__(self):
        for name in ("sr", "macc", "miou", "kl", "nll", "cosine_distance",
                     "mode_precision", "mode_recall"):
            if not math.isfinite(getattr(self, name)):
                raise NumericError(f"metric {name} is not finite")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "sr": self.sr,
            "macc": self.macc,
            "miou": self.miou,
            "kl": self.kl,
            "nll": self.nll,
            "cosine_distance": self.cosine_distance,
            "mode_precision": self.mode_precision,
            "mode_recall": self.mode_recall,
            "K": self.num_samples_K,
            "seed": self.seed,
            "num_windows": self.num_windows,
            "num_groups": self.num_groups,
        }


def one_hot(index: int, size: int) -> np.ndarray:
    if not 0 <= index < size:
        raise ValidationError(f"action index {index} out of range for N={size}")
    out = np.zeros(size, dtype=np.float64)
    out[index] = 1.0
    return out


def validate_window(w: PlanWindow, vocab: ActionVocabulary | int, expected_dim: int) -> PlanWindow:
    """Return ``w`` unchanged if every invariant holds, else raise listing all violations."""
    n = vocab if isinstance(vocab, int) else vocab.size
    problems = []
    for name in ("start_obs", "goal_obs", "start_caption_emb", "goal_caption_emb"):
        vec = getattr(w, name)
        if vec.shape != (expected_dim,):
            problems.append(f"{name}: dimension mismatch, expected {expected_dim}, got {vec.shape}")
        elif not np.all(np.isfinite(vec)):
            kind = "observation" if name.endswith("obs") else "caption embedding"
            problems.append(f"{name}: non-finite {kind}")
    if len(w.actions) == 0:
        problems.append("actions: empty plan")
    for pos, a in enumerate(w.actions):
        if not 0 <= a < n:
            problems.append(f"actions[{pos}]: action index out of range ({a} with N={n})")
    if problems:
        raise ValidationError(problems)
    return w


def plans_as_array(plans: Sequence[Sequence[int]]) -> np.ndarray:
    arr = np.asarray(plans, dtype=np.int64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D collection of plans, got shape {arr.shape}")
    return arr
