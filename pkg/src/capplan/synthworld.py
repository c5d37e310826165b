"""Synthetic instructional-task world, window curation, splits and the dataset file format.

A task is a small DAG of states.  State 0 is the initial state (no action
performed yet); every other state is reached by performing its action.  Each
video walks one root-to-leaf path, and every state along it emits a noisy
observation embedding and a noisy caption embedding.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import CapPlanError, PlanWindow, ValidationError

PROB_TOL = 1e-9
ROOT = 0


class DatasetFormatError(CapPlanError, ValueError):
    pass


@dataclass(frozen=True)
class TaskGraph:
    """``actions[s]`` is the action that reaches state ``s`` (-1 for the root);
    ``successors[s]`` lists ``(child_state, probability)`` pairs."""

    actions: tuple
    successors: tuple

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        object.__setattr__(self, "successors", tuple(
            tuple((int(c), float(p)) for c, p in succ) for succ in self.successors))

    @property
    def num_states(self) -> int:
        return len(self.actions)

    def is_leaf(self, state: int) -> bool:
        return not self.successors[state]

    def depth(self, state: int) -> int:
        """Longest number of actions still available from ``state``."""
        succ = self.successors[state]
        return 0 if not succ else 1 + max(self.depth(c) for c, _ in succ)


@dataclass(frozen=True)
class WorldSpec:
    tasks: tuple
    vocab_size: int = 12
    obs_dim: int = 512
    obs_noise_sigma: float = 0.1
    caption_informativeness: float = 1.0
    seed: int = 0
    # "task_state": one observation mean per (task, state).
    # "action": means depend only on the last action performed, so observations
    # alone do not identify the task.
    obs_sharing: str = "task_state"

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def validate(self):
        problems = []
        if self.vocab_size < 2:
            problems.append("vocab_size must be >= 2")
        if self.obs_dim < 1:
            problems.append("obs_dim must be positive")
        if self.obs_noise_sigma < 0:
            problems.append("obs_noise_sigma must be non-negative")
        if not 0.0 <= self.caption_informativeness <= 1.0:
            problems.append("caption_informativeness must lie in [0, 1]")
        if self.obs_sharing not in ("task_state", "action"):
            problems.append(f"unknown obs_sharing {self.obs_sharing!r}")
        if not self.tasks:
            problems.append("world needs at least one task")
        for ti, g in enumerate(self.tasks):
            if len(g.successors) != len(g.actions):
                problems.append(f"task {ti}: successors/actions length mismatch")
                continue
            if g.actions[ROOT] != -1:
                problems.append(f"task {ti}: root state must carry action -1")
            for s in range(1, g.num_states):
                if not 0 <= g.actions[s] < self.vocab_size:
                    problems.append(f"task {ti}: state {s} action {g.actions[s]} outside vocabulary")
            for s, succ in enumerate(g.successors):
                if succ:
                    total = sum(p for _, p in succ)
                    if abs(total - 1.0) > PROB_TOL:
                        problems.append(f"task {ti}: branch probabilities at state {s} sum to {total:.6g}")
                for c, p in succ:
                    if not s < c < g.num_states:
                        problems.append(f"task {ti}: edge {s}->{c} must point forward to a valid state")
                    if p <= 0:
                        problems.append(f"task {ti}: non-positive branch probability at {s}->{c}")
        if problems:
            raise ValidationError(problems)


def make_world_spec(num_tasks: int = 4, vocab_size: int = 12, num_stages: int = 6,
                    branch_probs: Sequence[float] = (0.75, 0.25), obs_dim: int = 512,
                    obs_noise_sigma: float = 0.1, caption_informativeness: float = 1.0,
                    obs_sharing: str = "task_state", seed: int = 0) -> WorldSpec:
    """Random staged tasks: a chain of ``num_stages`` steps where one stage
    (never the first) offers ``len(branch_probs)`` alternative actions that
    merge again at the next stage."""
    rng = np.random.default_rng([seed, 0])
    width = len(branch_probs)
    tasks = []
    for _ in range(num_tasks):
        choice_stage = int(rng.integers(1, num_stages)) if width > 1 else -1
        n_nodes = num_stages + (width - 1 if width > 1 else 0)
        acts = rng.choice(vocab_size, size=n_nodes, replace=n_nodes > vocab_size)
        actions = [-1]
        successors: list[list] = [[]]
        frontier = [ROOT]
        k = 0
        for stage in range(num_stages):
            branch = stage == choice_stage
            count = width if branch else 1
            new_states = []
            for j in range(count):
                actions.append(int(acts[k]))
                k += 1
                successors.append([])
                new_states.append(len(actions) - 1)
            for s in frontier:
                if branch:
                    successors[s] = [(c, float(p)) for c, p in zip(new_states, branch_probs)]
                else:
                    successors[s] = [(new_states[0], 1.0)]
            frontier = new_states
        tasks.append(TaskGraph(tuple(actions), tuple(tuple(s) for s in successors)))
    return WorldSpec(tuple(tasks), vocab_size, obs_dim, obs_noise_sigma,
                     caption_informativeness, seed, obs_sharing)


def default_world_spec(seed: int = 0) -> WorldSpec:
    return make_world_spec(num_tasks=4, vocab_size=12, obs_noise_sigma=0.1,
                           caption_informativeness=1.0, seed=seed)


@dataclass(frozen=True, eq=False)
class World:
    spec: WorldSpec
    obs_means: tuple      # per task: (num_states, D)
    caption_means: tuple  # per task: (num_states, D)

    @property
    def tasks(self):
        return self.spec.tasks

    @property
    def num_identity_coords(self) -> int:
        return math.ceil(self.spec.caption_informativeness * self.spec.obs_dim)


def build_world(spec: WorldSpec) -> World:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 1])
    D = spec.obs_dim
    m = math.ceil(spec.caption_informativeness * D)
    action_table = rng.standard_normal((spec.vocab_size + 1, D))  # last row: initial state
    task_codes = rng.standard_normal((spec.num_tasks, D))
    obs_means, cap_means = [], []
    for ti, g in enumerate(spec.tasks):
        own = rng.standard_normal((g.num_states, D))
        if spec.obs_sharing == "action":
            obs = action_table[[a if a >= 0 else spec.vocab_size for a in g.actions]]
        else:
            obs = own
        cap = rng.standard_normal((g.num_states, D))
        cap[:, :m] = task_codes[ti, :m]
        for arr in (obs, cap):
            arr.setflags(write=False)
        obs_means.append(obs)
        cap_means.append(cap)
    return World(spec, tuple(obs_means), tuple(cap_means))


@dataclass(frozen=True, eq=False)
class VideoRecord:
    video_id: str
    task_id: str
    actions: tuple
    states: tuple          # L + 1 state ids, states[0] == ROOT
    state_obs: np.ndarray  # (L + 1, D)
    state_caption_embs: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (self.video_id == other.video_id and self.task_id == other.task_id
                and self.actions == other.actions and self.states == other.states
                and np.array_equal(self.state_obs, other.state_obs)
                and np.array_equal(self.state_caption_embs, other.state_caption_embs))

    __hash__ = None

    @property
    def task_index(self) -> int:
        return int(self.task_id.removeprefix("task"))


def sample_video(world: World, seed: int, task: int | None = None) -> VideoRecord:
    spec = world.spec
    rng = np.random.default_rng([spec.seed, 2, int(seed)])
    ti = int(rng.integers(spec.num_tasks)) if task is None else int(task)
    g = spec.tasks[ti]
    states = [ROOT]
    while not g.is_leaf(states[-1]):
        succ = g.successors[states[-1]]
        probs = np.array([p for _, p in succ])
        j = int(rng.choice(len(succ), p=probs / probs.sum()))
        states.append(succ[j][0])
    obs_noise = rng.standard_normal((len(states), spec.obs_dim))
    cap_noise = rng.standard_normal((len(states), spec.obs_dim))
    obs = world.obs_means[ti][states] + spec.obs_noise_sigma * obs_noise
    cap = world.caption_means[ti][states] + spec.obs_noise_sigma * cap_noise
    return VideoRecord(
        video_id=f"v{int(seed):06d}",
        task_id=f"task{ti}",
        actions=tuple(g.actions[s] for s in states[1:]),
        states=tuple(states),
        state_obs=obs,
        state_caption_embs=cap,
    )


class CaptionEmbeddingProvider(Protocol):
    def caption_embeddings(self, video: VideoRecord) -> np.ndarray:
        """(L + 1, D) caption embeddings, one per state of ``video``."""


class FileCaptionProvider:
    """Caption embeddings precomputed elsewhere, stored as an ``.npz`` keyed by video id."""

    def __init__(self, path):
        with np.load(Path(path)) as data:
            self._table = {k: data[k] for k in data.files}

    def caption_embeddings(self, video: VideoRecord) -> np.ndarray:
        emb = self._table[video.video_id]
        if emb.shape != video.state_obs.shape:
            raise ValidationError(f"{video.video_id}: caption table shape {emb.shape} "
                                  f"!= observation shape {video.state_obs.shape}")
        return emb


def with_captions(video: VideoRecord, provider: CaptionEmbeddingProvider) -> VideoRecord:
    return VideoRecord(video.video_id, video.task_id, video.actions, video.states,
                       video.state_obs, np.asarray(provider.caption_embeddings(video), dtype=np.float64))


def curate_windows(video: VideoRecord, T: int) -> list[PlanWindow]:
    """All length-T windows at stride 1 (empty when the video is shorter than T)."""
    if T < 1:
        raise ValidationError(f"horizon must be positive, got {T}")
    L = len(video.actions)
    out = []
    for i in range(L - T + 1):
        s, g = video.states[i], video.states[i + T]
        out.append(PlanWindow(
            start_obs=video.state_obs[i],
            goal_obs=video.state_obs[i + T],
            start_caption_emb=video.state_caption_embs[i],
            goal_caption_emb=video.state_caption_embs[i + T],
            actions=video.actions[i:i + T],
            source_video_id=video.video_id,
            task_id=video.task_id,
            group_key=f"{video.task_id}:{s}->{g}",
        ))
    return out


def curate_all(videos: Sequence[VideoRecord], horizons: Sequence[int]):
    """Windows grouped by video id, plus the number of (video, horizon) pairs too short to curate."""
    grouped: dict[str, list[PlanWindow]] = {}
    skipped = 0
    for v in videos:
        grouped.setdefault(v.video_id, [])
        for T in horizons:
            ws = curate_windows(v, T)
            if not ws:
                skipped += 1
            grouped[v.video_id].extend(ws)
    return grouped, skipped


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple
    split_seed: int = 0

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        ids = [{w.source_video_id for w in getattr(self, n)} for n in ("train", "val", "test")]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ValidationError("dataset splits share source videos")

    def horizons(self) -> list[int]:
        return sorted({w.horizon for part in (self.train, self.val, self.test) for w in part})


def split_counts(n_videos: int, test_ratio=0.3, val_ratio=0.2) -> tuple[int, int, int]:
    """(train, val, test) video counts: floors for test and val, remainder to train."""
    n_test = math.floor(Fraction(str(test_ratio)) * n_videos)
    pool = n_videos - n_test
    n_val = math.floor(Fraction(str(val_ratio)) * pool)
    return pool - n_val, n_val, n_test


def split_dataset(windows_by_video: Mapping[str, Sequence[PlanWindow]], split_seed: int = 0,
                  test_ratio: float = 0.3, val_ratio: float = 0.2) -> DatasetSplit:
    ids = sorted(windows_by_video)
    if len(ids) < 3:
        raise ValidationError(f"need at least 3 videos to split, got {len(ids)}")
    n_train, n_val, n_test = split_counts(len(ids), test_ratio, val_ratio)
    order = np.random.default_rng(split_seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test_ids = set(shuffled[:n_test])
    val_ids = set(shuffled[n_test:n_test + n_val])

    def gather(keep):
        return [w for vid in ids if keep(vid) for w in windows_by_video[vid]]

    return DatasetSplit(
        train=gather(lambda v: v not in test_ids and v not in val_ids),
        val=gather(lambda v: v in val_ids),
        test=gather(lambda v: v in test_ids),
        split_seed=split_seed,
    )


def generate_dataset(world: World, num_videos: int, horizons: Sequence[int], split_seed: int = 0,
                     video_seed_offset: int = 0):
    """Sample videos, curate every horizon, split by video.  Returns (split, videos, skipped)."""
    videos = [sample_video(world, video_seed_offset + i) for i in range(num_videos)]
    grouped, skipped = curate_all(videos, horizons)
    return split_dataset(grouped, split_seed), videos, skipped


def gt_plan_distribution(world: World, start_state: tuple[int, int], goal_state: int, T: int) -> dict:
    """Exact distribution over length-T plans from ``start_state = (task, state)`` ending in ``goal_state``."""
    ti, s0 = start_state
    g = world.tasks[ti]
    if T > g.depth(s0):
        raise ValidationError(f"unreachable goal: horizon {T} exceeds remaining depth {g.depth(s0)} from state {s0}")
    paths: dict[tuple, float] = {}

    def walk(state, remaining, acts, prob):
        if remaining == 0:
            if state == goal_state:
                paths[tuple(acts)] = paths.get(tuple(acts), 0.0) + prob
            return
        for child, p in g.successors[state]:
            walk(child, remaining - 1, acts + [g.actions[child]], prob * p)

    walk(s0, T, [], 1.0)
    total = sum(paths.values())
    if not paths or total <= 0:
        raise ValidationError(f"unreachable goal: no length-{T} path from {s0} to {goal_state}")
    return {p: v / total for p, v in sorted(paths.items())}


def parse_group_key(key: str) -> tuple[int, int, int]:
    """``"task3:1->4"`` -> (3, 1, 4)."""
    task, rest = key.split(":")
    s, g = rest.split("->")
    return int(task.removeprefix("task")), int(s), int(g)


# ---------------------------------------------------------------- file format

REQUIRED_FIELDS = ("video_id", "horizon", "actions", "start_obs", "goal_obs",
                   "start_caption_emb", "goal_caption_emb")
_VECTOR_FIELDS = ("start_obs", "goal_obs", "start_caption_emb", "goal_caption_emb")


def _fmt_vec(vec) -> str:
    return "[" + ",".join(format(float(x), ".17g") for x in vec) + "]"


def window_to_line(w: PlanWindow, split: str, split_seed: int) -> str:
    head = {
        "video_id": w.source_video_id,
        "task_id": w.task_id,
        "group_key": w.group_key,
        "split": split,
        "split_seed": split_seed,
        "horizon": w.horizon,
        "actions": list(w.actions),
    }
    parts = [json.dumps(head, ensure_ascii=False)[:-1]]
    for name in _VECTOR_FIELDS:
        parts.append(f', "{name}": {_fmt_vec(getattr(w, name))}')
    return "".join(parts) + "}"


def write_dataset(split: DatasetSplit, path):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for name in ("train", "val", "test"):
            for w in getattr(split, name):
                fh.write(window_to_line(w, name, split.split_seed))
                fh.write("\n")


def read_dataset(path) -> DatasetSplit:
    parts: dict[str, list[PlanWindow]] = {"train": [], "val": [], "test": []}
    split_seed = 0
    n = 0
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"line {lineno}: record is not an object")
            for f in REQUIRED_FIELDS:
                if f not in rec:
                    raise DatasetFormatError(f"line {lineno}: missing field '{f}'")
            split = rec.get("split", "train")
            if split not in parts:
                raise DatasetFormatError(f"line {lineno}: field 'split' has unknown value {split!r}")
            actions = rec["actions"]
            if not isinstance(actions, list) or not all(isinstance(a, int) for a in actions):
                raise DatasetFormatError(f"line {lineno}: field 'actions' must be a list of integers")
            if len(actions) != rec["horizon"]:
                raise DatasetFormatError(f"line {lineno}: field 'horizon' disagrees with len(actions)")
            vecs = {}
            for f in _VECTOR_FIELDS:
                v = rec[f]
                if not isinstance(v, list) or not all(isinstance(x, (int, float)) for x in v):
                    raise DatasetFormatError(f"line {lineno}: field '{f}' must be a list of reals")
                vecs[f] = np.array(v, dtype=np.float64)
            parts[split].append(PlanWindow(
                actions=actions, source_video_id=str(rec["video_id"]),
                task_id=rec.get("task_id"), group_key=rec.get("group_key"), **vecs))
            split_seed = int(rec.get("split_seed", split_seed))
            n += 1
    if n == 0:
        raise DatasetFormatError(f"{path}: no records")
    return DatasetSplit(parts["train"], parts["val"], parts["test"], split_seed)
