import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capplan.core import PlanWindow, ValidationError
from capplan.synthworld import (
    DatasetFormatError,
    DatasetSplit,
    FileCaptionProvider,
    TaskGraph,
    WorldSpec,
    build_world,
    curate_all,
    curate_windows,
    default_world_spec,
    generate_dataset,
    gt_plan_distribution,
    make_world_spec,
    parse_group_key,
    read_dataset,
    sample_video,
    split_counts,
    split_dataset,
    with_captions,
)


def linear_task(actions):
    n = len(actions)
    return TaskGraph((-1, *actions), tuple(((s + 1, 1.0),) if s < n else () for s in range(n + 1)))


def branching_task(probs=(0.5, 0.5)):
    # root -0-> 1, then 1 -> {2 (action 1), 3 (action 2)}, both -> 4 (action 3)
    return TaskGraph((-1, 0, 1, 2, 3),
                     (((1, 1.0),), ((2, probs[0]), (3, probs[1])), ((4, 1.0),), ((4, 1.0),), ()))


def _video(world, seed=0):
    return sample_video(world, seed)


# ---------------------------------------------------------------- world

def test_default_world_has_four_tasks():
    world = build_world(default_world_spec())
    assert len(world.tasks) == 4
    assert world.spec.vocab_size == 12


def test_build_world_is_deterministic():
    a, b = build_world(default_world_spec(3)), build_world(default_world_spec(3))
    for x, y in zip(a.obs_means + a.caption_means, b.obs_means + b.caption_means):
        assert np.array_equal(x, y)


def test_bad_branch_probabilities_rejected():
    g = branching_task((0.6, 0.3))
    with pytest.raises(ValidationError, match="sum to 0.9"):
        build_world(WorldSpec((g,), vocab_size=4, obs_dim=4))


def test_invalid_spec_collects_violations():
    with pytest.raises(ValidationError) as info:
        WorldSpec((linear_task([0, 9]),), vocab_size=4, obs_dim=0, caption_informativeness=2).validate()
    assert len(info.value.violations) == 3


def test_generated_tasks_have_one_branch_stage():
    spec = make_world_spec(num_tasks=6, seed=1)
    for g in spec.tasks:
        branching = [s for s in range(g.num_states) if len(g.successors[s]) > 1]
        assert len(branching) == 1 and branching[0] != 0
        assert [p for _, p in g.successors[branching[0]]] == [0.75, 0.25]
        assert g.depth(0) == 6


def test_zero_noise_linear_video():
    world = build_world(WorldSpec((linear_task([3, 1, 4, 1, 0]),), vocab_size=5, obs_dim=6,
                                  obs_noise_sigma=0.0))
    v = _video(world)
    assert v.actions == (3, 1, 4, 1, 0)
    assert np.array_equal(v.state_obs, world.obs_means[0])
    assert np.array_equal(v.state_caption_embs, world.caption_means[0])


def test_sample_video_is_deterministic():
    world = build_world(default_world_spec())
    assert _video(world, 5) == _video(world, 5)
    assert _video(world, 5).video_id == "v000005"


def test_branch_frequencies_match_probabilities():
    world = build_world(WorldSpec((branching_task(),), vocab_size=4, obs_dim=2))
    n = 10000
    first = sum(sample_video(world, i).actions[1] == 1 for i in range(n))
    assert abs(first / n - 0.5) <= 0.02


def test_captions_carry_task_code():
    world = build_world(default_world_spec())
    m = world.num_identity_coords
    assert m == 512
    caps = world.caption_means
    assert np.array_equal(caps[0][0, :m], caps[0][3, :m])
    assert not np.array_equal(caps[0][0, :m], caps[1][0, :m])


def test_partial_informativeness_leaves_other_coords_free():
    spec = make_world_spec(num_tasks=2, obs_dim=10, caption_informativeness=0.25)
    world = build_world(spec)
    assert world.num_identity_coords == 3
    c = world.caption_means[0]
    assert np.array_equal(c[0, :3], c[1, :3]) and not np.array_equal(c[0, 3:], c[1, 3:])


def test_action_sharing_makes_observations_task_agnostic():
    spec = make_world_spec(num_tasks=4, obs_dim=8, obs_sharing="action")
    world = build_world(spec)
    table = {}
    for g, means in zip(world.tasks, world.obs_means):
        for s, a in enumerate(g.actions):
            if a in table:
                assert np.array_equal(table[a], means[s])
            table[a] = means[s]


# ---------------------------------------------------------------- curation

def _linear_world(n_actions):
    return build_world(WorldSpec((linear_task(list(range(n_actions))),), vocab_size=max(n_actions, 2),
                                 obs_dim=3))


@pytest.mark.parametrize("L,T,count", [(5, 3, 3), (3, 3, 1), (2, 3, 0)])
def test_curation_counts(L, T, count):
    v = _video(_linear_world(L))
    ws = curate_windows(v, T)
    assert len(ws) == count
    if L == T:
        assert ws[0].actions == v.actions


def test_curated_window_contents():
    v = _video(_linear_world(5))
    w = curate_windows(v, 2)[1]
    assert w.actions == (1, 2)
    assert np.array_equal(w.start_obs, v.state_obs[1])
    assert np.array_equal(w.goal_obs, v.state_obs[3])
    assert w.group_key == "task0:1->3"
    assert parse_group_key(w.group_key) == (0, 1, 3)


def test_curate_all_flags_short_videos():
    v = _video(_linear_world(2))
    grouped, skipped = curate_all([v], [1, 3])
    assert len(grouped[v.video_id]) == 2 and skipped == 1


# ---------------------------------------------------------------- split

@pytest.mark.parametrize("n,expected", [(100, (56, 14, 30)), (10, (6, 1, 3)), (3, (3, 0, 0))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


def _fake_windows(n_videos, per=2):
    rng = np.random.default_rng(0)
    return {f"v{i:03d}": [PlanWindow(rng.standard_normal(2), rng.standard_normal(2), np.zeros(2),
                                     np.zeros(2), (0, 1), f"v{i:03d}") for _ in range(per)]
            for i in range(n_videos)}


def test_split_membership_by_video():
    s = split_dataset(_fake_windows(100), split_seed=4)
    vids = [{w.source_video_id for w in part} for part in (s.train, s.val, s.test)]
    assert [len(v) for v in vids] == [56, 14, 30]
    assert not (vids[0] & vids[1] or vids[0] & vids[2] or vids[1] & vids[2])
    again = split_dataset(_fake_windows(100), split_seed=4)
    assert [w.source_video_id for w in again.test] == [w.source_video_id for w in s.test]


def test_split_needs_three_videos():
    with pytest.raises(ValidationError):
        split_dataset(_fake_windows(2))


def test_split_rejects_shared_videos():
    w = _fake_windows(1)["v000"]
    with pytest.raises(ValidationError):
        DatasetSplit(w[:1], (), w[1:])


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 500))
def test_split_counts_partition(n):
    tr, va, te = split_counts(n)
    assert tr + va + te == n and tr >= va >= 0 and te == (3 * n) // 10


# ---------------------------------------------------------------- exact plan distribution

def test_gt_distribution_linear():
    world = _linear_world(4)
    assert gt_plan_distribution(world, (0, 0), 3, 3) == {(0, 1, 2): 1.0}


def test_gt_distribution_half_half():
    world = build_world(WorldSpec((branching_task(),), vocab_size=4, obs_dim=2))
    assert gt_plan_distribution(world, (0, 0), 4, 3) == {(0, 1, 3): 0.5, (0, 2, 3): 0.5}


def test_gt_distribution_biased_branch_agrees_with_sampling():
    world = build_world(WorldSpec((branching_task((0.7, 0.3)),), vocab_size=4, obs_dim=2))
    exact = gt_plan_distribution(world, (0, 1), 4, 2)
    assert exact == pytest.approx({(1, 3): 0.7, (2, 3): 0.3}, abs=1e-12)
    n = 4000
    hits = sum(sample_video(world, i).actions[1:] == (1, 3) for i in range(n))
    assert abs(hits / n - 0.7) < 0.03


def test_gt_distribution_conditions_on_goal():
    world = build_world(WorldSpec((branching_task((0.7, 0.3)),), vocab_size=4, obs_dim=2))
    assert gt_plan_distribution(world, (0, 0), 3, 2) == {(0, 2): 1.0}


def test_unreachable_goal():
    world = _linear_world(4)
    with pytest.raises(ValidationError, match="unreachable goal"):
        gt_plan_distribution(world, (0, 0), 1, 3)
    with pytest.raises(ValidationError, match="unreachable goal"):
        gt_plan_distribution(world, (0, 2), 4, 3)


# ---------------------------------------------------------------- file format

def _small_split():
    world = build_world(make_world_spec(num_tasks=2, obs_dim=5, seed=2))
    split, _, _ = generate_dataset(world, 6, [2, 3], split_seed=1)
    return split


def test_round_trip(tmp_path):
    split = _small_split()
    path = tmp_path / "data.jsonl"
    from capplan.synthworld import write_dataset
    write_dataset(split, path)
    assert read_dataset(path) == split
    first = path.read_bytes()
    write_dataset(read_dataset(path), path)
    assert path.read_bytes() == first


def test_missing_goal_obs(tmp_path):
    rec = {"video_id": "v0", "horizon": 1, "actions": [0], "start_obs": [0.0],
           "start_caption_emb": [0.0], "goal_caption_emb": [0.0]}
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetFormatError, match="line 1: missing field 'goal_obs'"):
        read_dataset(path)


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DatasetFormatError, match="no records"):
        read_dataset(path)


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n{oops\n")
    with pytest.raises(DatasetFormatError, match="line 2"):
        read_dataset(path)


def test_file_caption_provider(tmp_path):
    world = build_world(make_world_spec(num_tasks=1, obs_dim=4))
    v = _video(world)
    table = np.arange(v.state_obs.size, dtype=float).reshape(v.state_obs.shape)
    np.savez(tmp_path / "caps.npz", **{v.video_id: table})
    out = with_captions(v, FileCaptionProvider(tmp_path / "caps.npz"))
    assert np.array_equal(out.state_caption_embs, table)
    assert np.array_equal(out.state_obs, v.state_obs)
