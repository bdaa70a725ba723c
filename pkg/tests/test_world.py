import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seril.errors import ConfigError
from seril.world import (
    Action,
    EnvironmentSpec,
    Orientation,
    Pathology,
    Sequence,
    TaskId,
    Volume,
    all_specs,
    apply_orientation,
    extract_state,
    generate_environment,
    move,
    readout_position,
    reward,
    start_position,
    step,
    termination_check,
)

SMALL = (32, 32, 16)


def test_twenty_four_distinct_environments():
    specs = all_specs(seed=3)
    assert len(specs) == 24
    assert len({s.key for s in specs}) == 24
    digests = {generate_environment(s, SMALL)[0].voxels.tobytes() for s in specs}
    assert len(digests) == 24


def test_generation_is_deterministic():
    spec = EnvironmentSpec(Sequence.S2, Pathology.PLow, Orientation.Coronal, seed=11)
    a, la = generate_environment(spec, SMALL)
    b, lb = generate_environment(spec, SMALL)
    assert a.voxels.tobytes() == b.voxels.tobytes()
    assert la == lb


def test_centre_landmark_is_rounded_lobe_centroid():
    spec = EnvironmentSpec(Sequence.S3, Pathology.PLow, Orientation.Axial, seed=7)
    _, lm = generate_environment(spec)
    # regression values; the centroid relation below is the actual check
    assert lm[TaskId.TopLeft] == (22, 19, 13)
    assert lm[TaskId.TopRight] == (45, 22, 11)
    assert lm[TaskId.BottomLeft] == (21, 46, 12)
    assert lm[TaskId.BottomRight] == (45, 49, 13)
    assert lm[TaskId.Center] == (33, 34, 12)
    lobes = np.array([lm[t] for t in (TaskId.TopLeft, TaskId.TopRight, TaskId.BottomLeft, TaskId.BottomRight)])
    assert lm[TaskId.Center] == tuple(int(v) for v in np.rint(lobes.mean(axis=0)))


@pytest.mark.parametrize("spec", all_specs(seed=5), ids=lambda s: s.name)
def test_volume_invariants(spec):
    vol, lm = generate_environment(spec, SMALL)
    assert vol.dims == SMALL
    assert np.all(np.isfinite(vol.voxels))
    assert vol.voxels.min() >= 0.0 and vol.voxels.max() <= 1.0
    assert len(set(lm.values())) == 5
    for p in lm.values():
        assert all(0 <= c < d for c, d in zip(p, SMALL))


def test_dims_below_minimum_rejected():
    with pytest.raises(ConfigError):
        generate_environment(all_specs()[0], (4, 32, 32))


def test_landmarks_depend_on_seed():
    sets = [
        tuple(generate_environment(EnvironmentSpec(Sequence.S1, Pathology.PHigh, Orientation.Axial, s), SMALL)[1].values())
        for s in range(50)
    ]
    for a, b in itertools.combinations(range(50), 2):
        assert sets[a] != sets[b], (a, b)


def test_lesion_size_follows_pathology():
    base = dict(sequence=Sequence.S1, orientation=Orientation.Axial, seed=2)
    hi, _ = generate_environment(EnvironmentSpec(pathology=Pathology.PHigh, **base))
    lo, _ = generate_environment(EnvironmentSpec(pathology=Pathology.PLow, **base))
    bright_hi = np.sum(np.isclose(hi.voxels, 0.95, atol=1e-4))
    bright_lo = np.sum(np.isclose(lo.voxels, 0.95, atol=1e-4))
    assert bright_lo > 0
    assert bright_hi > 4 * bright_lo


def _toy_volume(shape=(6, 5, 4)):
    rng = np.random.default_rng(0)
    return Volume(rng.random(shape).astype(np.float32), all_specs()[0])


def test_axial_is_identity():
    vol = _toy_volume()
    lm = {t: (1, 2, 3) for t in TaskId}
    out, out_lm = apply_orientation(vol, lm, Orientation.Axial)
    assert np.array_equal(out.voxels, vol.voxels)
    assert out_lm == lm


def test_coronal_swaps_y_and_z():
    vol = _toy_volume()
    out, _ = apply_orientation(vol, {}, Orientation.Coronal)
    assert out.dims == (6, 4, 5)
    for a, b, c in [(0, 0, 0), (5, 4, 3), (2, 1, 3)]:
        assert out.voxels[a, c, b] == vol.voxels[a, b, c]


def test_sagittal_landmark():
    _, lm = apply_orientation(_toy_volume((30, 30, 30)), {TaskId.Center: (10, 20, 5)}, Orientation.Sagittal)
    assert lm[TaskId.Center] == (5, 20, 10)


@pytest.mark.parametrize("orientation", list(Orientation))
def test_orientation_round_trip(orientation):
    vol = _toy_volume()
    lm = {t: (int(t), 1, 2) for t in TaskId}
    once = apply_orientation(vol, lm, orientation)
    back, back_lm = apply_orientation(*once, orientation)
    assert np.array_equal(back.voxels, vol.voxels)
    assert back_lm == lm


def test_interior_crop_has_no_fill():
    vol = Volume(np.full((21, 21, 11), 0.5, np.float32), all_specs()[0])
    s = extract_state(vol, (10, 10, 5), (7, 7, 5))
    assert s.frames.shape == (4, 7, 7, 5)
    assert np.all(s.frames == 0.5)


def test_corner_crop_zero_fills_low_octant():
    vol = Volume(np.ones((21, 21, 11), np.float32), all_specs()[0])
    s = extract_state(vol, (0, 0, 0), (7, 7, 5))
    frame = s.frames[-1]
    assert np.all(frame[:3, :, :] == 0)
    assert np.all(frame[:, :3, :] == 0)
    assert np.all(frame[:, :, :2] == 0)
    assert np.all(frame[3:, 3:, 2:] == 1)


def test_fresh_history_is_padded_with_first_frame():
    vol = _toy_volume((21, 21, 11))
    s = extract_state(vol, (8, 9, 4), (5, 5, 3), None, history_len=4)
    assert len(s.trail) == 4
    for k in range(4):
        assert np.array_equal(s.frames[k], s.frames[0])
    s2 = extract_state(vol, (9, 9, 4), (5, 5, 3), s, history_len=4)
    assert s2.trail == ((8, 9, 4),) * 3 + ((9, 9, 4),)
    assert np.array_equal(s2.frames[:3], s.frames[1:])


def test_even_box_rejected():
    with pytest.raises(ConfigError):
        extract_state(_toy_volume((21, 21, 11)), (5, 5, 5), (4, 5, 5))


def test_crop_is_local():
    rng = np.random.default_rng(1)
    vox = rng.random((25, 25, 13)).astype(np.float32)
    pos, box = (12, 11, 6), (7, 5, 3)
    a = extract_state(Volume(vox, all_specs()[0]), pos, box)
    outside = vox.copy()
    mask = np.ones_like(outside, dtype=bool)
    mask[9:16, 9:14, 5:8] = False
    outside[mask] = rng.random(mask.sum())
    b = extract_state(Volume(outside, all_specs()[0]), pos, box)
    assert np.array_equal(a.frames, b.frames)


def test_reward_examples():
    assert reward((10, 0, 0), (9, 0, 0), (0, 0, 0)) == 1.0
    assert reward((3, 4, 5), (3, 4, 5), (0, 0, 0)) == 0.0
    assert reward((0, 0, 0), (1, 0, 0), (5, 0, 0)) == 1.0
    # moving sideways from (3,0,0) to (3,1,0) with the target at the origin
    assert reward((3, 0, 0), (3, 1, 0), (0, 0, 0)) == pytest.approx(3 - np.sqrt(10))


coords = st.tuples(*[st.integers(0, 40)] * 3)


@given(coords, coords, coords)
def test_reward_antisymmetry(a, b, t):
    assert reward(a, b, t) == pytest.approx(-reward(b, a, t), abs=1e-12)
    assert -1.0 <= reward(a, b, t) <= 1.0


def _env(dims=(20, 20, 12)):
    vol = Volume(np.zeros(dims, np.float32), all_specs()[0])
    lm = {t: (15, 10, 5) for t in TaskId}
    return vol, lm


def test_step_moves_one_voxel():
    vol, lm = _env()
    s = extract_state(vol, (10, 10, 5), (5, 5, 3))
    tr = step(vol, lm, TaskId.TopLeft, s, Action.PLUS_X)
    assert tr.s_next.position == (11, 10, 5)
    assert tr.r > 0  # directly toward the target on x
    assert not tr.done


def test_step_clamps_at_face():
    vol, lm = _env()
    s = extract_state(vol, (19, 10, 5), (5, 5, 3))
    tr = step(vol, lm, TaskId.TopLeft, s, Action.PLUS_X)
    assert tr.s_next.position == (19, 10, 5)
    assert tr.r == 0.0


@given(st.tuples(st.integers(1, 18), st.integers(1, 18), st.integers(1, 10)), st.sampled_from(list(Action)))
def test_action_then_inverse_restores_position(pos, a):
    inverse = Action(int(a) ^ 1)
    assert move(move(pos, a, (20, 20, 12)), inverse, (20, 20, 12)) == pos


def test_termination_examples():
    assert termination_check([(5, 5, 5)], (5, 5, 5), 1, 200)
    p, q = (1, 1, 1), (2, 1, 1)
    assert termination_check([p, q] * 4, (30, 30, 30), 8, 200)
    assert not termination_check([(0, 0, 0), (1, 0, 0)], (30, 30, 30), 1, 200)
    assert termination_check([(0, 0, 0), (1, 0, 0)], (30, 30, 30), 200, 200)
    # reaching the target does not end an inference episode
    assert not termination_check([(4, 5, 5), (5, 5, 5)], (5, 5, 5), 2, 200, training=False)


def test_readout_prefers_most_visited_then_latest():
    p, q, r = (1, 1, 1), (2, 1, 1), (3, 1, 1)
    assert readout_position([p, q, p, q, p]) == p
    assert readout_position([p, q, p, q]) == q
    assert readout_position([r, p, q]) == q


def test_greedy_oracle_reaches_target():
    spec = EnvironmentSpec(Sequence.S1, Pathology.PHigh, Orientation.Sagittal, seed=4)
    vol, lm = generate_environment(spec)
    dims = vol.dims
    rng = np.random.default_rng(0)
    deltas = {a: np.array(move((5, 5, 5), a, (99, 99, 99))) - 5 for a in Action}
    for trial in range(20):
        task = TaskId(trial % 5)
        target = np.array(lm[task])
        pos = start_position(rng, dims, (15, 15, 7)) if trial % 2 else tuple(int(rng.integers(0, d)) for d in dims)
        trail = [pos]
        for n in range(1, sum(dims) + 1):
            a = min(Action, key=lambda a: np.linalg.norm(np.array(pos) + deltas[a] - target))
            pos = move(pos, a, dims)
            trail.append(pos)
            if termination_check(trail, tuple(target), n, 10**6):
                break
        assert np.linalg.norm(np.array(pos) - target) <= 1.0
        assert n <= sum(dims)


def test_start_position_keeps_box_extent_from_faces():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = start_position(rng, (64, 64, 24), (15, 15, 7))
        assert 15 <= p[0] <= 48 and 15 <= p[1] <= 48 and 7 <= p[2] <= 16
