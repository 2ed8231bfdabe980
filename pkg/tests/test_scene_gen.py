from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claritysim.errors import (
    InfeasibleGeometryError,
    InfeasibleReverberationError,
    InvalidArgumentError,
    InvalidGeometryError,
    ValidationError,
)
from claritysim.scene_gen import (
    HeadGeometry,
    RoomSpec,
    ScenePose,
    absorption_from_rt60,
    azimuth_in_head_frame,
    binaural_head_filter,
    compute_rir,
    mic_world_positions,
    rt60_from_absorption,
    sample_scene_geometry,
    schroeder_decay_db,
    woodworth_itd,
)

ROOM = RoomSpec(6.0, 5.0, 2.5, 0.3)


def test_sabine_hand_value():
    assert ROOM.volume == 75.0 and ROOM.surface_area == 115.0
    assert absorption_from_rt60(ROOM) == pytest.approx(0.161 * 75 / (115 * 0.3))
    assert absorption_from_rt60(ROOM) == pytest.approx(0.35, abs=0.005)


@given(st.floats(0.15, 2.0))
def test_sabine_round_trip(rt60):
    room = RoomSpec(6.0, 5.0, 2.5, rt60)
    assert rt60_from_absorption(room, absorption_from_rt60(room)) == pytest.approx(rt60, rel=1e-12)


def test_infeasible_reverberation():
    with pytest.raises(InfeasibleReverberationError):
        absorption_from_rt60(RoomSpec(2.0, 2.0, 2.0, 0.05))


def test_room_rejects_bad_dimensions():
    with pytest.raises(ValidationError):
        RoomSpec(0.0, 5.0, 2.5, 0.3)
    with pytest.raises(ValidationError):
        RoomSpec(6.0, 5.0, 2.5, -0.1)


def _check_pose(room, pose):
    r = np.array(pose.receiver_position)
    s = np.array(pose.source_position)
    assert room.contains(r) and room.contains(s)
    assert min(r[0], r[1], room.length_x - r[0], room.length_y - r[1]) >= 1.0
    assert np.linalg.norm(r - s) >= 1.0
    assert abs(azimuth_in_head_frame(pose, s)) < 1e-9


def test_sampled_poses_respect_clearances():
    for seed in range(1000):
        _check_pose(ROOM, sample_scene_geometry(ROOM, seed))


def test_sampling_is_deterministic():
    assert sample_scene_geometry(ROOM, 7) == sample_scene_geometry(ROOM, 7)
    assert sample_scene_geometry(ROOM, 7) != sample_scene_geometry(ROOM, 8)


def test_small_room_is_infeasible():
    with pytest.raises(InfeasibleGeometryError):
        sample_scene_geometry(RoomSpec(2.0, 2.0, 2.5, 0.3), 0)


def test_pose_round_trip():
    pose = sample_scene_geometry(ROOM, 3)
    assert ScenePose.from_dict(pose.to_dict()) == pose


@pytest.mark.parametrize("mics", [2, 3])
def test_mic_count_and_mirror_symmetry(mics):
    head = HeadGeometry(mics_per_ear=mics)
    pose = ScenePose((1.0, 1.0, 1.2), (3.0, 2.5, 1.2), 0.0)
    mics_pos = mic_world_positions(pose, head)
    assert len(mics_pos) == 2 * mics
    left = [p for (ear, _), p in mics_pos if ear == "L"]
    right = [p for (ear, _), p in mics_pos if ear == "R"]
    centre = np.array(pose.receiver_position)
    for lp, rp in zip(left, right):
        dl, dr = lp - centre, rp - centre
        assert dl[1] == pytest.approx(-dr[1]) and dl[1] > 0
        assert dl[0] == pytest.approx(dr[0]) and dl[2] == pytest.approx(dr[2])


def test_yaw_pi_rotates_mics_about_receiver():
    head = HeadGeometry(mics_per_ear=3)
    centre = np.array([3.0, 2.5, 1.2])
    a = mic_world_positions(ScenePose((1, 1, 1.2), tuple(centre), 0.3), head)
    b = mic_world_positions(ScenePose((1, 1, 1.2), tuple(centre), 0.3 + math.pi), head)
    for (_, pa), (_, pb) in zip(a, b):
        da, db = pa - centre, pb - centre
        np.testing.assert_allclose(db[:2], -da[:2], atol=1e-12)
        assert db[2] == pytest.approx(da[2])


def test_head_rejects_bad_mic_count():
    with pytest.raises(ValidationError):
        HeadGeometry(mics_per_ear=4)


def test_free_field_single_tap():
    room = RoomSpec(20.0, 20.0, 20.0, 2.0)
    rir = compute_rir(room, (5.0, 5.0, 5.0), (5.0 + 3.43, 5.0, 5.0), max_order=0, sample_rate=44100)
    nz = np.flatnonzero(rir.taps)
    assert nz.tolist() == [441]
    assert rir.taps[441] == pytest.approx(1 / 3.43)
    assert rir.direct_index == 441


def test_full_absorption_equals_order_zero():
    src, mic = (2.0, 2.0, 1.2), (4.0, 3.0, 1.4)
    a = compute_rir(ROOM, src, mic, max_order=0, absorption=1.0)
    b = compute_rir(ROOM, src, mic, max_order=8, absorption=1.0)
    np.testing.assert_array_equal(a.taps, b.taps)


def test_coincident_points_raise():
    with pytest.raises(InvalidGeometryError):
        compute_rir(ROOM, (2.0, 2.0, 1.2), (2.0, 2.0, 1.2), max_order=0)


def test_rir_deterministic_and_decay_monotone():
    src, mic = (1.5, 1.2, 1.2), (4.0, 3.1, 1.3)
    a = compute_rir(ROOM, src, mic, max_order=12)
    b = compute_rir(ROOM, src, mic, max_order=12)
    np.testing.assert_array_equal(a.taps, b.taps)
    decay = schroeder_decay_db(a.taps)
    assert np.all(np.diff(decay[np.isfinite(decay)]) <= 1e-12)


def test_energy_grows_with_order_and_converges():
    room = RoomSpec(6.0, 5.0, 2.5, 0.2)
    assert absorption_from_rt60(room) >= 0.3
    src, mic = (1.5, 1.2, 1.2), (4.0, 3.1, 1.3)
    energy = [float(np.sum(compute_rir(room, src, mic, max_order=n).taps ** 2)) for n in (5, 10, 20, 21, 40)]
    assert all(b >= a for a, b in zip(energy, energy[1:]))
    assert (energy[3] - energy[2]) / energy[2] < 1e-3


def test_woodworth_value_at_ninety_degrees():
    a, c = 0.0875, 343.0
    assert woodworth_itd(math.pi / 2) == pytest.approx(a / c * (math.pi / 2 + 1))
    assert woodworth_itd(math.pi / 2) == pytest.approx(6.56e-4, rel=1e-3)


def _itd(azimuth, sr=44100):
    dl, _ = binaural_head_filter(azimuth, "L", sr)
    dr, _ = binaural_head_filter(azimuth, "R", sr)
    return dr - dl


def test_head_filter_median_plane():
    dl, sl = binaural_head_filter(0.0, "L", 44100)
    dr, sr = binaural_head_filter(0.0, "R", 44100)
    assert dl == dr == 0.0
    assert sl == sr and sl.is_identity


@given(st.floats(-math.pi, math.pi))
def test_itd_antisymmetric_and_matches_woodworth(theta):
    assert _itd(theta) == pytest.approx(-_itd(-theta), abs=1e-15)
    assert _itd(theta) == pytest.approx(woodworth_itd(theta), abs=1e-12)


def test_itd_peaks_at_ninety_degrees():
    grid = np.linspace(-math.pi, math.pi, 721)
    itd = np.abs([_itd(t) for t in grid])
    assert abs(abs(grid[np.argmax(itd)]) - math.pi / 2) < 1e-9


def test_shadow_only_on_far_ear():
    _, near = binaural_head_filter(math.pi / 2, "L", 44100)
    _, far = binaural_head_filter(math.pi / 2, "R", 44100)
    assert near.is_identity
    gains = far.gain_db([50.0, 8000.0], 44100)
    assert gains[0] == pytest.approx(0.0, abs=0.1)
    assert gains[1] < -10.0


def test_head_filter_argument_checks():
    with pytest.raises(InvalidArgumentError):
        binaural_head_filter(4.0, "L", 44100)
    with pytest.raises(InvalidArgumentError):
        binaural_head_filter(0.5, "X", 44100)


@settings(max_examples=25, deadline=None)
@given(st.floats(3.0, 9.0), st.floats(3.0, 8.0), st.integers(0, 2**31))
def test_pose_invariants_property(lx, ly, seed):
    room = RoomSpec(lx, ly, 2.5, 0.4)
    _check_pose(room, sample_scene_geometry(room, seed))
