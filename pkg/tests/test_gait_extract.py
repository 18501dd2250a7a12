import math

import numpy as np
import pytest

from gaitguard.errors import AmbiguousDirectionError, InsufficientDataError
from gaitguard.gait_extract import (
    EventKind,
    EventParams,
    Leg,
    WalkDirection,
    correct_leg_labels,
    detect_direction,
    detect_events,
    extract_features,
    read_feature_csv,
    validate_full_cycle,
    write_feature_csv,
    GaitEvent,
)
from gaitguard.keypoint_io import (
    LANKLE,
    MIDHIP,
    RANKLE,
    Keypoint,
    KeypointFrame,
    KeypointSequence,
    MarkerCalibration,
    PersonPose,
)
from gaitguard.synthlab import WalkerSpec, generate_walker

from conftest import make_sequence


class TestDirection:
    def test_left_to_right(self):
        seq = make_sequence(np.linspace(10, 300, 20))
        assert detect_direction(seq) is WalkDirection.LEFT_TO_RIGHT

    def test_right_to_left(self):
        seq = make_sequence(np.linspace(300, 10, 20))
        assert detect_direction(seq) is WalkDirection.RIGHT_TO_LEFT

    def test_synthetic_negative_velocity(self):
        spec = WalkerSpec("w", velocity_px_s=-80.0, amplitude_px=30.0)
        seq, truth = generate_walker(spec, 2.0, 30.0, seed=0)
        assert truth.direction is WalkDirection.RIGHT_TO_LEFT
        assert detect_direction(seq) is WalkDirection.RIGHT_TO_LEFT

    def test_insufficient_midhip(self):
        seq = make_sequence([10.0] + [None] * 5)
        with pytest.raises(InsufficientDataError):
            detect_direction(seq)

    def test_ambiguous_direction(self):
        seq = make_sequence([10.0, 10.5])
        with pytest.raises(AmbiguousDirectionError):
            detect_direction(seq)


def _swap_ankles(frame: KeypointFrame) -> KeypointFrame:
    pose = frame.pose(0)
    left, right = pose.get(LANKLE), pose.get(RANKLE)
    kps = []
    for k in pose.keypoints:
        if k.name == LANKLE:
            kps.append(Keypoint(LANKLE, right.x, right.y, right.confidence))
        elif k.name == RANKLE:
            kps.append(Keypoint(RANKLE, left.x, left.y, left.confidence))
        else:
            kps.append(k)
    return KeypointFrame(frame.frame_index, frame.timestamp_s,
                         (PersonPose(0, tuple(kps)),))


class TestLegCorrection:
    def test_identity_when_no_swaps(self, walker):
        seq, _ = walker
        corrected = correct_leg_labels(seq)
        assert corrected == seq

    def test_two_frame_swap_restored(self):
        seq = make_sequence([0, 0], lankle_x=[10, 10], rankle_x=[40, 40])
        broken = KeypointSequence(seq.subject_id, seq.sequence_id, seq.fps,
                                  (seq.frames[0], _swap_ankles(seq.frames[1])))
        fixed = correct_leg_labels(broken)
        assert fixed.frames[1].pose(0).get(LANKLE).x == 10
        assert fixed.frames[1].pose(0).get(RANKLE).x == 40

    def test_random_swaps_fully_restored(self, walker):
        seq, _ = walker
        rng = np.random.default_rng(5)
        frames = [
            _swap_ankles(f) if rng.random() < 0.2 and i > 0 else f
            for i, f in enumerate(seq.frames)
        ]
        broken = KeypointSequence(seq.subject_id, seq.sequence_id, seq.fps,
                                  tuple(frames))
        fixed = correct_leg_labels(broken)
        for got, want in zip(fixed.frames, seq.frames):
            assert got.pose(0).get(LANKLE).x == pytest.approx(want.pose(0).get(LANKLE).x)
            assert got.pose(0).get(RANKLE).x == pytest.approx(want.pose(0).get(RANKLE).x)

    def test_idempotent(self, walker):
        seq, _ = walker
        once = correct_leg_labels(seq)
        assert correct_leg_labels(once) == once

    def test_frames_missing_ankles_pass_through(self):
        seq = make_sequence([0, 1, 2], lankle_x=[10, None, 12],
                            rankle_x=[40, None, 42])
        corrected = correct_leg_labels(seq)
        assert corrected.frames[1] == seq.frames[1]


class TestEvents:
    def test_sine_extrema(self):
        fps, dur = 30.0, 2.0
        t = np.arange(int(fps * dur)) / fps
        seq = make_sequence(np.zeros(len(t)), lankle_x=np.sin(2 * np.pi * t),
                            rankle_x=[None] * len(t))
        events = detect_events(seq, WalkDirection.LEFT_TO_RIGHT)
        strikes = [e for e in events if e.kind is EventKind.HEEL_STRIKE]
        toeoffs = [e for e in events if e.kind is EventKind.TOE_OFF]
        assert [pytest.approx(e.time_s, abs=1 / fps) for e in strikes] == [0.25, 1.25]
        assert [pytest.approx(e.time_s, abs=1 / fps) for e in toeoffs] == [0.75, 1.75]

    def test_monotone_signal_no_events(self):
        n = 30
        seq = make_sequence(np.zeros(n), lankle_x=np.linspace(0, 50, n))
        assert detect_events(seq, WalkDirection.LEFT_TO_RIGHT) == []

    def test_walker_cadence_intervals(self, walker):
        seq, _ = walker
        events = detect_events(correct_leg_labels(seq),
                               WalkDirection.LEFT_TO_RIGHT)
        for leg in Leg:
            strikes = [e.time_s for e in events
                       if e.leg is leg and e.kind is EventKind.HEEL_STRIKE]
            for a, b in zip(strikes, strikes[1:]):
                assert b - a == pytest.approx(1.0, abs=1 / seq.fps)

    def test_translation_invariance(self, walker):
        seq, _ = walker
        shifted = make_shifted(seq, 500.0)
        a = detect_events(seq, WalkDirection.LEFT_TO_RIGHT)
        b = detect_events(shifted, WalkDirection.LEFT_TO_RIGHT)
        assert [(e.frame_index, e.leg, e.kind) for e in a] == \
            [(e.frame_index, e.leg, e.kind) for e in b]

    def test_short_signal_errors(self):
        seq = make_sequence([0, 0], lankle_x=[1, 2])
        with pytest.raises(InsufficientDataError):
            detect_events(seq, WalkDirection.LEFT_TO_RIGHT)

    def test_gap_interpolation_bridges_small_gaps(self):
        fps = 30.0
        t = np.arange(60) / fps
        x = np.sin(2 * np.pi * t)
        lank = [None if 20 <= i < 24 else x[i] for i in range(60)]
        seq = make_sequence(np.zeros(60), lankle_x=lank)
        events = detect_events(seq, WalkDirection.LEFT_TO_RIGHT)
        assert len([e for e in events if e.kind is EventKind.HEEL_STRIKE]) == 2


def make_shifted(seq, dx):
    frames = []
    for f in seq.frames:
        poses = []
        for p in f.poses:
            kps = tuple(
                Keypoint(k.name, k.x + dx if k.confidence > 0 else k.x, k.y,
                         k.confidence) for k in p.keypoints)
            poses.append(PersonPose(p.person_index, kps))
        frames.append(KeypointFrame(f.frame_index, f.timestamp_s, tuple(poses)))
    return KeypointSequence(seq.subject_id, seq.sequence_id, seq.fps, tuple(frames))


class TestFullCycle:
    def test_two_same_leg_strikes(self):
        events = [GaitEvent(0.2, 6, Leg.LEFT, EventKind.HEEL_STRIKE),
                  GaitEvent(1.3, 39, Leg.LEFT, EventKind.HEEL_STRIKE)]
        assert validate_full_cycle(events)

    def test_mixed_events_insufficient(self):
        events = [GaitEvent(0.2, 6, Leg.LEFT, EventKind.HEEL_STRIKE),
                  GaitEvent(0.5, 15, Leg.RIGHT, EventKind.TOE_OFF)]
        assert not validate_full_cycle(events)

    def test_clip_shorter_than_cycle_rejected(self, walker_spec):
        seq, _ = generate_walker(walker_spec, 0.8, 30.0, seed=0, start_x=60.0)
        report = extract_features(seq)
        assert report.rejected
        assert "gait cycle" in report.rejection_reason
        assert report.rows == []


class TestFeatures:
    def test_walker_timing_features(self, walker):
        seq, truth = walker
        report = extract_features(seq)
        assert not report.rejected and report.rows
        tol = 2 / seq.fps
        for row in report.rows:
            for name in ("left_step_time_s", "right_step_time_s",
                         "left_stance_time_s", "right_stance_time_s",
                         "left_swing_time_s", "right_swing_time_s"):
                value = getattr(row, name)
                if value is not None:
                    assert value == pytest.approx(truth.features["step_time_s"], abs=tol)
            stride = truth.features["stride_time_s"]
            if row.left_stance_time_s is not None and row.left_swing_time_s is not None:
                assert row.left_stance_time_s + row.left_swing_time_s == \
                    pytest.approx(stride, abs=tol)

    def test_step_lengths_from_calibration(self):
        spec = WalkerSpec("w", cadence_hz=1.0, step_length_px=150.0)
        seq, _ = generate_walker(spec, 4.0, 30.0, seed=1)
        cal = MarkerCalibration(0.0, 100.0, 1.0)  # 0.01 m/px
        report = extract_features(seq, cal=cal)
        lengths = [v for row in report.rows
                   for v in (row.left_step_length_m, row.right_step_length_m)
                   if v is not None]
        assert lengths
        for v in lengths:
            assert v == pytest.approx(1.5, abs=2 * 0.01)

    def test_time_features_independent_of_calibration(self, walker):
        seq, _ = walker
        without = extract_features(seq)
        with_cal = extract_features(seq, cal=MarkerCalibration(0, 50, 1.0))
        for a, b in zip(without.rows, with_cal.rows):
            assert a.left_step_time_s == b.left_step_time_s
            assert a.right_swing_time_s == b.right_swing_time_s
            assert a.left_step_length_m is None
            assert b.left_step_length_m is not None

    def test_step_length_scales_linearly(self, walker):
        seq, _ = walker
        one = extract_features(seq, cal=MarkerCalibration(0, 100, 1.0))
        three = extract_features(seq, cal=MarkerCalibration(0, 100, 3.0))
        for a, b in zip(one.rows, three.rows):
            if a.left_step_length_m is not None:
                assert b.left_step_length_m == pytest.approx(3 * a.left_step_length_m)

    def test_mirrored_direction_same_features(self, walker_spec):
        import dataclasses
        fwd, _ = generate_walker(walker_spec, 4.0, 30.0, seed=2, start_x=60.0)
        mirrored = dataclasses.replace(walker_spec,
                                       velocity_px_s=-walker_spec.velocity_px_s)
        rev, _ = generate_walker(mirrored, 4.0, 30.0, seed=2, start_x=60.0)
        a = extract_features(fwd)
        b = extract_features(rev)
        assert len(a.rows) == len(b.rows)
        tol = 2 / 30.0
        for ra, rb in zip(a.rows, b.rows):
            for name, va in ra.values().items():
                vb = getattr(rb, name)
                if va is not None and vb is not None:
                    assert vb == pytest.approx(va, abs=tol)

    def test_all_durations_positive(self, walker):
        seq, _ = walker
        for row in extract_features(seq).rows:
            for value in row.values().values():
                if value is not None:
                    assert value > 0


def test_feature_csv_roundtrip(tmp_path, walker):
    seq, _ = walker
    rows = extract_features(seq, cal=MarkerCalibration(0, 100, 1.0)).rows
    path = tmp_path / "features.csv"
    write_feature_csv(rows, path)
    back = read_feature_csv(path)
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        assert a.subject_id == b.subject_id
        assert a.values() == b.values()
