import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitguard.errors import (
    DegenerateCalibrationError,
    ParseError,
    ValidationError,
)
from gaitguard.keypoint_io import (
    Frame,
    Keypoint,
    MarkerCalibration,
    frame_id_from_name,
    list_frame_files,
    meters_per_pixel,
    read_frame,
    read_keypoint_sequence,
    write_frame,
    write_keypoint_sequence,
)
from gaitguard.synthlab import WalkerSpec, generate_walker


HEADER = '{"subject_id":"s1","sequence_id":"a","fps":30}'
FRAME0 = ('{"frame_index":0,"timestamp_s":0.0,"poses":[{"person_index":0,'
          '"keypoints":[{"name":"MidHip","x":10.0,"y":20.0,"confidence":1.0}]}]}')
FRAME1 = FRAME0.replace('"frame_index":0', '"frame_index":1')


def test_read_header_and_frames(tmp_path):
    path = tmp_path / "seq.jsonl"
    path.write_text("\n".join([HEADER, FRAME0, FRAME1]) + "\n")
    seq = read_keypoint_sequence(path)
    assert seq.fps == 30
    assert len(seq.frames) == 2
    assert seq.subject_id == "s1"
    assert seq.frames[0].pose(0).get("MidHip").x == 10.0


def test_duplicate_frame_index_rejected(tmp_path):
    path = tmp_path / "seq.jsonl"
    path.write_text("\n".join([HEADER, FRAME0, FRAME0]) + "\n")
    with pytest.raises(ValidationError, match="duplicate frame_index 0"):
        read_keypoint_sequence(path)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "seq.jsonl"
    path.write_text("\n".join([HEADER, FRAME0, "{not json"]) + "\n")
    with pytest.raises(ParseError, match="line 3"):
        read_keypoint_sequence(path)


def test_missing_fps_rejected(tmp_path):
    path = tmp_path / "seq.jsonl"
    path.write_text('{"subject_id":"s1","sequence_id":"a"}\n' + FRAME0 + "\n")
    with pytest.raises(ValidationError, match="fps"):
        read_keypoint_sequence(path)


def test_frames_sorted_and_none_dropped(tmp_path):
    path = tmp_path / "seq.jsonl"
    path.write_text("\n".join([HEADER, FRAME1, FRAME0]) + "\n")
    seq = read_keypoint_sequence(path)
    assert [f.frame_index for f in seq.frames] == [0, 1]


def test_walker_roundtrip_byte_identical(tmp_path):
    spec = WalkerSpec("w1", cadence_hz=1.0, amplitude_px=35.0, noise_px=0.7)
    seq, _ = generate_walker(spec, duration_s=2.0, fps=30.0, seed=3)
    assert len(seq.frames) == 60
    first = tmp_path / "first.jsonl"
    second = tmp_path / "second.jsonl"
    write_keypoint_sequence(seq, first)
    write_keypoint_sequence(read_keypoint_sequence(first), second)
    assert first.read_bytes() == second.read_bytes()
    assert len(read_keypoint_sequence(first).frames) == 60


def test_confidence_range_enforced():
    with pytest.raises(ValidationError):
        Keypoint("MidHip", 0.0, 0.0, 1.5)
    with pytest.raises(ValidationError):
        Keypoint("MidHip", float("nan"), 0.0, 1.0)
    # missing joints may carry any placeholder coordinates
    Keypoint("MidHip", 0.0, 0.0, 0.0)


def test_meters_per_pixel_examples():
    assert meters_per_pixel(MarkerCalibration(0, 100, 2.5)) == 0.025
    assert meters_per_pixel(MarkerCalibration(100, 0, 2.5)) == 0.025
    got = meters_per_pixel(MarkerCalibration(37.5, 412.5, 2.75))
    assert got == pytest.approx(2.75 / 375.0)


def test_degenerate_calibration():
    with pytest.raises(DegenerateCalibrationError):
        MarkerCalibration(50.0, 50.0, 2.5)
    with pytest.raises(ValidationError):
        MarkerCalibration(0.0, 100.0, -1.0)


@given(a=st.floats(-1e5, 1e5), b=st.floats(-1e5, 1e5),
       d=st.floats(0.01, 100.0))
@settings(max_examples=50, deadline=None)
def test_meters_per_pixel_symmetric(a, b, d):
    if a == b:
        return
    assert meters_per_pixel(MarkerCalibration(a, b, d)) == \
        meters_per_pixel(MarkerCalibration(b, a, d))


def test_frame_buffer_length_checked():
    with pytest.raises(ValidationError, match="buffer length"):
        Frame(0, 4, 4, 0, np.zeros(10, dtype=np.uint8))
    f = Frame.from_bytes(1, 2, 2, 0, bytes(12))
    assert f.pixels.shape == (2, 2, 3)


def test_frame_png_and_rgb_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    frame = Frame(7, 12, 9, 123, rng.integers(0, 256, (9, 12, 3), dtype=np.uint8))
    png = tmp_path / "frame_000007.png"
    write_frame(frame, png)
    back = read_frame(png)
    assert back.frame_id == 7
    assert np.array_equal(back.pixels, frame.pixels)

    raw = tmp_path / "frame_000007.rgb"
    write_frame(frame, raw)
    assert json.loads((tmp_path / "frame_000007.json").read_text()) == {
        "width": 12, "height": 9}
    back = read_frame(raw)
    assert np.array_equal(back.pixels, frame.pixels)


def test_frame_listing_orders_by_id(tmp_path):
    for fid in (3, 1, 2):
        write_frame(Frame(fid, 2, 2, 0, np.zeros((2, 2, 3), dtype=np.uint8)),
                    tmp_path / f"frame_{fid:04d}.png")
    assert [frame_id_from_name(p) for p in list_frame_files(tmp_path)] == [1, 2, 3]
