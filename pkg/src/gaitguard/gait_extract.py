"""Gait feature extraction from keypoint sequences.

Pipeline: detect the walking direction, fix swapped left/right ankle
labels, locate heel-strike and toe-off events per leg, check that at
least one full gait cycle is present, and emit per-cycle feature rows
(step/stance/swing/double-support times, and step lengths when a marker
calibration is supplied).

Heel-strikes are modeled as local maxima of the forward ankle excursion
relative to the midhip, toe-offs as local minima.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from .errors import AmbiguousDirectionError, InsufficientDataError, ValidationError
from .keypoint_io import (
    LANKLE,
    MIDHIP,
    RANKLE,
    Keypoint,
    KeypointFrame,
    KeypointSequence,
    MarkerCalibration,
    PersonPose,
    meters_per_pixel,
)


class WalkDirection(enum.Enum):
    LEFT_TO_RIGHT = "left_to_right"
    RIGHT_TO_LEFT = "right_to_left"

    @property
    def sign(self) -> int:
        return 1 if self is WalkDirection.LEFT_TO_RIGHT else -1


class Leg(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class EventKind(enum.Enum):
    HEEL_STRIKE = "heel_strike"
    TOE_OFF = "toe_off"


@dataclass(frozen=True, order=True)
class GaitEvent:
    time_s: float
    frame_index: int
    leg: Leg = field(compare=False)
    kind: EventKind = field(compare=False)


@dataclass
class EventParams:
    """Tuning for the peak detector.

    min_prominence_frac: fraction of the signal's (max - min) a peak must
    stand out by. min_separation_s: minimum spacing between same-kind
    events. max_gap_frames: longest run of missing samples bridged by
    linear interpolation; longer gaps split the search domain.
    """

    min_prominence_frac: float = 0.10
    min_separation_s: float = 0.25
    max_gap_frames: int = 5


FEATURE_NAMES = (
    "left_step_time_s",
    "right_step_time_s",
    "left_stance_time_s",
    "right_stance_time_s",
    "left_swing_time_s",
    "right_swing_time_s",
    "rl_double_support_s",
    "lr_double_support_s",
    "left_step_length_m",
    "right_step_length_m",
)
TIME_FEATURES = FEATURE_NAMES[:8]
LENGTH_FEATURES = FEATURE_NAMES[8:]

MAX_DURATION_S = 5.0  # sanity bound for any human gait interval
MIN_PRESENT_FEATURES = 4


@dataclass
class GaitFeatureRow:
    """Feature values for one gait cycle; None marks an absent feature."""

    subject_id: str
    sequence_id: str
    cycle_index: int
    left_step_time_s: float | None = None
    right_step_time_s: float | None = None
    left_stance_time_s: float | None = None
    right_stance_time_s: float | None = None
    left_swing_time_s: float | None = None
    right_swing_time_s: float | None = None
    rl_double_support_s: float | None = None
    lr_double_support_s: float | None = None
    left_step_length_m: float | None = None
    right_step_length_m: float | None = None

    def values(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in FEATURE_NAMES}

    def present_count(self) -> int:
        return sum(1 for v in self.values().values() if v is not None)


@dataclass
class ExtractionReport:
    rows: list[GaitFeatureRow]
    rejected: bool = False
    rejection_reason: str | None = None


def _valid(kp: Keypoint | None) -> bool:
    return kp is not None and kp.confidence > 0.0


def detect_direction(seq: KeypointSequence, person_index: int = 0) -> WalkDirection:
    """Walking direction from the net midhip displacement."""
    xs = []
    for f in seq.frames:
        pose = f.pose(person_index)
        if pose is None:
            continue
        hip = pose.get(MIDHIP)
        if _valid(hip):
            xs.append(hip.x)
    if len(xs) < 2:
        raise InsufficientDataError(
            f"need >=2 valid MidHip observations, got {len(xs)}"
        )
    displacement = xs[-1] - xs[0]
    if abs(displacement) < 1.0:
        raise AmbiguousDirectionError(
            f"net MidHip displacement {displacement:.3f}px is below 1px"
        )
    return WalkDirection.LEFT_TO_RIGHT if displacement > 0 else WalkDirection.RIGHT_TO_LEFT


def correct_leg_labels(seq: KeypointSequence, person_index: int = 0) -> KeypointSequence:
    """Fix swapped LAnkle/RAnkle labels frame by frame.

    For each frame with both ankles, keeps or swaps the pair, whichever
    minimizes the summed displacement from the last known ankle positions.
    The first valid frame's labels are taken as given. Idempotent.
    """
    prev = {LANKLE: None, RANKLE: None}
    new_frames = []
    for f in seq.frames:
        pose = f.pose(person_index)
        if pose is None:
            new_frames.append(f)
            continue
        left, right = pose.get(LANKLE), pose.get(RANKLE)
        if _valid(left) and _valid(right):
            if prev[LANKLE] is not None and prev[RANKLE] is not None:
                keep = (_dist(prev[LANKLE], left) + _dist(prev[RANKLE], right))
                swap = (_dist(prev[LANKLE], right) + _dist(prev[RANKLE], left))
                if swap < keep:
                    left, right = (
                        Keypoint(LANKLE, right.x, right.y, right.confidence),
                        Keypoint(RANKLE, left.x, left.y, left.confidence),
                    )
                    pose = _replace_ankles(pose, left, right)
                    f = _replace_pose(f, pose, person_index)
            prev[LANKLE], prev[RANKLE] = left, right
        elif _valid(left):
            prev[LANKLE] = left
        elif _valid(right):
            prev[RANKLE] = right
        new_frames.append(f)
    return KeypointSequence(seq.subject_id, seq.sequence_id, seq.fps, tuple(new_frames))


def _dist(a: Keypoint, b: Keypoint) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _replace_ankles(pose: PersonPose, left: Keypoint, right: Keypoint) -> PersonPose:
    kps = []
    for k in pose.keypoints:
        if k.name == LANKLE:
            kps.append(left)
        elif k.name == RANKLE:
            kps.append(right)
        else:
            kps.append(k)
    return PersonPose(pose.person_index, tuple(kps))


def _replace_pose(frame: KeypointFrame, pose: PersonPose, person_index: int) -> KeypointFrame:
    poses = tuple(pose if p.person_index == person_index else p for p in frame.poses)
    return KeypointFrame(frame.frame_index, frame.timestamp_s, poses)


def _excursion_signal(seq, leg_joint, sign, person_index):
    """Per-frame forward ankle excursion relative to the midhip; NaN where
    either joint is missing."""
    n = len(seq.frames)
    sig = np.full(n, np.nan)
    for i, f in enumerate(seq.frames):
        pose = f.pose(person_index)
        if pose is None:
            continue
        hip, ankle = pose.get(MIDHIP), pose.get(leg_joint)
        if _valid(hip) and _valid(ankle):
            sig[i] = sign * (ankle.x - hip.x)
    return sig


def _fill_small_gaps(sig: np.ndarray, max_gap: int) -> np.ndarray:
    """Linearly interpolate interior NaN runs of length <= max_gap."""
    out = sig.copy()
    n = len(sig)
    i = 0
    while i < n:
        if not np.isnan(out[i]):
            i += 1
            continue
        j = i
        while j < n and np.isnan(out[j]):
            j += 1
        gap = j - i
        if 0 < i and j < n and gap <= max_gap:
            left, right = out[i - 1], out[j]
            for k in range(gap):
                out[i + k] = left + (right - left) * (k + 1) / (gap + 1)
        i = j
    return out


def _segments(sig: np.ndarray):
    """Contiguous runs of finite samples as (start, values) pairs."""
    n = len(sig)
    i = 0
    while i < n:
        if np.isnan(sig[i]):
            i += 1
            continue
        j = i
        while j < n and not np.isnan(sig[j]):
            j += 1
        yield i, sig[i:j]
        i = j


def detect_events(
    seq: KeypointSequence,
    direction: WalkDirection,
    params: EventParams | None = None,
    person_index: int = 0,
) -> list[GaitEvent]:
    """Heel-strike/toe-off events for both legs, sorted by time.

    Expects leg labels to be corrected already.
    """
    params = params or EventParams()
    min_dist = max(1, round(params.min_separation_s * seq.fps))
    events: list[GaitEvent] = []
    total_valid = 0
    for leg, joint in ((Leg.LEFT, LANKLE), (Leg.RIGHT, RANKLE)):
        raw = _excursion_signal(seq, joint, direction.sign, person_index)
        total_valid = max(total_valid, int(np.sum(~np.isnan(raw))))
        sig = _fill_small_gaps(raw, params.max_gap_frames)
        for start, values in _segments(sig):
            if len(values) < 3:
                continue
            prominence = params.min_prominence_frac * float(values.max() - values.min())
            if prominence <= 0:
                continue
            maxima, _ = find_peaks(values, prominence=prominence, distance=min_dist)
            minima, _ = find_peaks(-values, prominence=prominence, distance=min_dist)
            for kind, idxs in ((EventKind.HEEL_STRIKE, maxima), (EventKind.TOE_OFF, minima)):
                for i in idxs:
                    frame = seq.frames[start + int(i)].frame_index
                    events.append(GaitEvent(frame / seq.fps, frame, leg, kind))
    if total_valid < 3:
        raise InsufficientDataError(
            f"excursion signal has {total_valid} valid samples, need >=3"
        )
    events.sort(key=lambda e: (e.time_s, e.leg.value, e.kind.value))
    return events


def validate_full_cycle(events: list[GaitEvent]) -> bool:
    """True iff some leg completes a full cycle (two heel-strikes or two
    toe-offs on the same leg)."""
    for leg in Leg:
        for kind in EventKind:
            n = sum(1 for e in events if e.leg is leg and e.kind is kind)
            if n >= 2:
                return True
    return False


def _first_event(events, leg, kind, t_from, t_to, inclusive_end):
    for e in events:
        if e.leg is leg and e.kind is kind and e.time_s >= t_from:
            if e.time_s < t_to or (inclusive_end and e.time_s <= t_to):
                return e
            return None
    return None


def _pair_duration(events, src_leg, src_kind, dst_leg, dst_kind, t0, t1,
                   no_strike_between=False):
    """Duration of the first (src -> next dst) event pair inside [t0, t1];
    None when the pair does not occur or the duration is non-positive or
    implausibly long.

    no_strike_between marks intervals during which both feet stay planted
    (double support): any heel-strike strictly inside the interval proves
    the pairing wrapped past a step, so the feature is absent instead.
    """
    src = _first_event(events, src_leg, src_kind, t0, t1, inclusive_end=False)
    if src is None:
        return None
    dst = None
    for e in events:
        if e.leg is dst_leg and e.kind is dst_kind and e.time_s > src.time_s:
            dst = e
            break
    if dst is None or dst.time_s > t1:
        return None
    if no_strike_between:
        for e in events:
            if (e.kind is EventKind.HEEL_STRIKE
                    and src.time_s < e.time_s < dst.time_s):
                return None
    duration = dst.time_s - src.time_s
    if duration <= 0 or duration >= MAX_DURATION_S:
        return None
    return duration


def _ankle_separation_at(seq, frame_index, person_index):
    for f in seq.frames:
        if f.frame_index == frame_index:
            pose = f.pose(person_index)
            if pose is None:
                return None
            l, r = pose.get(LANKLE), pose.get(RANKLE)
            if _valid(l) and _valid(r):
                return abs(l.x - r.x)
            return None
    return None


def extract_features(
    seq: KeypointSequence,
    cal: MarkerCalibration | None = None,
    params: EventParams | None = None,
    person_index: int = 0,
) -> ExtractionReport:
    """Run the full extraction pipeline on one walking sequence.

    Returns a rejected report when no full gait cycle is present; raises
    if direction or event detection cannot run at all.
    """
    if not seq.frames:
        raise InsufficientDataError("sequence has no frames")
    direction = detect_direction(seq, person_index)
    corrected = correct_leg_labels(seq, person_index)
    events = detect_events(corrected, direction, params, person_index)
    if not validate_full_cycle(events):
        return ExtractionReport(
            rows=[],
            rejected=True,
            rejection_reason=(
                "no full gait cycle: need at least two consecutive "
                "heel-strikes or toe-offs on the same leg"
            ),
        )
    mpp = meters_per_pixel(cal) if cal is not None else None

    strikes = {
        leg: [e for e in events if e.leg is leg and e.kind is EventKind.HEEL_STRIKE]
        for leg in Leg
    }
    # Cycles are anchored at consecutive heel-strikes of the leg with the
    # most strikes (ties go to the left leg).
    ref_leg = max(Leg, key=lambda leg: (len(strikes[leg]), leg is Leg.LEFT))
    anchors = strikes[ref_leg]
    rows = []
    for ci in range(len(anchors) - 1):
        t0, t1 = anchors[ci].time_s, anchors[ci + 1].time_s
        row = GaitFeatureRow(seq.subject_id, seq.sequence_id, ci)
        hs, to = EventKind.HEEL_STRIKE, EventKind.TOE_OFF
        row.left_step_time_s = _pair_duration(events, Leg.RIGHT, hs, Leg.LEFT, hs, t0, t1)
        row.right_step_time_s = _pair_duration(events, Leg.LEFT, hs, Leg.RIGHT, hs, t0, t1)
        row.left_stance_time_s = _pair_duration(events, Leg.LEFT, hs, Leg.LEFT, to, t0, t1)
        row.right_stance_time_s = _pair_duration(events, Leg.RIGHT, hs, Leg.RIGHT, to, t0, t1)
        row.left_swing_time_s = _pair_duration(events, Leg.LEFT, to, Leg.LEFT, hs, t0, t1)
        row.right_swing_time_s = _pair_duration(events, Leg.RIGHT, to, Leg.RIGHT, hs, t0, t1)
        row.rl_double_support_s = _pair_duration(events, Leg.RIGHT, hs, Leg.LEFT, to,
                                                 t0, t1, no_strike_between=True)
        row.lr_double_support_s = _pair_duration(events, Leg.LEFT, hs, Leg.RIGHT, to,
                                                 t0, t1, no_strike_between=True)
        if mpp is not None:
            for leg, attr in ((Leg.LEFT, "left_step_length_m"),
                              (Leg.RIGHT, "right_step_length_m")):
                strike = _first_event(events, leg, hs, t0, t1, inclusive_end=False)
                if strike is not None:
                    sep = _ankle_separation_at(corrected, strike.frame_index, person_index)
                    if sep is not None:
                        setattr(row, attr, sep * mpp)
        if row.present_count() >= MIN_PRESENT_FEATURES:
            rows.append(row)
    return ExtractionReport(rows=rows, rejected=False)


# --- feature CSV interchange ------------------------------------------------

CSV_HEADER = ("subject_id", "sequence_id", "cycle_index") + FEATURE_NAMES


def write_feature_csv(rows: list[GaitFeatureRow], path) -> None:
    """Interchange CSV consumed by the identification and evaluation
    modules; an empty cell marks an absent feature (one scalar per cell)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            values = row.values()
            writer.writerow(
                [row.subject_id, row.sequence_id, row.cycle_index]
                + ["" if values[n] is None else repr(values[n]) for n in FEATURE_NAMES]
            )


def read_feature_csv(path) -> list[GaitFeatureRow]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValidationError(f"{path}: unexpected feature CSV header")
        for rec in reader:
            if not rec:
                continue
            row = GaitFeatureRow(rec[0], rec[1], int(rec[2]))
            for name, cell in zip(FEATURE_NAMES, rec[3:]):
                setattr(row, name, float(cell) if cell != "" else None)
            rows.append(row)
    return rows
