"""Synthetic walkers with analytically known gait events, a marker-based
frame renderer, and a marker-centroid keypoint extractor.

The walker model keeps every event time closed-form: the midhip moves at
constant velocity and each ankle oscillates sinusoidally around it, legs
anti-phase. Heel-strikes are the forward-excursion maxima, toe-offs the
minima, so expected event times and feature values follow directly from
the cadence and phase.

The renderer draws one colored disc per joint on a gray background. The
extractor recovers each joint as the centroid of pixels near its color;
when a joint's marker is destroyed it predicts the joint from the nearest
visible proximal marker (ankle from knee, knee from hip, hip from neck)
plus that joint's running-average offset. Keypoint-local masking leaves
the knee markers intact, so ankles are still recovered near their true
paths, while lower-body masking removes every anchor below the hip and
flattens the gait signal. This body-relative inference is what makes
patch masking weak and region masking strong.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .gait_extract import EventKind, GaitEvent, Leg, WalkDirection
from .keypoint_io import (
    LANKLE,
    MIDHIP,
    RANKLE,
    Frame,
    Keypoint,
    KeypointFrame,
    KeypointSequence,
    PersonPose,
)
from .mitigate import PersonRegion, RegionRecord

NECK = "Neck"
LKNEE = "LKnee"
RKNEE = "RKnee"

# Skeleton proportions relative to the hip-to-ankle drop. The knee carries
# a reduced copy of the ankle oscillation, mirroring how mid-limb evidence
# tracks the foot.
TORSO_RATIO = 0.667
KNEE_DROP_RATIO = 0.62
KNEE_SWING_RATIO = 0.55


def ankle_y_split_px(spec: "WalkerSpec", fps: float) -> float:
    """Vertical separation between the two ankles.

    At an ankle crossing both feet share an x position, so proximity-based
    left/right correction would swap labels unless the legs stay apart in
    y (as lifted feet do). Keeping the split above the worst per-frame
    x displacement (with 1.5x margin) makes the true labeling the cheaper
    assignment at every crossing.
    """
    per_frame_x = spec.amplitude_px * 2.0 * math.pi * spec.cadence_hz / fps
    return max(0.35 * spec.amplitude_px, 0.75 * per_frame_x)


def knee_y_split_px(spec: "WalkerSpec", fps: float) -> float:
    """Knee counterpart of the ankle split; also keeps the two knee discs
    from fully occluding each other when the legs cross."""
    return max(0.5 * ankle_y_split_px(spec, fps), 4.5)


# Pedestrian-detector boxes include generous margins around the figure;
# the margins matter here because the windowed noise fades to zero at the
# region edges and no real detection puts the feet on the very last row.
BOX_PAD_TOP = 0.15
BOX_PAD_BOTTOM = 0.15


@dataclass(frozen=True)
class WalkerSpec:
    """Parameters of one synthetic walking subject.

    step_length_px is the ankle separation at heel-strike; the sinusoidal
    model ties it to twice the fore-aft amplitude, so providing either
    field fills in the other and providing both inconsistently is an
    error.
    """

    subject_id: str
    velocity_px_s: float = 60.0
    cadence_hz: float = 1.0
    amplitude_px: float | None = None
    step_length_px: float | None = None
    hip_height_px: float = 100.0
    ankle_height_px: float = 220.0
    phase: float = 0.0
    noise_px: float = 0.0

    def __post_init__(self):
        amp, step = self.amplitude_px, self.step_length_px
        if amp is None and step is None:
            amp = 40.0
        if amp is None:
            amp = step / 2.0
        if step is None:
            step = 2.0 * amp
        if abs(step - 2.0 * amp) > 1e-9:
            raise ValidationError(
                f"walker {self.subject_id}: step_length_px ({step}) must equal "
                f"2 x amplitude_px ({amp}) under the sinusoidal ankle model")
        object.__setattr__(self, "amplitude_px", float(amp))
        object.__setattr__(self, "step_length_px", float(step))
        if self.cadence_hz <= 0 or self.amplitude_px <= 0 or self.step_length_px <= 0:
            raise ValidationError(
                f"walker {self.subject_id}: cadence, amplitude and step length "
                "must all be > 0")
        if self.noise_px < 0:
            raise ValidationError(f"walker {self.subject_id}: noise_px must be >= 0")
        if self.ankle_height_px <= self.hip_height_px:
            raise ValidationError(
                f"walker {self.subject_id}: ankle must sit below the hip "
                "(y grows downward)")

    @property
    def leg_phases(self) -> dict[Leg, float]:
        return {Leg.LEFT: self.phase, Leg.RIGHT: self.phase + math.pi}

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "velocity_px_s": self.velocity_px_s,
            "cadence_hz": self.cadence_hz,
            "amplitude_px": self.amplitude_px,
            "step_length_px": self.step_length_px,
            "hip_height_px": self.hip_height_px,
            "ankle_height_px": self.ankle_height_px,
            "phase": self.phase,
            "noise_px": self.noise_px,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "WalkerSpec":
        return cls(**{k: obj[k] for k in obj if k in cls.__dataclass_fields__})


@dataclass
class GroundTruth:
    """Analytic events and expected feature values for one generated clip."""

    direction: WalkDirection
    events: list[GaitEvent]
    features: dict[str, float]
    all_extrema_s: dict[tuple[Leg, EventKind], list[float]] = field(default_factory=dict)


def load_walker_specs(path) -> list[WalkerSpec]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValidationError(f"{path}: walker spec file must hold a JSON array")
    return [WalkerSpec.from_dict(obj) for obj in data]


def fit_start_x(spec: WalkerSpec, duration_s: float, canvas_width: int,
                radius: int = 4) -> float:
    """Starting hip x that keeps the walker's discs on a canvas for the
    whole clip (walkers heading left start at the far edge)."""
    margin = spec.amplitude_px + radius + 2
    if spec.velocity_px_s >= 0:
        return margin
    return canvas_width - margin


def _extremum_times(phase: float, cadence: float, target: float, t_max: float):
    """Times in [0, t_max] where 2*pi*cadence*t + phase hits target mod 2*pi."""
    omega = 2.0 * math.pi * cadence
    t0 = (target - phase) / omega
    period = 1.0 / cadence
    k0 = math.ceil((0.0 - t0) / period - 1e-12)
    out = []
    k = k0
    while True:
        t = t0 + k * period
        if t > t_max + 1e-12:
            break
        if t >= -1e-12:
            out.append(max(t, 0.0))
        k += 1
    return out


def generate_walker(
    spec: WalkerSpec,
    duration_s: float,
    fps: float,
    seed: int = 0,
    start_x: float = 0.0,
    sequence_id: str | None = None,
) -> tuple[KeypointSequence, GroundTruth]:
    """Sample a walker's keypoints at fps and derive its ground truth.

    Observation jitter (noise_px) perturbs the emitted keypoints only;
    ground-truth events always come from the exact trajectory extrema.
    """
    n = round(duration_s * fps)
    if n < 3:
        raise ValidationError(f"duration {duration_s}s at {fps}fps yields {n} frames (<3)")
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF])
    s = 1 if spec.velocity_px_s >= 0 else -1
    direction = WalkDirection.LEFT_TO_RIGHT if s > 0 else WalkDirection.RIGHT_TO_LEFT
    leg_len = spec.ankle_height_px - spec.hip_height_px
    neck_y = spec.hip_height_px - TORSO_RATIO * leg_len
    knee_y = spec.hip_height_px + KNEE_DROP_RATIO * leg_len
    split = ankle_y_split_px(spec, fps)
    ksplit = knee_y_split_px(spec, fps)
    ankle_y = {Leg.LEFT: spec.ankle_height_px - split,
               Leg.RIGHT: spec.ankle_height_px + split}
    knee_ys = {Leg.LEFT: knee_y - ksplit, Leg.RIGHT: knee_y + ksplit}
    omega = 2.0 * math.pi * spec.cadence_hz

    frames = []
    for i in range(n):
        t = i / fps
        hip_x = start_x + spec.velocity_px_s * t
        joints = {
            NECK: (hip_x, neck_y),
            MIDHIP: (hip_x, spec.hip_height_px),
        }
        for leg, joint, knee in ((Leg.LEFT, LANKLE, LKNEE), (Leg.RIGHT, RANKLE, RKNEE)):
            osc = math.sin(omega * t + spec.leg_phases[leg])
            joints[joint] = (hip_x + s * spec.amplitude_px * osc, ankle_y[leg])
            joints[knee] = (hip_x + s * KNEE_SWING_RATIO * spec.amplitude_px * osc,
                            knee_ys[leg])
        kps = []
        for name in (NECK, MIDHIP, LKNEE, RKNEE, LANKLE, RANKLE):
            x, y = joints[name]
            if spec.noise_px > 0:
                x += rng.normal(0.0, spec.noise_px)
                y += rng.normal(0.0, spec.noise_px)
            kps.append(Keypoint(name, float(x), float(y), 1.0))
        frames.append(KeypointFrame(i, t, (PersonPose(0, tuple(kps)),)))

    seq = KeypointSequence(
        subject_id=spec.subject_id,
        sequence_id=sequence_id or f"{spec.subject_id}-seq",
        fps=fps,
        frames=tuple(frames),
    )

    t_end = (n - 1) / fps
    # Events within a quarter period of either clip edge lack the sampled
    # descent a peak detector needs; ground truth keeps only fully
    # supported extrema but records all of them for precision checks.
    margin = 0.25 / spec.cadence_hz
    events = []
    all_extrema = {}
    for leg in (Leg.LEFT, Leg.RIGHT):
        phi = spec.leg_phases[leg]
        for kind, target in ((EventKind.HEEL_STRIKE, math.pi / 2.0),
                             (EventKind.TOE_OFF, 3.0 * math.pi / 2.0)):
            times = _extremum_times(phi, spec.cadence_hz, target, t_end)
            all_extrema[(leg, kind)] = times
            for t in times:
                if margin <= t <= t_end - margin:
                    events.append(GaitEvent(t, round(t * fps), leg, kind))
    events.sort(key=lambda e: (e.time_s, e.leg.value, e.kind.value))

    half = 0.5 / spec.cadence_hz
    features = {
        "step_time_s": half,
        "stance_time_s": half,
        "swing_time_s": half,
        "stride_time_s": 1.0 / spec.cadence_hz,
        "double_support_s": 0.0,
        "step_length_px": 2.0 * spec.amplitude_px,
    }
    return seq, GroundTruth(direction, events, features, all_extrema)


# --- rendering ----------------------------------------------------------------

@dataclass(frozen=True)
class MarkerStyle:
    """Colors and detection parameters shared by the renderer and the
    marker extractor.

    Colors sit inside the RGB cube (not at its corners) so that noise
    clamped to 0/255 can never masquerade as a marker.
    """

    joint_colors: tuple[tuple[str, tuple[int, int, int]], ...] = (
        (MIDHIP, (200, 40, 40)),
        (LANKLE, (40, 200, 40)),
        (RANKLE, (40, 40, 200)),
        (LKNEE, (200, 200, 40)),
        (RKNEE, (200, 40, 200)),
        (NECK, (40, 200, 200)),
    )
    radius: int = 4
    background: tuple[int, int, int] = (128, 128, 128)
    # 32 keeps channel values clamped to 0/255 (40+ away from any marker
    # channel) from ever counting as marker evidence.
    color_threshold: float = 32.0
    min_inlier_frac: float = 0.3
    fallback_confidence: float = 0.3
    max_dispersion: float = 2.5  # times radius
    offset_smoothing: float = 0.2

    def color_of(self, name: str) -> tuple[int, int, int] | None:
        for joint, color in self.joint_colors:
            if joint == name:
                return color
        return None

    @property
    def joint_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.joint_colors)


# Fallback anchors, tried in order: a joint lost to noise is predicted from
# the first anchor with a trustworthy estimate plus the running-average
# offset between the two.
FALLBACK_ANCHORS = {
    MIDHIP: (NECK,),
    LKNEE: (MIDHIP,),
    RKNEE: (MIDHIP,),
    LANKLE: (LKNEE, MIDHIP),
    RANKLE: (RKNEE, MIDHIP),
}


def _disc_area(radius: int) -> int:
    r2 = radius * radius
    count = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= r2:
                count += 1
    return count


def render_frames(
    seq: KeypointSequence,
    canvas: tuple[int, int],
    style: MarkerStyle | None = None,
    person_index: int = 0,
) -> tuple[list[Frame], list[RegionRecord]]:
    """Draw each frame's joints as colored discs and emit the tight
    full-body box (plus the three gait keypoints) per frame."""
    style = style or MarkerStyle()
    width, height = canvas
    frames, records = [], []
    for f in seq.frames:
        pixels = np.empty((height, width, 3), dtype=np.uint8)
        pixels[:, :] = style.background
        pose = f.pose(person_index)
        xs, ys = [], []
        gait_kps = {}
        if pose is not None:
            for kp in pose.keypoints:
                color = style.color_of(kp.name)
                if color is None or kp.missing:
                    continue
                cx, cy, r = kp.x, kp.y, style.radius
                if not (r <= cx < width - r and r <= cy < height - r):
                    warnings.warn(
                        f"frame {f.frame_index}: joint {kp.name} at "
                        f"({cx:.1f},{cy:.1f}) clipped by the {width}x{height} canvas",
                        stacklevel=2)
                _draw_disc(pixels, cx, cy, r, color)
                xs.extend((cx - r, cx + r))
                ys.extend((cy - r, cy + r))
                if kp.name in (MIDHIP, LANKLE, RANKLE):
                    gait_kps[kp.name] = (kp.x, kp.y)
        boxes = []
        if xs:
            fig_h = max(ys) - min(ys)
            x0 = max(0, int(math.floor(min(xs))))
            y0 = max(0, int(math.floor(min(ys) - BOX_PAD_TOP * fig_h)))
            x1 = min(width, int(math.ceil(max(xs))) + 1)
            y1 = min(height, int(math.ceil(max(ys) + BOX_PAD_BOTTOM * fig_h)) + 1)
            if x1 > x0 and y1 > y0:
                boxes.append(PersonRegion(x0, y0, x1 - x0, y1 - y0))
        frames.append(Frame(f.frame_index, width, height,
                            round(f.timestamp_s * 1e6), pixels))
        records.append(RegionRecord(f.frame_index, boxes, gait_kps or None))
    return frames, records


def _draw_disc(pixels, cx, cy, radius, color):
    height, width = pixels.shape[:2]
    x0, x1 = int(math.floor(cx - radius)), int(math.ceil(cx + radius)) + 1
    y0, y1 = int(math.floor(cy - radius)), int(math.ceil(cy + radius)) + 1
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width), min(y1, height)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    pixels[y0:y1, x0:x1][mask] = color


# --- marker extraction ---------------------------------------------------------

@dataclass
class _JointEstimate:
    x: float
    y: float
    confidence: float
    detected: bool


class MarkerExtractor:
    """Recovers joint keypoints from rendered (possibly mitigated) frames.

    Keeps per-joint running-average offsets to its fallback anchors,
    initialized from the first clean sighting of each pair and updated
    whenever both ends are confidently detected.
    """

    def __init__(self, style: MarkerStyle | None = None):
        self.style = style or MarkerStyle()
        self._expected_area = _disc_area(self.style.radius)
        self._offsets: dict[tuple[str, str], tuple[float, float]] = {}

    def reset(self) -> None:
        self._offsets.clear()

    def _detect(self, pixels_i32: np.ndarray, sq_norms: np.ndarray,
                color) -> _JointEstimate | None:
        # |p - c|^2 = |p|^2 - 2 p.c + |c|^2; the |p|^2 map is shared
        # across all joint colors of a frame.
        c = np.asarray(color, dtype=np.int32)
        dist2 = sq_norms - 2 * (pixels_i32 @ c) + int(c @ c)
        inliers = dist2 <= self.style.color_threshold ** 2
        ys, xs = np.nonzero(inliers)
        if len(xs) < self.style.min_inlier_frac * self._expected_area:
            return None
        # Noise occasionally produces marker-colored pixels scattered over
        # the perturbed area; a real disc is a compact cluster. Keep only
        # inliers near the coordinate median, then gate on count and
        # dispersion of that cluster.
        mx, my = float(np.median(xs)), float(np.median(ys))
        near = ((xs - mx) ** 2 + (ys - my) ** 2) <= (3.0 * self.style.radius) ** 2
        xs, ys = xs[near], ys[near]
        frac = min(len(xs) / self._expected_area, 1.0)
        if frac < self.style.min_inlier_frac:
            return None
        if max(float(xs.std()), float(ys.std())) > self.style.max_dispersion * self.style.radius:
            return None
        return _JointEstimate(float(xs.mean()), float(ys.mean()), frac, True)

    def _update_offset(self, joint, anchor, est, anchor_est):
        key = (joint, anchor)
        off = (est.x - anchor_est.x, est.y - anchor_est.y)
        old = self._offsets.get(key)
        if old is None:
            self._offsets[key] = off
        else:
            a = self.style.offset_smoothing
            self._offsets[key] = (old[0] + a * (off[0] - old[0]),
                                  old[1] + a * (off[1] - old[1]))

    def process(self, frame: Frame, person_index: int = 0,
                search_box: "PersonRegion | None" = None) -> PersonPose:
        """Extract one frame's joints; absent joints get confidence 0.

        search_box (padded internally) restricts the color search to a
        known person region, as a detector-led pipeline would.
        """
        style = self.style
        pixels = frame.pixels
        ox = oy = 0
        if search_box is not None:
            pad = 4 * style.radius
            padded = PersonRegion(search_box.x - pad, search_box.y - pad,
                                  search_box.w + 2 * pad, search_box.h + 2 * pad)
            clipped = padded.clipped(frame.width, frame.height)
            if clipped is not None:
                ox, oy = clipped.x, clipped.y
                pixels = pixels[oy:oy + clipped.h, ox:ox + clipped.w]
        pixels_i32 = pixels.astype(np.int32)
        sq_norms = np.einsum("ijk,ijk->ij", pixels_i32, pixels_i32)
        estimates: dict[str, _JointEstimate] = {}
        for name in style.joint_names:
            est = self._detect(pixels_i32, sq_norms, style.color_of(name))
            if est is not None:
                est.x += ox
                est.y += oy
                estimates[name] = est
        # Fallbacks resolve proximally first so an anchored chain exists.
        for name in (MIDHIP, LKNEE, RKNEE, LANKLE, RANKLE):
            if name in estimates or name not in style.joint_names:
                continue
            for anchor in FALLBACK_ANCHORS.get(name, ()):
                anchor_est = estimates.get(anchor)
                if anchor_est is None or anchor_est.confidence < style.fallback_confidence:
                    continue
                off = self._offsets.get((name, anchor))
                if off is None:
                    continue
                estimates[name] = _JointEstimate(
                    anchor_est.x + off[0], anchor_est.y + off[1],
                    style.fallback_confidence, False)
                break
        for name in style.joint_names:
            est = estimates.get(name)
            if est is None or not est.detected:
                continue
            for anchor in FALLBACK_ANCHORS.get(name, ()):
                anchor_est = estimates.get(anchor)
                if anchor_est is not None and anchor_est.detected:
                    self._update_offset(name, anchor, est, anchor_est)
        kps = []
        for name in style.joint_names:
            est = estimates.get(name)
            if est is None:
                kps.append(Keypoint(name, 0.0, 0.0, 0.0))
            else:
                kps.append(Keypoint(name, est.x, est.y, est.confidence))
        return PersonPose(person_index, tuple(kps))

    def prime(self, spec: WalkerSpec, fps: float) -> None:
        """Seed anchor offsets from a walker's skeleton geometry, standing
        in for the anatomy prior a body-aware detector carries."""
        leg = spec.ankle_height_px - spec.hip_height_px
        torso = TORSO_RATIO * leg
        knee_drop = KNEE_DROP_RATIO * leg
        split = ankle_y_split_px(spec, fps)
        ksplit = knee_y_split_px(spec, fps)
        self._offsets.update({
            (MIDHIP, NECK): (0.0, torso),
            (LKNEE, MIDHIP): (0.0, knee_drop - ksplit),
            (RKNEE, MIDHIP): (0.0, knee_drop + ksplit),
            (LANKLE, LKNEE): (0.0, leg - knee_drop - split + ksplit),
            (RANKLE, RKNEE): (0.0, leg - knee_drop + split - ksplit),
            (LANKLE, MIDHIP): (0.0, leg - split),
            (RANKLE, MIDHIP): (0.0, leg + split),
        })


def extract_markers(frame: Frame, style: MarkerStyle | None = None,
                    extractor: MarkerExtractor | None = None) -> PersonPose:
    """One-shot marker extraction; pass a MarkerExtractor to keep running
    offsets across the frames of a sequence."""
    if extractor is None:
        extractor = MarkerExtractor(style)
    return extractor.process(frame)


def extract_sequence(
    frames: list[Frame],
    fps: float,
    subject_id: str,
    sequence_id: str,
    style: MarkerStyle | None = None,
    spec: WalkerSpec | None = None,
    regions: dict[int, RegionRecord] | None = None,
) -> KeypointSequence:
    """Run the marker extractor over a clip and assemble a sequence."""
    extractor = MarkerExtractor(style)
    if spec is not None:
        extractor.prime(spec, fps)
    kp_frames = []
    for i, frame in enumerate(sorted(frames, key=lambda fr: fr.frame_id)):
        box = None
        if regions is not None:
            rec = regions.get(frame.frame_id)
            if rec is not None and rec.boxes:
                box = rec.boxes[0]
        pose = extractor.process(frame, search_box=box)
        kp_frames.append(KeypointFrame(i, frame.timestamp_us / 1e6, (pose,)))
    return KeypointSequence(subject_id, sequence_id, fps, tuple(kp_frames))
