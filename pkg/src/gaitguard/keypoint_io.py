"""Keypoint/frame data model and the on-disk formats consumed by every
other module.

Keypoint sequences live in JSON-Lines files: one header object
(subject_id, sequence_id, fps) followed by one object per frame. Frame
rasters are PNG (RGB8) or raw ``.rgb`` buffers with a ``{"width","height"}``
JSON sidecar. Image origin is top-left, y downward; a keypoint with
confidence 0 is "missing" and its coordinates are ignored.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateCalibrationError, ParseError, ValidationError

MIDHIP = "MidHip"
LANKLE = "LAnkle"
RANKLE = "RAnkle"
GAIT_JOINTS = (MIDHIP, LANKLE, RANKLE)


@dataclass(frozen=True)
class Keypoint:
    """One labeled 2D joint observation in pixel coordinates."""

    name: str
    x: float
    y: float
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(
                f"keypoint {self.name}: confidence {self.confidence} outside [0, 1]"
            )
        if self.confidence > 0.0 and not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"keypoint {self.name}: non-finite coordinates")

    @property
    def missing(self) -> bool:
        return self.confidence == 0.0


@dataclass(frozen=True)
class PersonPose:
    """All keypoints observed for one person in one frame."""

    person_index: int
    keypoints: tuple[Keypoint, ...]

    def __post_init__(self):
        names = [k.name for k in self.keypoints]
        if len(names) != len(set(names)):
            raise ValidationError(
                f"person {self.person_index}: duplicate joint labels in {names}"
            )

    def get(self, name: str) -> Keypoint | None:
        for k in self.keypoints:
            if k.name == name:
                return k
        return None


@dataclass(frozen=True)
class KeypointFrame:
    frame_index: int
    timestamp_s: float
    poses: tuple[PersonPose, ...]

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValidationError(f"frame_index {self.frame_index} < 0")

    def pose(self, person_index: int = 0) -> PersonPose | None:
        for p in self.poses:
            if p.person_index == person_index:
                return p
        return None


@dataclass(frozen=True)
class KeypointSequence:
    """Time-ordered keypoint observations for one walking sequence."""

    subject_id: str
    sequence_id: str
    fps: float
    frames: tuple[KeypointFrame, ...]

    def __post_init__(self):
        if self.fps <= 0:
            raise ValidationError(f"fps must be > 0, got {self.fps}")
        indices = [f.frame_index for f in self.frames]
        if len(indices) != len(set(indices)):
            dup = next(i for i in indices if indices.count(i) > 1)
            raise ValidationError(f"duplicate frame_index {dup}")

    @property
    def frame_duration_s(self) -> float:
        return 1.0 / self.fps


@dataclass(frozen=True)
class MarkerCalibration:
    """Two reference markers at a known real-world distance, used to turn
    pixel separations into meters."""

    marker_a_x: float
    marker_b_x: float
    real_distance_m: float

    def __post_init__(self):
        if self.real_distance_m <= 0:
            raise ValidationError(f"real_distance_m must be > 0, got {self.real_distance_m}")
        if self.marker_a_x == self.marker_b_x:
            raise DegenerateCalibrationError("markers at the same x position")


def meters_per_pixel(cal: MarkerCalibration) -> float:
    """Scale factor from pixels to meters; symmetric in marker order."""
    px = abs(cal.marker_a_x - cal.marker_b_x)
    if px == 0:
        raise DegenerateCalibrationError("zero pixel distance between markers")
    return cal.real_distance_m / px


@dataclass
class Frame:
    """An RGB8 raster. ``pixels`` has shape (height, width, 3), dtype uint8."""

    frame_id: int
    width: int
    height: int
    timestamp_us: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.size != self.width * self.height * 3:
            raise ValidationError(
                f"frame {self.frame_id}: buffer length {self.pixels.size} != "
                f"{self.width}x{self.height}x3"
            )
        self.pixels = self.pixels.reshape(self.height, self.width, 3)

    @classmethod
    def from_bytes(cls, frame_id, width, height, timestamp_us, buf: bytes) -> "Frame":
        arr = np.frombuffer(buf, dtype=np.uint8).copy()
        return cls(frame_id, width, height, timestamp_us, arr)

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()

    def copy(self) -> "Frame":
        return Frame(self.frame_id, self.width, self.height, self.timestamp_us,
                     self.pixels.copy())


# --- keypoint sequence JSONL ---------------------------------------------

def _keypoint_to_dict(k: Keypoint) -> dict:
    return {"name": k.name, "x": k.x, "y": k.y, "confidence": k.confidence}


def _frame_to_dict(f: KeypointFrame) -> dict:
    return {
        "frame_index": f.frame_index,
        "timestamp_s": f.timestamp_s,
        "poses": [
            {
                "person_index": p.person_index,
                "keypoints": [_keypoint_to_dict(k) for k in p.keypoints],
            }
            for p in f.poses
        ],
    }


def write_keypoint_sequence(seq: KeypointSequence, path) -> None:
    """Write the canonical JSONL form (stable key order, compact separators).

    write(read(x)) is byte-identical to x for files produced here.
    """
    path = Path(path)
    lines = [json.dumps(
        {"subject_id": seq.subject_id, "sequence_id": seq.sequence_id, "fps": seq.fps},
        separators=(",", ":"),
    )]
    for f in sorted(seq.frames, key=lambda fr: fr.frame_index):
        lines.append(json.dumps(_frame_to_dict(f), separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n")


def read_keypoint_sequence(path) -> KeypointSequence:
    """Read and fully validate a keypoint sequence file.

    Raises ParseError with the line number for malformed JSON, and
    ValidationError for a missing fps header or duplicate frame_index.
    """
    path = Path(path)
    frames = []
    header = None
    seen = set()
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            if header is None:
                if "fps" not in obj:
                    raise ValidationError(f"{path}: header missing fps")
                header = obj
                continue
            try:
                idx = int(obj["frame_index"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError("frame record missing frame_index", line=lineno) from exc
            if idx in seen:
                raise ValidationError(f"{path}: duplicate frame_index {idx} (line {lineno})")
            seen.add(idx)
            poses = []
            for p in obj.get("poses", []):
                kps = tuple(
                    Keypoint(str(k["name"]), float(k["x"]), float(k["y"]),
                             float(k["confidence"]))
                    for k in p.get("keypoints", [])
                )
                poses.append(PersonPose(int(p.get("person_index", 0)), kps))
            frames.append(KeypointFrame(idx, float(obj.get("timestamp_s", 0.0)),
                                        tuple(poses)))
    if header is None:
        raise ValidationError(f"{path}: empty file (no header)")
    frames.sort(key=lambda f: f.frame_index)
    return KeypointSequence(
        subject_id=str(header.get("subject_id", "")),
        sequence_id=str(header.get("sequence_id", "")),
        fps=float(header["fps"]),
        frames=tuple(frames),
    )


# --- frame rasters ---------------------------------------------------------

_TRAILING_INT = re.compile(r"(\d+)$")


def frame_id_from_name(path, default: int = 0) -> int:
    """Trailing digits of the file stem, e.g. frame_00042.png -> 42."""
    m = _TRAILING_INT.search(Path(path).stem)
    return int(m.group(1)) if m else default


def read_frame(path, frame_id: int | None = None, timestamp_us: int = 0) -> Frame:
    """Load a PNG or raw .rgb (with JSON sidecar) raster."""
    path = Path(path)
    if frame_id is None:
        frame_id = frame_id_from_name(path)
    if path.suffix.lower() == ".rgb":
        sidecar = path.with_suffix(".json")
        meta = json.loads(sidecar.read_text())
        w, h = int(meta["width"]), int(meta["height"])
        return Frame.from_bytes(frame_id, w, h, timestamp_us, path.read_bytes())
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.uint8)
    h, w = arr.shape[:2]
    return Frame(frame_id, w, h, timestamp_us, arr)


def write_frame(frame: Frame, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".rgb":
        path.write_bytes(frame.to_bytes())
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps({"width": frame.width, "height": frame.height},
                                      separators=(",", ":")) + "\n")
        return
    Image.fromarray(frame.pixels, mode="RGB").save(path, format="PNG")


def list_frame_files(directory) -> list[Path]:
    """Frame files in a directory, ordered by embedded frame id then name."""
    directory = Path(directory)
    files = [p for p in directory.iterdir()
             if p.suffix.lower() in (".png", ".rgb")]
    return sorted(files, key=lambda p: (frame_id_from_name(p), p.name))
