"""Region-targeted noise mitigation of video frames.

Two masking approaches: KPM perturbs square patches around the midhip and
ankle keypoints; LBM perturbs the lower half of the person's bounding box.
Noise comes from one of four distributions, is weighted vertically by a
Hanning window to soften its visual impact, added per pixel per channel,
and clamped to [0, 255]. All randomness is seeded from (config seed,
frame id), so mitigation is a pure function of its inputs.

Note on the exponential distribution: its parameter is treated as the
scale (mean) so the lambda grid {50..200} yields visible noise; a rate
reading would make those values produce nearly none. Exponential noise is
applied as sampled (non-negative, brightening).
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .keypoint_io import GAIT_JOINTS, Frame

LAMBDA_GRID = (50.0, 100.0, 150.0, 200.0)


class Approach(enum.Enum):
    KPM = "kpm"
    LBM = "lbm"


class Distribution(enum.Enum):
    UNIFORM = "uniform"
    NORMAL = "normal"
    LAPLACE = "laplace"
    EXPONENTIAL = "exp"

    @classmethod
    def parse(cls, token: str) -> "Distribution":
        token = token.strip().lower()
        if token == "exponential":
            token = "exp"
        try:
            return cls(token)
        except ValueError:
            raise ConfigError(f"unknown noise distribution {token!r}") from None


class MitigationWarning(UserWarning):
    """Raised (as a warning) when a mitigation call degrades to a no-op."""


@dataclass(frozen=True)
class NoiseConfig:
    approach: Approach = Approach.LBM
    distribution: Distribution = Distribution.LAPLACE
    lam: float = 150.0
    kpm_patch_px: int = 48
    seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if self.approach is Approach.KPM and self.kpm_patch_px < 1:
            raise ConfigError(f"kpm_patch_px must be >= 1, got {self.kpm_patch_px}")


# Named presets for the two configurations reported as best; the default
# preset is the Laplace/150 lower-body one.
PRESETS = {
    "lbm-laplace-150": NoiseConfig(Approach.LBM, Distribution.LAPLACE, 150.0),
    "lbm-exp-100": NoiseConfig(Approach.LBM, Distribution.EXPONENTIAL, 100.0),
}
DEFAULT_PRESET = "lbm-laplace-150"


@dataclass(frozen=True)
class PersonRegion:
    """Axis-aligned full-body box in pixel coordinates."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValidationError(f"region {self} must have w,h >= 1")

    def clipped(self, width: int, height: int) -> "PersonRegion | None":
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x0 >= x1 or y0 >= y1:
            return None
        return PersonRegion(x0, y0, x1 - x0, y1 - y0)


def lower_half(box: PersonRegion) -> PersonRegion:
    """Bottom half of a full-body box; a height-1 box maps to its own
    bottom row."""
    top = box.h - box.h // 2  # ceil(h/2)
    new_h = box.h // 2
    if new_h < 1:
        return PersonRegion(box.x, box.y + box.h - 1, box.w, 1)
    return PersonRegion(box.x, box.y + top, box.w, new_h)


def hanning_window(n: int) -> np.ndarray:
    if n < 1:
        raise ValidationError(f"window length must be >= 1, got {n}")
    return np.hanning(n)


def sample_noise(distribution: Distribution, lam: float, n: int, seed: int) -> np.ndarray:
    """n i.i.d. samples: Uniform on [-lam, lam], Normal(0, lam), Laplace
    scale lam, or Exponential with mean lam."""
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")
    if lam <= 0:
        raise ConfigError(f"lambda must be > 0, got {lam}")
    rng = _rng(seed)
    return _draw(rng, distribution, lam, (n,))


def _rng(*seed_parts: int) -> np.random.Generator:
    return np.random.default_rng([p & 0xFFFFFFFFFFFFFFFF for p in seed_parts])


def _draw(rng, distribution, lam, shape):
    if distribution is Distribution.UNIFORM:
        return rng.uniform(-lam, lam, shape)
    if distribution is Distribution.NORMAL:
        return rng.normal(0.0, lam, shape)
    if distribution is Distribution.LAPLACE:
        return rng.laplace(0.0, lam, shape)
    if distribution is Distribution.EXPONENTIAL:
        return rng.exponential(lam, shape)
    raise ConfigError(f"unknown noise distribution {distribution!r}")


def _noise_region(pixels, region, cfg, rng, weights=None, mask=None):
    """Add windowed noise over one clipped region, in place.

    The Hanning window runs along rows only (the approach is sized by
    region height); columns are unweighted. weights overrides the
    region's own window with a precomputed per-pixel weight map. mask
    marks pixels already noised by an earlier region: they are sampled
    over but not modified, so overlapping regions receive noise once.
    """
    r = region
    noise = _draw(rng, cfg.distribution, cfg.lam, (r.h, r.w, 3))
    if weights is None:
        noise *= hanning_window(r.h)[:, None, None]
    else:
        noise *= weights[r.y:r.y + r.h, r.x:r.x + r.w, None]
    block = pixels[r.y:r.y + r.h, r.x:r.x + r.w, :]
    mixed = np.clip(block.astype(np.float64) + noise, 0.0, 255.0)
    mixed = np.rint(mixed).astype(np.uint8)
    if mask is not None:
        sub = mask[r.y:r.y + r.h, r.x:r.x + r.w]
        block[~sub] = mixed[~sub]
        sub[:] = True
    else:
        block[:] = mixed


def apply_lbm(frame: Frame, region: PersonRegion, cfg: NoiseConfig) -> Frame:
    """Noise the lower half of the person box; pixels outside it are
    bit-identical to the input."""
    if cfg.approach is not Approach.LBM:
        raise ConfigError(f"apply_lbm called with approach {cfg.approach}")
    out = frame.copy()
    if not cfg.enabled:
        return out
    target = lower_half(region).clipped(frame.width, frame.height)
    if target is None:
        warnings.warn(
            f"frame {frame.frame_id}: region {region} lies outside the frame; "
            "mitigation skipped", MitigationWarning, stacklevel=2)
        return out
    rng = _rng(cfg.seed, frame.frame_id)
    _noise_region(out.pixels, target, cfg, rng)
    return out


def apply_kpm(frame: Frame, keypoints: dict[str, tuple[float, float]],
              cfg: NoiseConfig) -> Frame:
    """Noise square patches centered on the midhip and ankle keypoints.

    Patches are processed in a fixed joint order and a pixel covered by
    several patches is noised exactly once; where patches overlap, the
    window weight is the maximum over the covering patches, so each
    keypoint keeps its intended masking strength.
    """
    if cfg.approach is not Approach.KPM:
        raise ConfigError(f"apply_kpm called with approach {cfg.approach}")
    out = frame.copy()
    if not cfg.enabled:
        return out
    present = [name for name in GAIT_JOINTS if keypoints.get(name) is not None]
    if not present:
        warnings.warn(
            f"frame {frame.frame_id}: no keypoints available; mitigation skipped",
            MitigationWarning, stacklevel=2)
        return out
    patches = []
    for name in GAIT_JOINTS:
        pt = keypoints.get(name)
        if pt is None:
            continue
        cx, cy = int(round(pt[0])), int(round(pt[1]))
        half = cfg.kpm_patch_px // 2
        patch = PersonRegion(cx - half, cy - half, cfg.kpm_patch_px, cfg.kpm_patch_px)
        clipped = patch.clipped(frame.width, frame.height)
        if clipped is not None:
            patches.append(clipped)
    if not patches:
        warnings.warn(
            f"frame {frame.frame_id}: all keypoint patches lie outside the frame; "
            "mitigation skipped", MitigationWarning, stacklevel=2)
        return out
    weights = np.zeros((frame.height, frame.width))
    for r in patches:
        window = hanning_window(r.h)[:, None]
        sub = weights[r.y:r.y + r.h, r.x:r.x + r.w]
        np.maximum(sub, window, out=sub)
    rng = _rng(cfg.seed, frame.frame_id)
    mask = np.zeros((frame.height, frame.width), dtype=bool)
    for r in patches:
        _noise_region(out.pixels, r, cfg, rng, weights=weights, mask=mask)
    return out


def mitigate_frame(frame: Frame, cfg: NoiseConfig,
                   region: PersonRegion | None = None,
                   keypoints: dict[str, tuple[float, float]] | None = None) -> Frame:
    """Dispatch to the configured approach; missing region data degrades
    to a warned no-op."""
    if not cfg.enabled:
        return frame.copy()
    if cfg.approach is Approach.LBM:
        if region is None:
            warnings.warn(f"frame {frame.frame_id}: no person region; mitigation skipped",
                          MitigationWarning, stacklevel=2)
            return frame.copy()
        return apply_lbm(frame, region, cfg)
    if keypoints is None:
        warnings.warn(f"frame {frame.frame_id}: no keypoints; mitigation skipped",
                      MitigationWarning, stacklevel=2)
        return frame.copy()
    return apply_kpm(frame, keypoints, cfg)


def snr_db(original: Frame, mitigated: Frame, region: PersonRegion) -> float:
    """Signal-to-noise ratio over the region, all channels, in decibels.

    Returns +inf when the frames are identical over the region.
    """
    if (original.width, original.height) != (mitigated.width, mitigated.height):
        raise ShapeError(
            f"frame dimensions differ: {original.width}x{original.height} vs "
            f"{mitigated.width}x{mitigated.height}")
    clipped = region.clipped(original.width, original.height)
    if clipped is None:
        raise ValidationError(f"region {region} lies outside the frame")
    r = clipped
    sig = original.pixels[r.y:r.y + r.h, r.x:r.x + r.w, :].astype(np.float64)
    noise = mitigated.pixels[r.y:r.y + r.h, r.x:r.x + r.w, :].astype(np.float64) - sig
    noise_power = float(np.sum(noise * noise))
    if noise_power == 0.0:
        return math.inf
    signal_power = float(np.sum(sig * sig))
    return 10.0 * math.log10(signal_power / noise_power)


# --- region files ------------------------------------------------------------

@dataclass
class RegionRecord:
    """Per-frame person data: full-body boxes and (optionally) the three
    gait keypoints."""

    frame_id: int
    boxes: list[PersonRegion] = field(default_factory=list)
    keypoints: dict[str, tuple[float, float]] | None = None

    def to_json(self) -> str:
        obj = {
            "frame_id": self.frame_id,
            "boxes": [{"x": b.x, "y": b.y, "w": b.w, "h": b.h} for b in self.boxes],
        }
        if self.keypoints is not None:
            obj["keypoints"] = {
                name: [pt[0], pt[1]] for name, pt in sorted(self.keypoints.items())
            }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RegionRecord":
        obj = json.loads(text)
        boxes = [PersonRegion(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"]))
                 for b in obj.get("boxes", [])]
        kps = None
        if "keypoints" in obj and obj["keypoints"] is not None:
            kps = {str(name): (float(pt[0]), float(pt[1]))
                   for name, pt in obj["keypoints"].items()}
        return cls(int(obj["frame_id"]), boxes, kps)


class RegionProvider:
    """Per-frame region lookup backed by a JSONL file (or given records).

    Stands in for an embedded person detector: boxes and keypoints are
    precomputed by whatever produced the frames.
    """

    def __init__(self, records: dict[int, RegionRecord]):
        self._records = records

    @classmethod
    def from_file(cls, path) -> "RegionProvider":
        records = {}
        with Path(path).open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = RegionRecord.from_json(line)
                records[rec.frame_id] = rec
        return cls(records)

    def get(self, frame_id: int) -> RegionRecord | None:
        return self._records.get(frame_id)

    def box(self, frame_id: int) -> PersonRegion | None:
        rec = self._records.get(frame_id)
        return rec.boxes[0] if rec and rec.boxes else None

    def keypoints(self, frame_id: int) -> dict[str, tuple[float, float]] | None:
        rec = self._records.get(frame_id)
        return rec.keypoints if rec else None


def write_region_file(records: list[RegionRecord], path) -> None:
    Path(path).write_text("".join(rec.to_json() + "\n" for rec in records))
