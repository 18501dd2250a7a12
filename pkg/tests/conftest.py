import numpy as np
import pytest

from gaitguard.gait_extract import Leg
from gaitguard.keypoint_io import (
    LANKLE,
    MIDHIP,
    RANKLE,
    Frame,
    Keypoint,
    KeypointFrame,
    KeypointSequence,
    PersonPose,
)
from gaitguard.synthlab import WalkerSpec, generate_walker


def make_sequence(midhip_x, lankle_x=None, rankle_x=None, fps=30.0,
                  subject="s0", sequence="seq0", lankle_y=200.0, rankle_y=210.0):
    """Sequence built from per-frame x coordinates (None = joint missing)."""
    n = len(midhip_x)
    lankle_x = lankle_x if lankle_x is not None else [None] * n
    rankle_x = rankle_x if rankle_x is not None else [None] * n
    frames = []
    for i in range(n):
        kps = []
        for name, x, y in ((MIDHIP, midhip_x[i], 100.0),
                           (LANKLE, lankle_x[i], lankle_y),
                           (RANKLE, rankle_x[i], rankle_y)):
            if x is None:
                kps.append(Keypoint(name, 0.0, 0.0, 0.0))
            else:
                kps.append(Keypoint(name, float(x), y, 1.0))
        frames.append(KeypointFrame(i, i / fps, (PersonPose(0, tuple(kps)),)))
    return KeypointSequence(subject, sequence, fps, tuple(frames))


def gray_frame(width=160, height=120, value=128, frame_id=0):
    pixels = np.full((height, width, 3), value, dtype=np.uint8)
    return Frame(frame_id, width, height, 0, pixels)


@pytest.fixture
def walker_spec():
    return WalkerSpec("alice", velocity_px_s=50.0, cadence_hz=1.0, amplitude_px=32.0,
                      hip_height_px=85.0, ankle_height_px=165.0, phase=0.3)


@pytest.fixture
def walker(walker_spec):
    return generate_walker(walker_spec, duration_s=4.0, fps=30.0, seed=7, start_x=60.0)


def subject_specs(n=10, cadence0=None, dcad=0.0, amp0=30.0, damp=2.0, noise=0.3):
    """Corpus of walkers separable by (cadence, step length).

    By default subjects are spaced uniformly in step time (three frame
    durations at 30 fps apart) so timing features stay separable despite
    event quantization; pass cadence0/dcad to control cadence directly.
    """
    specs = []
    for i in range(n):
        if cadence0 is None:
            cadence = 1.0 / (2.0 * (0.30 + 0.1 * i))
        else:
            cadence = cadence0 + dcad * i
        specs.append(WalkerSpec(
            f"subj{i:02d}",
            velocity_px_s=35.0 if i % 2 == 0 else -35.0,
            cadence_hz=cadence,
            amplitude_px=amp0 + damp * i,
            hip_height_px=85.0,
            ankle_height_px=165.0,
            phase=0.17 * i,
            noise_px=noise,
        ))
    return specs
