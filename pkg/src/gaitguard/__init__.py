"""Gait-privacy toolkit.

Extracts identifying gait features from 2D pose-keypoint sequences,
classifies subjects with a gradient-boosted tree model, mitigates the leak
by injecting windowed noise into person regions of video frames, evaluates
the privacy-utility trade-off, and serves mitigation over a binary frame
stream.
"""

__version__ = "0.1.0"
