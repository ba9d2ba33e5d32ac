from __future__ import annotations

import numpy as np

from .layout import LayoutError, MotionSequence

TARGETS = ("essential", "redundant")
MODES = ("add_noise", "replace")


def perturb(m: MotionSequence, target: str, mode: str, sigma: float,
            rng: np.random.Generator) -> MotionSequence:
    """Corrupt the essential or redundant columns with Gaussian noise."""
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if m.layout.essential_only:
        raise LayoutError("perturbation needs the full layout")
    cols = m.layout.essential_columns() if target == "essential" else m.layout.redundant_columns()
    frames = m.frames.copy()
    noise = rng.normal(0.0, sigma, size=(len(frames), len(cols)))
    if mode == "add_noise":
        frames[:, cols] += noise
    else:
        frames[:, cols] = noise
    return m.with_frames(frames)
