from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ESSENTIAL_GROUPS = ("root_angular_vel", "root_linear_vel_xz", "root_height", "joint_positions")
REDUNDANT_GROUPS = ("joint_velocities", "joint_rotations", "foot_contacts")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of a pose-feature frame.

    ``velocity_width`` defaults to ``3 * joint_count`` so that 22 joints give
    the familiar 263 columns. ``essential_only`` drops the three redundant
    groups.
    """

    joint_count: int
    velocity_width: int | None = None
    essential_only: bool = False

    def __post_init__(self):
        if self.joint_count < 2:
            raise LayoutError("need at least two joints")
        if self.velocity_width is not None and self.velocity_width % 3:
            raise LayoutError("velocity width must be a multiple of 3")

    @property
    def vel_width(self) -> int:
        return 3 * self.joint_count if self.velocity_width is None else self.velocity_width

    @property
    def groups(self) -> list[tuple[str, int]]:
        nj = self.joint_count
        out = [("root_angular_vel", 1), ("root_linear_vel_xz", 2), ("root_height", 1),
               ("joint_positions", 3 * (nj - 1))]
        if not self.essential_only:
            out += [("joint_velocities", self.vel_width), ("joint_rotations", 6 * (nj - 1)),
                    ("foot_contacts", 4)]
        return out

    @property
    def width(self) -> int:
        return sum(w for _, w in self.groups)

    @property
    def essential_width(self) -> int:
        return 3 * self.joint_count + 1

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, w in self.groups:
            out[name] = slice(start, start + w)
            start += w
        return out

    def group_index(self) -> np.ndarray:
        """Group number of every column."""
        return np.concatenate([np.full(w, i) for i, (_, w) in enumerate(self.groups)])

    def essential(self) -> "FeatureLayout":
        return FeatureLayout(self.joint_count, self.velocity_width, essential_only=True)

    def redundant_columns(self) -> np.ndarray:
        if self.essential_only:
            return np.zeros(0, dtype=int)
        return np.arange(self.essential_width, self.width)

    def essential_columns(self) -> np.ndarray:
        return np.arange(self.essential_width)


@dataclass
class MotionSequence:
    frames: np.ndarray
    layout: FeatureLayout
    fps: float = 20.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise LayoutError(f"frames must be (N>=1, D), got {self.frames.shape}")
        if self.frames.shape[1] != self.layout.width:
            raise LayoutError(
                f"frame width {self.frames.shape[1]} does not match layout width {self.layout.width}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray, layout: FeatureLayout | None = None) -> "MotionSequence":
        return MotionSequence(frames, layout or self.layout, self.fps, dict(self.meta))


def extract_essential(m: MotionSequence) -> MotionSequence:
    ew = m.layout.essential_width
    if m.frames.shape[1] < ew:
        raise LayoutError(f"width {m.frames.shape[1]} smaller than essential width {ew}")
    return MotionSequence(m.frames[:, :ew].copy(), m.layout.essential(), m.fps, dict(m.meta))


def concat_features(essential: MotionSequence, redundant: np.ndarray,
                    layout: FeatureLayout) -> MotionSequence:
    """Inverse of ``extract_essential`` given the dropped columns."""
    if not essential.layout.essential_only:
        raise LayoutError("expected an essential-layout sequence")
    frames = np.concatenate([essential.frames, np.asarray(redundant, dtype=np.float64)], axis=1)
    return MotionSequence(frames, layout, essential.fps, dict(essential.meta))
