"""Joint recovery from the essential feature prefix.

Conventions: Y is up, frame 0 faces +Z with yaw 0 at the origin. The root
angular velocity of frame ``i`` is the yaw change from ``i`` to ``i+1`` and
the root XZ velocity of frame ``i`` is the displacement from ``i`` to
``i+1`` expressed in frame ``i``'s heading. Local joint positions are
relative to the root's ground projection, rotated into the heading frame,
with absolute height.
"""
from __future__ import annotations

import numpy as np

from .layout import LayoutError, MotionSequence


def yaw_matrix(theta: np.ndarray) -> np.ndarray:
    """Heading-to-world rotation about +Y for each angle, shape (..., 3, 3)."""
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def integrate_root(ang_vel: np.ndarray, lin_vel_xz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Yaw angles (N,) and root ground positions (N, 3) from per-frame velocities."""
    yaw = np.concatenate([[0.0], np.cumsum(ang_vel[:-1])])
    v = np.zeros((len(yaw), 3))
    v[:, 0], v[:, 2] = lin_vel_xz[:, 0], lin_vel_xz[:, 1]
    world = np.einsum("nij,nj->ni", yaw_matrix(yaw), v)
    pos = np.zeros_like(world)
    pos[1:] = np.cumsum(world[:-1], axis=0)
    return yaw, pos


def recover_joints(m: MotionSequence) -> np.ndarray:
    """Global joint positions (N, Nj, 3); joint 0 is the root."""
    layout = m.layout
    if m.frames.shape[1] < layout.essential_width:
        raise LayoutError("sequence lacks the essential prefix")
    nj = layout.joint_count
    f = m.frames
    yaw, root = integrate_root(f[:, 0], f[:, 1:3])
    local = f[:, 4:4 + 3 * (nj - 1)].reshape(len(f), nj - 1, 3)
    rot = yaw_matrix(yaw)
    joints = np.empty((len(f), nj, 3))
    joints[:, 0] = root
    joints[:, 0, 1] = f[:, 3]
    joints[:, 1:] = np.einsum("nij,nkj->nki", rot, local) + root[:, None, :]
    return joints


def derive_root_velocities(yaw: np.ndarray, root: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference inverse of ``integrate_root`` for frames 0..N-2."""
    ang = np.diff(yaw)
    disp = np.diff(root, axis=0)
    inv = np.swapaxes(yaw_matrix(yaw[:-1]), -1, -2)
    local = np.einsum("nij,nj->ni", inv, disp)
    return ang, local[:, [0, 2]]
