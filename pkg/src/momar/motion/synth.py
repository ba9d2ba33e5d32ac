"""Parametric toy-skeleton motions with captions.

Stands in for a real text-motion corpus. Each class is a small trajectory
program (root yaw rate, heading-frame velocity, pelvis height, limb offsets);
the redundant groups are derived from the resulting joint tracks so they are
consistent with the essential prefix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics.rng import make_rng
from .kinematics import yaw_matrix
from .layout import FeatureLayout, MotionSequence, extract_essential

BASE_JOINTS = ("l_foot", "r_foot", "head", "r_hand", "l_hand", "chest")
STAND_HEIGHT = 0.9

SUBJECTS = ("a person", "someone", "the person", "a figure")

CLASSES: dict[str, tuple[str, ...]] = {
    "walk_forward": ("{s} walks forward{m}", "{s} walks straight ahead{m}"),
    "walk_backward": ("{s} walks backward{m}", "{s} steps backwards{m}"),
    "run": ("{s} runs forward{m}", "{s} jogs ahead{m}"),
    "turn_left": ("{s} turns left{m}", "{s} turns around to the left{m}"),
    "turn_right": ("{s} turns right{m}", "{s} turns around to the right{m}"),
    "sidestep_left": ("{s} sidesteps to the left{m}", "{s} shuffles left{m}"),
    "jump": ("{s} jumps up", "{s} jumps in place"),
    "raise_right_arm": ("{s} raises the right arm", "{s} lifts the right hand up"),
    "raise_left_arm": ("{s} raises the left arm", "{s} lifts the left hand up"),
    "wave": ("{s} waves with the right hand", "{s} waves hello"),
    "squat": ("{s} squats down and stands up", "{s} crouches then rises"),
}

LOCOMOTION = {"walk_forward", "walk_backward", "run", "turn_left", "turn_right", "sidestep_left"}
MODIFIERS = {"": 1.0, " slowly": 0.6, " quickly": 1.5}


@dataclass
class SynthConfig:
    count: int = 2000
    joint_count: int = 5
    velocity_width: int | None = None
    length_range: tuple[int, int] = (40, 100)
    fps: float = 20.0
    classes: tuple[str, ...] = tuple(CLASSES)

    def __post_init__(self):
        lo, hi = self.length_range
        if lo < 2 or hi < lo:
            raise ValueError(f"invalid length range {self.length_range}")
        if self.joint_count < len(BASE_JOINTS) - 1:
            raise ValueError(f"synthetic skeleton needs at least {len(BASE_JOINTS) - 1} joints")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}")

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(self.joint_count, self.velocity_width)


@dataclass
class SynthSample:
    motion: MotionSequence
    caption: list[str]
    label: str
    joints: np.ndarray = field(repr=False)

    @property
    def essential(self) -> MotionSequence:
        return extract_essential(self.motion)


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _program(label: str, n: int, fps: float, mod: float, rng: np.random.Generator):
    t = np.arange(n) / fps
    u = np.arange(n) / max(n - 1, 1)
    yaw_rate = np.zeros(n)
    vel = np.zeros((n, 2))
    h = np.full(n, STAND_HEIGHT + rng.normal(0, 0.01))
    feet_z = np.zeros((n, 2))
    feet_x = np.zeros((n, 2))
    lift = np.zeros((n, 2))
    hand = np.zeros((n, 2, 3))  # offsets for r_hand, l_hand
    phase = rng.uniform(0, 2 * np.pi)

    def gait(freq, stride, height):
        ph = 2 * np.pi * freq * t + phase
        feet_z[:, 0] = stride * np.sin(ph)
        feet_z[:, 1] = -stride * np.sin(ph)
        lift[:, 0] = height * np.maximum(0.0, np.cos(ph))
        lift[:, 1] = height * np.maximum(0.0, -np.cos(ph))
        hand[:, 0, 2] = 0.6 * stride * np.sin(ph)
        hand[:, 1, 2] = -0.6 * stride * np.sin(ph)
        return ph

    if label in ("walk_forward", "walk_backward"):
        speed = rng.uniform(1.0, 1.4) * mod
        ph = gait(0.9 * speed / 1.2 + 0.6, 0.22, 0.08)
        vel[:, 1] = (speed if label == "walk_forward" else -0.7 * speed) / fps
        h += 0.02 * np.cos(2 * ph)
    elif label == "run":
        speed = rng.uniform(2.5, 3.2) * mod
        ph = gait(1.6 + 0.1 * speed, 0.35, 0.18)
        vel[:, 1] = speed / fps
        h += -0.05 + 0.05 * np.cos(2 * ph)
        hand[:, :, 1] += 0.15
    elif label in ("turn_left", "turn_right"):
        angle = rng.uniform(0.5, 1.0) * np.pi * min(mod, 1.3)
        yaw_rate[:] = (angle if label == "turn_left" else -angle) / n
        gait(1.0 * mod, 0.05, 0.06)
    elif label == "sidestep_left":
        speed = rng.uniform(0.5, 0.8) * mod
        ph = 2 * np.pi * 1.0 * mod * t + phase
        vel[:, 0] = speed / fps
        feet_x[:, 0] = 0.08 * np.sin(ph)
        feet_x[:, 1] = -0.08 * np.sin(ph)
        lift[:, 0] = 0.06 * np.maximum(0.0, np.cos(ph))
        lift[:, 1] = 0.06 * np.maximum(0.0, -np.cos(ph))
    elif label == "jump":
        start, dur = rng.uniform(0.25, 0.4), rng.uniform(0.25, 0.35)
        w = np.clip((u - start) / dur, 0.0, 1.0)
        bump = np.sin(np.pi * w) * ((u >= start) & (u <= start + dur))
        height = rng.uniform(0.25, 0.45)
        h += height * bump
        lift[:, :] = (height * bump)[:, None]
        hand[:, :, 1] += 0.5 * bump[:, None]
    elif label in ("raise_right_arm", "raise_left_arm", "wave"):
        k = 1 if label == "raise_left_arm" else 0
        ramp = _smoothstep((u - rng.uniform(0.05, 0.2)) / rng.uniform(0.2, 0.4))
        hand[:, k, 1] += rng.uniform(0.7, 0.9) * ramp
        hand[:, k, 0] += (0.1 if k else -0.1) * ramp
        if label == "wave":
            hand[:, 0, 0] += 0.15 * ramp * np.sin(2 * np.pi * rng.uniform(1.5, 2.5) * t + phase)
    elif label == "squat":
        depth = rng.uniform(0.25, 0.4)
        h -= depth * 0.5 * (1 - np.cos(2 * np.pi * u))
        hand[:, :, 2] += 0.3 * 0.5 * (1 - np.cos(2 * np.pi * u))[:, None]
    else:  # pragma: no cover - guarded by SynthConfig
        raise ValueError(label)
    return yaw_rate, vel, h, feet_x, feet_z, lift, hand


def _local_joints(nj: int, h, feet_x, feet_z, lift, hand) -> np.ndarray:
    n = len(h)
    base = np.zeros((n, len(BASE_JOINTS), 3))
    base[:, 0] = np.stack([0.1 + feet_x[:, 0], 0.03 + lift[:, 0], feet_z[:, 0]], -1)
    base[:, 1] = np.stack([-0.1 + feet_x[:, 1], 0.03 + lift[:, 1], feet_z[:, 1]], -1)
    base[:, 2] = np.stack([np.zeros(n), h + 0.7, np.zeros(n)], -1)
    base[:, 3] = np.stack([-0.3 + hand[:, 0, 0], h + 0.1 + hand[:, 0, 1], hand[:, 0, 2]], -1)
    base[:, 4] = np.stack([0.3 + hand[:, 1, 0], h + 0.1 + hand[:, 1, 1], hand[:, 1, 2]], -1)
    base[:, 5] = np.stack([np.zeros(n), h + 0.4, np.zeros(n)], -1)
    pelvis = np.stack([np.zeros(n), h, np.zeros(n)], -1)
    out = np.zeros((n, nj - 1, 3))
    for j in range(nj - 1):
        if j < len(BASE_JOINTS):
            out[:, j] = base[:, j]
        else:
            frac = 0.5 if (j // len(BASE_JOINTS)) % 2 else 0.25
            out[:, j] = pelvis + frac * (base[:, j % len(BASE_JOINTS)] - pelvis)
    return out


def _rest_offsets(nj: int) -> np.ndarray:
    zeros = np.zeros((1, 2))
    local = _local_joints(nj, np.array([STAND_HEIGHT]), zeros, zeros, zeros, np.zeros((1, 2, 3)))[0]
    return local - np.array([0.0, STAND_HEIGHT, 0.0])


def _rot6d_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """First two columns of the minimal rotation taking direction a to b."""
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    v = np.cross(a, b)
    c = np.sum(a * b, axis=-1)
    k = np.zeros(v.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -v[..., 2], v[..., 1]
    k[..., 1, 0], k[..., 1, 2] = v[..., 2], -v[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -v[..., 1], v[..., 0]
    eye = np.broadcast_to(np.eye(3), k.shape)
    r = eye + k + (k @ k) / (1.0 + c)[..., None, None]
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def _simulate_root(yaw_rate: np.ndarray, vel: np.ndarray):
    n = len(yaw_rate)
    yaw = np.zeros(n)
    root = np.zeros((n, 3))
    for i in range(1, n):
        th = yaw[i - 1]
        dx, dz = vel[i - 1]
        root[i, 0] = root[i - 1, 0] + np.cos(th) * dx + np.sin(th) * dz
        root[i, 2] = root[i - 1, 2] - np.sin(th) * dx + np.cos(th) * dz
        yaw[i] = th + yaw_rate[i - 1]
    return yaw, root


def redundant_features(layout: FeatureLayout, yaw: np.ndarray, joints: np.ndarray,
                       local: np.ndarray, h: np.ndarray, fps: float) -> np.ndarray:
    n, nj, _ = joints.shape
    # joint velocities: next-frame displacement in the current heading frame
    disp = np.zeros_like(joints)
    if n > 1:
        disp[:-1] = joints[1:] - joints[:-1]
        disp[-1] = disp[-2]
    inv = np.swapaxes(yaw_matrix(yaw), -1, -2)
    vel = np.einsum("nij,nkj->nki", inv, disp)
    nvel = layout.vel_width // 3
    if nvel not in (nj, nj - 1):
        raise ValueError("velocity width must cover all joints or all non-root joints")
    vel = vel[:, nj - nvel:].reshape(n, -1)
    rest = _rest_offsets(nj)
    cur = local - np.stack([np.zeros(n), h, np.zeros(n)], -1)[:, None, :]
    rot = _rot6d_between(np.broadcast_to(rest, cur.shape), cur).reshape(n, -1)
    speed = np.linalg.norm(disp[:, 1:3][..., [0, 2]], axis=-1) * fps
    height = joints[:, 1:3, 1]
    heel = (height < 0.06) & (speed < 0.4)
    toe = (height < 0.07) & (speed < 0.5)
    contacts = np.stack([heel[:, 0], toe[:, 0], heel[:, 1], toe[:, 1]], -1).astype(np.float64)
    return np.concatenate([vel, rot, contacts], axis=1)


def synth_sample(label: str, config: SynthConfig, rng: np.random.Generator) -> SynthSample:
    lo, hi = config.length_range
    n = int(rng.integers(lo, hi + 1))
    mod_word = rng.choice(list(MODIFIERS)) if label in LOCOMOTION else ""
    mod = MODIFIERS[mod_word]
    yaw_rate, vel, h, feet_x, feet_z, lift, hand = _program(label, n, config.fps, mod, rng)
    nj = config.joint_count
    local = _local_joints(nj, h, feet_x, feet_z, lift, hand)
    yaw, root = _simulate_root(yaw_rate, vel)
    joints = np.zeros((n, nj, 3))
    joints[:, 0] = root
    joints[:, 0, 1] = h
    for i in range(n):
        c, s = np.cos(yaw[i]), np.sin(yaw[i])
        x, y, z = local[i, :, 0], local[i, :, 1], local[i, :, 2]
        joints[i, 1:, 0] = root[i, 0] + c * x + s * z
        joints[i, 1:, 1] = y
        joints[i, 1:, 2] = root[i, 2] - s * x + c * z
    ess = np.concatenate([yaw_rate[:, None], vel, h[:, None], local.reshape(n, -1)], axis=1)
    layout = config.layout
    red = redundant_features(layout, yaw, joints, local, h, config.fps)
    frames = np.concatenate([ess, red], axis=1)
    template = CLASSES[label][int(rng.integers(len(CLASSES[label])))]
    subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
    caption = template.format(s=subject, m=mod_word).split()
    motion = MotionSequence(frames, layout, config.fps, {"label": label})
    return SynthSample(motion, caption, label, joints)


def synth_dataset(config: SynthConfig, seed: int) -> list[SynthSample]:
    out = []
    for i in range(config.count):
        rng = make_rng(seed, "synth", i)
        label = config.classes[i % len(config.classes)]
        out.append(synth_sample(label, config, rng))
    return out


def vocabulary_words() -> list[str]:
    words = set()
    for templates in CLASSES.values():
        for tpl in templates:
            for s in SUBJECTS:
                for m in MODIFIERS:
                    words.update(tpl.format(s=s, m=m).split())
    return sorted(words)
