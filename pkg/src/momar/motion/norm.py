"""Per-dimension z-normalization and the group-averaged SD variant.

With group averaging each column is divided by ``gamma * sigma'`` where
``sigma'`` is the mean SD of its feature group; normalized columns then have
SD ``1 / phi'`` with ``phi' = gamma * sigma' / sigma``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .layout import FeatureLayout, LayoutError, MotionSequence

log = logging.getLogger(__name__)

SD_FLOOR = 1e-8


@dataclass
class NormStats:
    layout: FeatureLayout
    mean: np.ndarray
    sd_raw: np.ndarray
    sd_group: np.ndarray
    gamma: np.ndarray
    ratio: np.ndarray
    group_average: bool
    warnings: list[str] = field(default_factory=list)

    @property
    def divisor(self) -> np.ndarray:
        base = self.sd_group if self.group_average else self.sd_raw
        return self.gamma * base

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "sd_raw": self.sd_raw, "sd_group": self.sd_group,
                "gamma": self.gamma, "ratio": self.ratio,
                "group_average": np.array(float(self.group_average))}

    @classmethod
    def from_arrays(cls, layout: FeatureLayout, arrays: Mapping[str, np.ndarray]) -> "NormStats":
        return cls(layout, arrays["mean"], arrays["sd_raw"], arrays["sd_group"], arrays["gamma"],
                   arrays["ratio"], bool(arrays["group_average"]))


def _gamma_vector(layout: FeatureLayout, gamma) -> np.ndarray:
    if gamma is None:
        return np.ones(layout.width)
    if isinstance(gamma, Mapping):
        vec = np.ones(layout.width)
        sl = layout.slices()
        for name, value in gamma.items():
            if name not in sl:
                raise LayoutError(f"unknown feature group {name!r}")
            vec[sl[name]] = value
        return vec
    g = np.asarray(gamma, dtype=np.float64)
    if g.ndim == 0:
        return np.full(layout.width, float(g))
    if g.shape == (len(layout.groups),):
        return g[layout.group_index()]
    if g.shape == (layout.width,):
        return g.copy()
    raise LayoutError(f"gamma shape {g.shape} fits neither groups nor columns")


def compute_norm_stats(dataset: Iterable[MotionSequence] | np.ndarray, layout: FeatureLayout | None = None,
                       gamma=None, use_group_average: bool = False) -> NormStats:
    if isinstance(dataset, np.ndarray):
        if layout is None:
            raise LayoutError("layout required for raw arrays")
        frames = dataset.reshape(-1, dataset.shape[-1])
    else:
        seqs = list(dataset)
        if not seqs:
            raise ValueError("empty dataset")
        layout = layout or seqs[0].layout
        for s in seqs:
            if s.layout != layout:
                raise LayoutError("mixed layouts in dataset")
        frames = np.concatenate([s.frames for s in seqs], axis=0)
    if frames.shape[1] != layout.width:
        raise LayoutError("frame width does not match layout")
    if frames.shape[0] < 2:
        raise ValueError("need at least two frames")
    mean = frames.mean(axis=0)
    sd = frames.std(axis=0)
    warns: list[str] = []
    low = sd < SD_FLOOR
    if low.any():
        cols = np.flatnonzero(low).tolist()
        warns.append(f"zero-variance columns floored to {SD_FLOOR}: {cols}")
        log.warning(warns[-1])
        sd = np.where(low, SD_FLOOR, sd)
    gi = layout.group_index()
    group_mean = np.array([sd[gi == g].mean() for g in range(len(layout.groups))])
    sd_group = group_mean[gi] if use_group_average else sd.copy()
    gvec = _gamma_vector(layout, gamma)
    ratio = gvec * sd_group / sd
    return NormStats(layout, mean, sd, sd_group, gvec, ratio, use_group_average, warns)


def normalize(m: MotionSequence, stats: NormStats) -> MotionSequence:
    if m.layout != stats.layout:
        raise LayoutError("sequence layout differs from the statistics layout")
    return m.with_frames((m.frames - stats.mean) / stats.divisor)


def denormalize(m: MotionSequence, stats: NormStats) -> MotionSequence:
    if m.layout != stats.layout:
        raise LayoutError("sequence layout differs from the statistics layout")
    return m.with_frames(m.frames * stats.divisor + stats.mean)


def restrict(stats: NormStats, layout: FeatureLayout) -> NormStats:
    """Statistics for the leading columns of ``stats`` (e.g. the essential prefix)."""
    w = layout.width
    if w > stats.layout.width:
        raise LayoutError("target layout wider than statistics")
    return NormStats(layout, stats.mean[:w], stats.sd_raw[:w], stats.sd_group[:w],
                     stats.gamma[:w], stats.ratio[:w], stats.group_average, list(stats.warnings))
