"""Nearest-neighbour codebook tools for diagnosing latent-space usage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motion.layout import FeatureLayout, LayoutError


def _sq_dists(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    # exact differences rather than the |a|^2 - 2ab + |b|^2 expansion so ties stay ties
    return np.sum((z[:, None, :] - codebook[None, :, :]) ** 2, axis=-1)


def quantize(z: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest entry per row of ``z``; ties go to the lowest index."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("codebook must be a non-empty (K, d) array")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z.reshape(-1, codebook.shape[1])
    idx = np.argmin(_sq_dists(z2, codebook), axis=1)  # argmin returns the first minimum
    if single:
        return idx[0], codebook[idx[0]]
    return idx.reshape(z.shape[:-1]), codebook[idx].reshape(z.shape)


def kmeans(data: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10) -> np.ndarray:
    """Lloyd iterations from a random data subset; empty clusters are reseeded."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] < k:
        raise ValueError(f"need at least {k} samples, got {data.shape[0]}")
    codebook = data[rng.choice(data.shape[0], size=k, replace=False)].copy()
    for _ in range(iters):
        idx, _ = quantize(data, codebook)
        for j in range(k):
            members = data[idx == j]
            codebook[j] = members.mean(axis=0) if len(members) else data[rng.integers(data.shape[0])]
    return codebook


def usage_histogram(latents: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(counts, frequencies) over codebook entries."""
    idx, _ = quantize(np.asarray(latents).reshape(-1, np.shape(codebook)[1]), codebook)
    counts = np.bincount(idx, minlength=len(codebook))
    if counts.sum() == 0:
        raise ValueError("no latents to histogram")
    return counts, counts / counts.sum()


def kl_vs_uniform(freq: np.ndarray) -> float:
    p = np.asarray(freq, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * len(p))))


def dump_histogram(counts: np.ndarray) -> str:
    total = counts.sum()
    return "".join(f"{i} {int(c)} {float(c / total)!r}\n" for i, c in enumerate(counts))


@dataclass
class VoronoiReport:
    checked: int
    violations: list[tuple[int, int, int]] = field(default_factory=list)  # (sample, assigned, closer)

    @property
    def ok(self) -> bool:
        return not self.violations


def voronoi_check(codebook: np.ndarray, samples: np.ndarray) -> VoronoiReport:
    """Check every assignment lies in its cell: |z - e_k| <= |z - e_j| for all j."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if len(codebook) < 2:
        raise ValueError("need at least two codes")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, codebook.shape[1])
    idx, _ = quantize(samples, codebook)
    d = _sq_dists(samples, codebook)
    own = d[np.arange(len(samples)), idx]
    report = VoronoiReport(len(samples))
    for i, j in zip(*np.nonzero(d < own[:, None])):
        report.violations.append((int(i), int(idx[i]), int(j)))
    return report


@dataclass(frozen=True)
class LossSplit:
    full: float
    essential: float
    redundant: float


def loss_decomposition(gt: np.ndarray, pred: np.ndarray, layout: FeatureLayout,
                       kind: str = "l2") -> LossSplit:
    """Column-separable loss split into the essential prefix and the rest.

    Losses are sums over frames and columns, so ``full == essential + redundant``.
    """
    gt, pred = np.asarray(gt, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if layout.essential_only:
        raise LayoutError("loss decomposition needs the full layout")
    if gt.shape != pred.shape or gt.shape[-1] != layout.width:
        raise LayoutError(f"shapes {gt.shape} / {pred.shape} do not match layout width {layout.width}")
    diff = pred - gt
    per_col = (np.abs(diff) if kind == "l1" else diff**2).reshape(-1, layout.width).sum(axis=0)
    e = layout.essential_width
    return LossSplit(float(per_col.sum()), float(per_col[:e].sum()), float(per_col[e:].sum()))
