"""Plain-text motion, caption, and manifest files.

Motion file::

    N D fps
    <D floats>   (N lines)

Latent files use the same body with an ``n d`` header.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .layout import FeatureLayout, LayoutError, MotionSequence


def _fmt_rows(arr: np.ndarray) -> str:
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in arr)


def write_motion(path: str | os.PathLike, m: MotionSequence) -> None:
    n, d = m.frames.shape
    with open(path, "w") as f:
        f.write(f"{n} {d} {m.fps!r}\n")
        f.write(_fmt_rows(m.frames))


def read_motion(path: str | os.PathLike, layout: FeatureLayout) -> MotionSequence:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3:
            raise LayoutError(f"{path}: bad motion header")
        n, d, fps = int(header[0]), int(header[1]), float(header[2])
        frames = np.loadtxt(f, ndmin=2) if n else np.zeros((0, d))
    if frames.shape != (n, d):
        raise LayoutError(f"{path}: expected {n}x{d} values, found {frames.shape}")
    if d == layout.essential_width and d != layout.width:
        layout = layout.essential()
    return MotionSequence(frames, layout, fps)


def write_latents(path: str | os.PathLike, latents: np.ndarray) -> None:
    n, d = latents.shape
    with open(path, "w") as f:
        f.write(f"{n} {d}\n")
        f.write(_fmt_rows(latents))


def read_latents(path: str | os.PathLike) -> np.ndarray:
    with open(path) as f:
        n, d = (int(v) for v in f.readline().split())
        arr = np.loadtxt(f, ndmin=2)
    if arr.shape != (n, d):
        raise ValueError(f"{path}: expected {n}x{d} latent values, found {arr.shape}")
    return arr


def write_caption(path: str | os.PathLike, tokens: list[str]) -> None:
    Path(path).write_text(" ".join(tokens) + "\n")


def read_caption(path: str | os.PathLike) -> list[str]:
    return Path(path).read_text().split()


def write_manifest(path: str | os.PathLike, rows: list[tuple[str, str, str]]) -> None:
    with open(path, "w") as f:
        for motion, caption, split in rows:
            f.write(f"{motion} {caption} {split}\n")


def read_manifest(path: str | os.PathLike) -> list[tuple[str, str, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}: manifest lines need 'motion caption split'")
        rows.append((parts[0], parts[1], parts[2]))
    return rows
