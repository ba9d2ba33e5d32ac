"""Dataset storage and the stage functions chained by the command line."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autoencoder as ae_mod
from . import evaluators as ev_mod
from . import mar as mar_mod
from . import vq
from .motion import (FeatureLayout, MotionSequence, NormStats, SynthConfig, compute_norm_stats,
                     denormalize, extract_essential, normalize, synth_dataset, vocabulary_words)
from .numerics import checkpoint, make_rng
from .text import Vocab

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass
class DataConfig:
    count: int = 2000
    joint_count: int = 5
    min_length: int = 40
    max_length: int = 100
    fps: float = 20.0
    test_fraction: float = 0.1


@dataclass
class Dataset:
    layout: FeatureLayout
    motions: list[MotionSequence]          # raw full-layout features
    captions: list[list[str]]
    splits: list[str]
    fps: float = 20.0
    _norm: dict = field(default_factory=dict, repr=False)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def vocab(self) -> Vocab:
        return Vocab(vocabulary_words() + [w for c in self.captions for w in c])

    def stats(self, dims: str = "essential") -> NormStats:
        """Per-column statistics of the training split."""
        if dims not in self._norm:
            train = [self.motions[i] for i in self.indices("train")]
            if dims == "essential":
                train = [extract_essential(m) for m in train]
            self._norm[dims] = compute_norm_stats(train)
        return self._norm[dims]

    def normalized(self, split: str, dims: str = "essential") -> list[MotionSequence]:
        stats = self.stats(dims)
        out = []
        for i in self.indices(split):
            m = self.motions[i]
            out.append(normalize(extract_essential(m) if dims == "essential" else m, stats))
        return out

    def split_captions(self, split: str) -> list[list[str]]:
        return [self.captions[i] for i in self.indices(split)]


def prepare_data(config: DataConfig, seed: int) -> Dataset:
    synth = SynthConfig(count=config.count, joint_count=config.joint_count,
                        length_range=(config.min_length, config.max_length), fps=config.fps)
    samples = synth_dataset(synth, seed)
    n_test = max(1, int(round(config.test_fraction * len(samples))))
    order = make_rng(seed, "data", "split").permutation(len(samples))
    test = set(order[:n_test].tolist())
    splits = ["test" if i in test else "train" for i in range(len(samples))]
    return Dataset(synth.layout, [s.motion for s in samples], [s.caption for s in samples], splits,
                   config.fps)


def save_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lengths = np.array([len(m) for m in ds.motions], dtype=np.float64)
    checkpoint.save(path / "motions.ckpt", {
        "frames": np.concatenate([m.frames for m in ds.motions]),
        "lengths": lengths,
        "layout.joint_count": np.array(float(ds.layout.joint_count)),
        "layout.velocity_width": np.array(float(ds.layout.vel_width)),
        "fps": np.array(ds.fps),
    })
    with open(path / "captions.txt", "w") as f:
        for split, cap in zip(ds.splits, ds.captions):
            f.write(f"{split}\t{' '.join(cap)}\n")


def load_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    for name in ("motions.ckpt", "captions.txt"):
        if not (path / name).exists():
            raise FileNotFoundError(path / name)
    blob = checkpoint.load(path / "motions.ckpt")
    layout = FeatureLayout(int(blob["layout.joint_count"]), int(blob["layout.velocity_width"]))
    fps = float(blob["fps"])
    bounds = np.concatenate([[0], np.cumsum(blob["lengths"].astype(int))])
    motions = [MotionSequence(blob["frames"][a:b], layout, fps) for a, b in zip(bounds[:-1], bounds[1:])]
    splits, captions = [], []
    for line in (path / "captions.txt").read_text().splitlines():
        split, _, text = line.partition("\t")
        if split not in SPLITS:
            raise ValueError(f"{path / 'captions.txt'}: unknown split {split!r}")
        splits.append(split)
        captions.append(text.split())
    if len(captions) != len(motions):
        raise ValueError(f"{path}: {len(motions)} motions but {len(captions)} captions")
    return Dataset(layout, motions, captions, splits, fps)


# ------------------------------------------------------------------ stages

def fit_autoencoder(ds: Dataset, config: ae_mod.AeConfig | None, train: ae_mod.AeTrainConfig,
                    seed: int, dims: str = "essential"):
    seqs = ds.normalized("train", dims)
    config = config or ae_mod.AeConfig(seqs[0].frames.shape[1])
    return ae_mod.train_ae([m.frames for m in seqs], config, train, seed)


def ae_report(model: ae_mod.AutoEncoder, ds: Dataset) -> dict:
    test = ds.normalized("test")
    rec = ae_mod.recon_metrics(model, test, ds.stats())
    base = ae_mod.recon_metrics(model, test, ds.stats(), zero_latents=True)
    return {"l1": rec["l1"], "mpjpe": rec["mpjpe"], "baseline_l1": base["l1"],
            "baseline_mpjpe": base["mpjpe"]}


def encode_split(model: ae_mod.AutoEncoder, ds: Dataset, split: str) -> list[np.ndarray]:
    return [ae_mod.encode(model, m.frames).latents for m in ds.normalized(split)]


def fit_generator(ds: Dataset, ae: ae_mod.AutoEncoder, config: mar_mod.GenConfig,
                  train: mar_mod.MarTrainConfig, seed: int):
    """Returns (ema model, latent stats, history)."""
    latents = encode_split(ae, ds, "train")
    stats = mar_mod.latent_stats(latents)
    vocab = ds.vocab()
    if config.vocab_size != len(vocab):
        raise ValueError(f"generator vocab size {config.vocab_size} != dataset vocab {len(vocab)}")
    ema, _, hist = mar_mod.train_mar([stats.scale(z) for z in latents], ds.split_captions("train"),
                                     vocab, config, train, seed)
    return ema, stats, hist


def fit_evaluator(ds: Dataset, config: ev_mod.EvalConfig | None, train: ev_mod.EvalTrainConfig,
                  seed: int, dims: str = "essential", kind: str = "transformer"):
    seqs = ds.normalized("train", dims)
    vocab = ds.vocab()
    config = config or ev_mod.EvalConfig(seqs[0].frames.shape[1], len(vocab), kind=kind)
    return ev_mod.train_evaluator([m.frames for m in seqs], ds.split_captions("train"), vocab,
                                  config, train, seed, tag=f"eval-{dims}-{config.kind}")


def sample_motions(model: mar_mod.MaskedGenerator, stats: mar_mod.LatentStats,
                   ae: ae_mod.AutoEncoder, vocab: Vocab, captions: Sequence[Sequence[str] | None],
                   frame_lengths: Sequence[int], rng: np.random.Generator, **kwargs) -> list[np.ndarray]:
    """Generate normalized essential frames for each (caption, length)."""
    r = ae.config.factor
    lat_lengths = [-(-n // r) for n in frame_lengths]
    latents = mar_mod.generate(model, vocab, captions, lat_lengths, rng, **kwargs)
    return [ae_mod.decode(ae, stats.unscale(z), n) for z, n in zip(latents, frame_lengths)]


def noise_motions(lengths: Sequence[int], width: int, seed: int) -> list[np.ndarray]:
    """Gaussian noise in normalized units: the reference for the FID ratio."""
    rng = make_rng(seed, "eval", "noise")
    return [rng.standard_normal((n, width)) for n in lengths]


def codebook_usage(latents: Sequence[np.ndarray], k: int, seed: int) -> dict:
    flat = np.concatenate(latents)
    codebook = vq.kmeans(flat, k, make_rng(seed, "vq", "kmeans"))
    counts, freq = vq.usage_histogram(flat, codebook)
    return {"k": k, "kl_vs_uniform": vq.kl_vs_uniform(freq), "counts": counts.tolist(),
            "voronoi_ok": vq.voronoi_check(codebook, flat).ok}


def essential_frames_to_motion(frames: np.ndarray, ds: Dataset) -> MotionSequence:
    """Denormalize generated essential frames back to raw feature units."""
    stats = ds.stats()
    return denormalize(MotionSequence(frames, stats.layout, ds.fps), stats)
