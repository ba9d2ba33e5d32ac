"""1D convolutional residual autoencoder over essential motion features.

The encoder halves the time axis with stride-2 convs until the total factor
``r`` is reached; the decoder mirrors it with nearest upsampling followed by a
conv. Inputs are padded at the end by edge replication to a multiple of ``r``
and decoder output is trimmed back to the source length.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .motion import MotionSequence, recover_joints
from .motion.norm import NormStats, denormalize
from .numerics import (AdamW, Conv1d, Conv1dResBlock, Module, NonFiniteError, Tensor,
                       WarmupCosineLR, checkpoint, clip_grad_norm, l1, make_rng, mse, nearest_upsample_1d,
                       no_grad)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AeConfig:
    input_width: int
    latent_width: int = 16
    channels: int = 64
    resblocks: int = 1
    factor: int = 4

    def __post_init__(self):
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ValueError("downsample factor must be a power of 2")

    @property
    def stages(self) -> int:
        return int(math.log2(self.factor))


# named presets; "full" is the 512-channel configuration
AE_PRESETS = {
    "desk": dict(latent_width=16, channels=64, resblocks=1),
    "full": dict(latent_width=512, channels=512, resblocks=3),
}


@dataclass
class LatentSequence:
    latents: np.ndarray     # (n, d)
    source_length: int
    factor: int

    def __post_init__(self):
        if self.latents.shape[0] * self.factor < self.source_length:
            raise ValueError("latent length too short for the source length")


class AutoEncoder(Module):
    def __init__(self, config: AeConfig, rng: np.random.Generator):
        c = config
        self.config = config
        self.enc_in = Conv1d(c.input_width, c.channels, 3, rng)
        self.down = [Conv1d(c.channels, c.channels, 4, rng, stride=2) for _ in range(c.stages)]
        self.enc_res = [[Conv1dResBlock(c.channels, rng) for _ in range(c.resblocks)]
                        for _ in range(c.stages)]
        self.enc_out = Conv1d(c.channels, c.latent_width, 3, rng)
        self.dec_in = Conv1d(c.latent_width, c.channels, 3, rng)
        self.dec_res = [[Conv1dResBlock(c.channels, rng) for _ in range(c.resblocks)]
                        for _ in range(c.stages)]
        self.up = [Conv1d(c.channels, c.channels, 3, rng) for _ in range(c.stages)]
        self.dec_out = Conv1d(c.channels, c.input_width, 3, rng)
        # flatten nested lists so parameter discovery sees them
        self.enc_blocks = [b for stage in self.enc_res for b in stage]
        self.dec_blocks = [b for stage in self.dec_res for b in stage]
        del self.enc_res, self.dec_res
        self.bind_names()

    def _stage_blocks(self, blocks, i):
        k = self.config.resblocks
        return blocks[i * k:(i + 1) * k]

    def encode_tensor(self, x: Tensor) -> Tensor:
        h = self.enc_in(x)
        for i, down in enumerate(self.down):
            h = down(h.relu())
            for block in self._stage_blocks(self.enc_blocks, i):
                h = block(h)
        return self.enc_out(h.relu())

    def decode_tensor(self, z: Tensor) -> Tensor:
        h = self.dec_in(z)
        for i, up in enumerate(self.up):
            for block in self._stage_blocks(self.dec_blocks, i):
                h = block(h)
            h = up(nearest_upsample_1d(h, 2))
        return self.dec_out(h.relu())

    def forward(self, x: Tensor) -> Tensor:
        return self.decode_tensor(self.encode_tensor(x))


def pad_to_factor(frames: np.ndarray, factor: int) -> np.ndarray:
    n = frames.shape[-2]
    if n < factor:
        raise ValueError(f"sequence length {n} shorter than downsample factor {factor}")
    extra = -n % factor
    if not extra:
        return frames
    edge = np.repeat(frames[..., -1:, :], extra, axis=-2)
    return np.concatenate([frames, edge], axis=-2)


def encode(model: AutoEncoder, frames: np.ndarray) -> LatentSequence:
    """Encode one normalized essential sequence ``(N, D)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != model.config.input_width:
        raise ValueError(f"expected width {model.config.input_width}, got {frames.shape[-1]}")
    with no_grad():
        z = model.encode_tensor(Tensor(pad_to_factor(frames, model.config.factor)[None]))
    return LatentSequence(z.data[0], frames.shape[0], model.config.factor)


def decode(model: AutoEncoder, latent: LatentSequence | np.ndarray, length: int | None = None) -> np.ndarray:
    if isinstance(latent, LatentSequence):
        z, length = latent.latents, latent.source_length if length is None else length
    else:
        z = np.asarray(latent, dtype=np.float64)
        length = z.shape[0] * model.config.factor if length is None else length
    with no_grad():
        out = model.decode_tensor(Tensor(z[None])).data[0]
    return out[:length]


@dataclass
class AeTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    crop: int = 64
    lr: float = 2e-3
    warmup: int = 50
    weight_decay: float = 0.0
    clip: float = 1.0
    l2_warmup: float = 0.2      # leading fraction of steps trained with squared error
    time_budget: float | None = None   # seconds; stops early when exceeded
    log_every: int = 100


@dataclass
class AeHistory:
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    steps: int = 0


def _crop_batch(seqs: Sequence[np.ndarray], idx: np.ndarray, crop: int, factor: int,
                rng: np.random.Generator) -> np.ndarray:
    out = []
    for i in idx:
        s = seqs[i]
        if s.shape[0] >= crop:
            start = int(rng.integers(0, s.shape[0] - crop + 1))
            out.append(s[start:start + crop])
        else:
            pad = np.repeat(s[-1:], crop - s.shape[0], axis=0)
            out.append(np.concatenate([s, pad]))
    return np.stack(out)


def train_ae(sequences: Sequence[np.ndarray], config: AeConfig, train: AeTrainConfig,
             seed: int) -> tuple[AutoEncoder, AeHistory]:
    """Fit the AE with mean absolute error on random fixed-length crops.

    The first ``l2_warmup`` fraction of steps uses squared error instead: pure
    L1 from a random start settles on the per-column median and never picks
    up sparse channels such as the turn rate, which is zero for most clips.
    """
    if not sequences:
        raise ValueError("empty training set")
    if train.crop % config.factor:
        raise ValueError("crop length must be a multiple of the downsample factor")
    model = AutoEncoder(config, make_rng(seed, "ae", "init"))
    params = model.named_parameters()
    opt = AdamW(params, lr=train.lr, weight_decay=train.weight_decay)
    sched = WarmupCosineLR(train.lr, train.steps, warmup=train.warmup, floor=0.02)
    rng = make_rng(seed, "ae", "data")
    hist = AeHistory()
    t0 = time.perf_counter()
    for step in range(train.steps):
        idx = rng.integers(0, len(sequences), size=train.batch_size)
        x = Tensor(_crop_batch(sequences, idx, train.crop, config.factor, rng))
        model.zero_grad()
        out = model(x)
        loss = mse(out, x.data) if step < train.l2_warmup * train.steps else l1(out, x.data)
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"AE loss diverged at step {step}")
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        clip_grad_norm(grads, train.clip)
        opt.step(grads, lr=sched(step))
        hist.losses.append(float(loss.data))
        if train.log_every and step % train.log_every == 0:
            log.info("ae step %d loss %.5f", step, hist.losses[-1])
        if train.time_budget is not None and time.perf_counter() - t0 > train.time_budget:
            log.warning("ae training stopped at step %d by time budget", step)
            break
    hist.steps = len(hist.losses)
    hist.wall_time = time.perf_counter() - t0
    return model, hist


def mpjpe(joints_a: np.ndarray, joints_b: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(joints_a - joints_b, axis=-1)))


def recon_metrics(model: AutoEncoder, sequences: Sequence[MotionSequence], stats: NormStats,
                  zero_latents: bool = False) -> dict[str, float]:
    """Mean L1 (normalized space) and MPJPE (generator units) of reconstructions.

    ``sequences`` are normalized essential motions. With ``zero_latents`` the
    decoder sees all-zero latents, giving the noise-free baseline.
    """
    l1_sum, l1_count, err_sum, err_count = 0.0, 0, 0.0, 0
    for m in sequences:
        if zero_latents:
            n = -(-m.frames.shape[0] // model.config.factor)
            rec = decode(model, np.zeros((n, model.config.latent_width)), m.frames.shape[0])
        else:
            rec = decode(model, encode(model, m.frames))
        l1_sum += float(np.abs(rec - m.frames).sum())
        l1_count += rec.size
        ja = recover_joints(denormalize(m, stats))
        jb = recover_joints(denormalize(m.with_frames(rec), stats))
        err_sum += float(np.linalg.norm(ja - jb, axis=-1).sum())
        err_count += ja.shape[0] * ja.shape[1]
    return {"l1": l1_sum / l1_count, "mpjpe": err_sum / err_count}


def save_ae(path, model: AutoEncoder) -> None:
    blob = dict(model.state_dict())
    for k, v in asdict(model.config).items():
        blob[f"config.{k}"] = np.array(float(v))
    checkpoint.save(path, blob)


def load_ae(path) -> AutoEncoder:
    blob = checkpoint.load(path)
    cfg = {k[len("config."):]: int(v) for k, v in blob.items() if k.startswith("config.")}
    model = AutoEncoder(AeConfig(**cfg), make_rng(0, "ae", "load"))
    model.load_state_dict({k: v for k, v in blob.items() if not k.startswith("config.")})
    return model
