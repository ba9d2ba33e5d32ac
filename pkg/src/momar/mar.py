"""Masked autoregressive generator over AE latents with a per-latent diffusion head.

One AdaLN transformer layer reads the partially masked latent sequence (masked
slots hold a learnable mask vector) plus a prepended text token and emits a
condition ``z`` per masked slot. A small MLP denoises each masked latent
independently given ``(x_t, t, z)``, either predicting noise on a DDPM table
(``ddpm-eps``) or velocity on the linear path (``linear-velocity``).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import interpolants as ip
from .numerics import (AdaLNTransformerLayer, AdamW, EmaState, Embedding, LayerNorm, Linear, Module,
                       NonFiniteError, Parameter, Tensor, WarmupStepLR, adaln_modulate, checkpoint,
                       clip_grad_norm, concat, ema_update, make_rng, mse, no_grad,
                       sinusoidal_positions, timestep_embedding)
from .text import Vocab

log = logging.getLogger(__name__)

BACKENDS = ("ddpm-eps", "linear-velocity")
T_TRAIN = 1000
MASK_EPS = 1e-9


# ------------------------------------------------------------ masking schedule

def mask_ratio(tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return 0.0 if tau == 1.0 else math.cos(math.pi * tau / 2)


def mask_count(n: int, tau: float, training: bool = False) -> int:
    """ceil(ratio * n); the small epsilon keeps exact products from rounding up."""
    if n <= 0:
        raise ValueError("sequence length must be positive")
    count = min(n, math.ceil(mask_ratio(tau) * n - MASK_EPS))
    return max(count, 1) if training else max(count, 0)


@dataclass
class MaskState:
    mask: np.ndarray          # (n,) bool, True = masked
    order: np.ndarray         # pseudo-order permutation of positions
    k: int = 0
    K: int = 1

    @property
    def n(self) -> int:
        return len(self.mask)


def sample_mask(n: int, tau: float, rng: np.random.Generator) -> MaskState:
    """Training mask: a uniformly random subset of ``mask_count`` positions."""
    order = rng.permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[order[:mask_count(n, tau, training=True)]] = True
    return MaskState(mask, order)


def unmask_schedule(n: int, K: int) -> np.ndarray:
    """Latents revealed at each of the ``min(K, n)`` sampling iterations.

    The number still masked after iteration k follows the cosine rule,
    forced down by at least one per iteration so every iteration generates
    something and the counts sum to ``n``.
    """
    if n <= 0:
        raise ValueError("sequence length must be positive")
    K = max(1, min(int(K), n))
    remaining = [n]
    for k in range(1, K + 1):
        target = max(K - k, mask_count(n, k / K))
        remaining.append(min(remaining[-1] - 1, target))
    return -np.diff(np.array(remaining))


# ------------------------------------------------------------------- config

@dataclass(frozen=True)
class GenConfig:
    latent_width: int = 16
    vocab_size: int = 64
    width: int = 64
    heads: int = 4
    mlp_width: int = 128
    mlp_depth: int = 3
    backend: str = "linear-velocity"
    ar_iters: int = 10
    cfg_scale: float = 4.5
    text_drop: float = 0.1
    diffusion_mul: int = 4
    schedule: str = "cosine"
    sample_steps: int = 50      # ancestral steps (respaced)
    ode_steps: int = 25
    max_len: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("transformer width must be divisible by heads")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")


PRESETS: dict[str, dict] = {
    "desk": dict(width=64, heads=4, mlp_width=128, mlp_depth=3),
    "S": dict(width=384, heads=6, mlp_width=1024, mlp_depth=3),
    "M": dict(width=384, heads=6, mlp_width=1280, mlp_depth=8),
    "L": dict(width=384, heads=6, mlp_width=1536, mlp_depth=12),
    "XL": dict(width=1024, heads=16, mlp_width=1792, mlp_depth=16),
}


def preset(name: str, **overrides) -> GenConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GenConfig(**{**PRESETS[name], **overrides})


# ------------------------------------------------------------------- model

class TextEncoder(Module):
    """Bag-of-words embedding pooled into a single condition vector."""

    def __init__(self, vocab_size: int, width: int, rng):
        self.tok = Embedding(vocab_size, width, rng)
        self.proj = Linear(width, width, rng)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        w = mask[..., None] / mask.sum(axis=1)[:, None, None]
        pooled = (self.tok(ids) * w).sum(axis=1)
        return self.proj(pooled).silu()


class DiffusionBlock(Module):
    def __init__(self, width: int, rng):
        self.norm = LayerNorm(width, affine=False)
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)
        self.modulation = Linear(width, 3 * width, rng, zero=True)
        self.width = width

    def forward(self, h: Tensor, cond_act: Tensor) -> Tensor:
        w = self.width
        mod = self.modulation(cond_act)
        shift, scale, gate = mod[:, :w], mod[:, w:2 * w], mod[:, 2 * w:]
        y = self.fc2(self.fc1(adaln_modulate(self.norm(h), shift, scale)).silu())
        return h + gate * y


class DiffusionMLP(Module):
    """Per-latent denoiser conditioned on time and the transformer output z."""

    def __init__(self, latent_width: int, z_width: int, width: int, depth: int, rng):
        self.x_in = Linear(latent_width, width, rng)
        self.t_in = Linear(width, width, rng)
        self.t_hidden = Linear(width, width, rng)
        self.z_in = Linear(z_width, width, rng)
        self.blocks = [DiffusionBlock(width, rng) for _ in range(depth)]
        self.out_norm = LayerNorm(width, affine=False)
        self.out_mod = Linear(width, 2 * width, rng, zero=True)
        self.out = Linear(width, latent_width, rng, zero=True)
        self.width = width

    def forward(self, x_t: Tensor, t: np.ndarray, z: Tensor) -> Tensor:
        temb = self.t_hidden(self.t_in(Tensor(timestep_embedding(np.asarray(t) * T_TRAIN, self.width))).silu())
        cond = (temb + self.z_in(z)).silu()
        h = self.x_in(x_t)
        for block in self.blocks:
            h = block(h, cond)
        mod = self.out_mod(cond)
        h = adaln_modulate(self.out_norm(h), mod[:, :self.width], mod[:, self.width:])
        return self.out(h)


class MaskedGenerator(Module):
    def __init__(self, config: GenConfig, rng: np.random.Generator):
        c = config
        self.config = config
        self.text = TextEncoder(c.vocab_size, c.width, rng)
        self.x_in = Linear(c.latent_width, c.width, rng)
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size=(c.width,)))
        self.layer = AdaLNTransformerLayer(c.width, c.heads, c.width, rng)
        self.z_norm = LayerNorm(c.width)
        self.head = DiffusionMLP(c.latent_width, c.width, c.mlp_width, c.mlp_depth, rng)
        self.bind_names()

    def condition(self, ids: np.ndarray, tmask: np.ndarray) -> Tensor:
        return self.text(ids, tmask)

    def ar_condition(self, latents: np.ndarray, mask: np.ndarray, valid: np.ndarray, cond: Tensor,
                     positions: np.ndarray | None = None) -> Tensor:
        """Transformer states for every slot, shape (B, L, width).

        ``mask`` marks slots replaced by the mask vector and ``valid`` marks
        non-padding slots. ``positions`` overrides the slot index fed to the
        positional encoding.
        """
        B, L, _ = latents.shape
        if L == 0:
            raise ValueError("empty latent sequence")
        c = self.config
        h = self.x_in(Tensor(latents))
        m = mask[..., None].astype(np.float64)
        h = h * (1.0 - m) + self.mask_token * m
        if positions is None:
            positions = np.broadcast_to(np.arange(L), (B, L))
        pe = sinusoidal_positions(int(positions.max()) + 1, c.width)[positions]
        h = h + pe
        h = concat([cond.reshape(B, 1, c.width), h], axis=1)
        keys = np.concatenate([np.ones((B, 1), bool), valid], axis=1)
        out = self.layer(h, cond, keys)
        return self.z_norm(out[:, 1:, :])

    def predict(self, x_t: Tensor, t: np.ndarray, z: Tensor) -> Tensor:
        return self.head(x_t, t, z)


# ----------------------------------------------------------------- training

@dataclass
class LatentStats:
    mean: np.ndarray
    sd: np.ndarray

    def scale(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.sd

    def unscale(self, z: np.ndarray) -> np.ndarray:
        return z * self.sd + self.mean


def latent_stats(latents: Sequence[np.ndarray]) -> LatentStats:
    cat = np.concatenate(latents)
    return LatentStats(cat.mean(axis=0), np.maximum(cat.std(axis=0), 1e-8))


def _pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    L = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), L, seqs[0].shape[1]))
    valid = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        valid[i, :len(s)] = True
    return out, valid


class DiffusionTargets:
    """Noising and regression targets for one backend."""

    def __init__(self, config: GenConfig):
        self.backend = config.backend
        self.train_table = ip.build_schedule(config.schedule, T_TRAIN)

    def draw(self, x0: np.ndarray, rng: np.random.Generator):
        n = x0.shape[0]
        eps = rng.standard_normal(x0.shape)
        if self.backend == "ddpm-eps":
            step = rng.integers(1, T_TRAIN + 1, size=n)
            ab = self.train_table.alpha_bar[step][:, None]
            return ip.forward_diffuse(x0, eps, ab), step / T_TRAIN, eps
        t = rng.uniform(0.0, 1.0, size=n)
        return ip.LINEAR(x0, eps, t[:, None]), t, ip.velocity_target(x0, eps)


def masked_loss(model: MaskedGenerator, latents: np.ndarray, valid: np.ndarray, mask: np.ndarray,
                ids: np.ndarray, tmask: np.ndarray, targets: DiffusionTargets,
                rng: np.random.Generator, override_targets: np.ndarray | None = None) -> Tensor:
    """Mean squared error of the head over masked, valid positions only."""
    sel = mask & valid
    if not sel.any():
        raise ValueError("no masked positions in batch")
    cond = model.condition(ids, tmask)
    z_all = model.ar_condition(latents, mask, valid, cond)
    mul = model.config.diffusion_mul
    b_idx, p_idx = (np.repeat(a, mul) for a in np.nonzero(sel))
    z = z_all[b_idx, p_idx]
    x0 = latents[b_idx, p_idx]
    x_t, t, target = targets.draw(x0, rng)
    if override_targets is not None:
        target = override_targets
    return mse(model.predict(Tensor(x_t), t, z), target)


@dataclass
class MarTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    ema_decay: float = 0.999
    clip: float = 1.0
    log_every: int = 200
    time_budget: float | None = None


@dataclass
class MarHistory:
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0


def train_mar(latents: Sequence[np.ndarray], captions: Sequence[Sequence[str]], vocab: Vocab,
              config: GenConfig, train: MarTrainConfig, seed: int):
    """Returns (ema model, raw model, history). Latents are already standardized."""
    if len(latents) != len(captions) or not latents:
        raise ValueError("need paired latents and captions")
    model = MaskedGenerator(config, make_rng(seed, "mar", "init"))
    params = model.named_parameters()
    opt = AdamW(params, lr=train.lr, weight_decay=train.weight_decay)
    sched = WarmupStepLR(train.lr, warmup=train.warmup, milestones=(int(train.steps * 0.7),), gamma=0.3)
    ema = EmaState.from_params(params, train.ema_decay)
    rng = make_rng(seed, "mar", "data")
    mask_rng = make_rng(seed, "mar", "mask")
    diff_rng = make_rng(seed, "mar", "diffusion")
    targets = DiffusionTargets(config)
    hist = MarHistory()
    t0 = time.perf_counter()
    for step in range(train.steps):
        idx = rng.integers(0, len(latents), size=train.batch_size)
        x, valid = _pad_batch([latents[i] for i in idx])
        caps = [captions[i] if rng.uniform() >= config.text_drop else ["<uncond>"] for i in idx]
        ids, tmask = vocab.batch(caps)
        mask = np.zeros(valid.shape, dtype=bool)
        for b, i in enumerate(idx):
            n = latents[i].shape[0]
            mask[b, :n] = sample_mask(n, float(mask_rng.uniform()), mask_rng).mask
        model.zero_grad()
        loss = masked_loss(model, x, valid, mask, ids, tmask, targets, diff_rng)
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"generator loss diverged at step {step}")
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        clip_grad_norm(grads, train.clip)
        opt.step(grads, lr=sched(step))
        ema_update(ema, params)
        hist.losses.append(float(loss.data))
        if train.log_every and step % train.log_every == 0:
            log.info("mar step %d loss %.5f", step, hist.losses[-1])
        if train.time_budget is not None and time.perf_counter() - t0 > train.time_budget:
            log.warning("generator training stopped at step %d by time budget", step)
            break
    hist.wall_time = time.perf_counter() - t0
    ema_model = MaskedGenerator(config, make_rng(seed, "mar", "init"))
    ema_model.load_state_dict(ema.shadow)
    return ema_model, model, hist


# ----------------------------------------------------------------- sampling

class _Denoiser:
    """Runs the per-latent sampler for a batch of conditions with optional CFG."""

    def __init__(self, model: MaskedGenerator, cfg_scale: float | None, steps: int | None = None):
        c = model.config
        self.model, self.cfg_scale, self.backend = model, cfg_scale, c.backend
        if c.backend == "ddpm-eps":
            self.table = ip.respace(ip.build_schedule(c.schedule, T_TRAIN), steps or c.sample_steps)
        self.ode_steps = steps or c.ode_steps

    def _pred(self, x: np.ndarray, t: float, z_c: np.ndarray, z_u: np.ndarray | None) -> np.ndarray:
        tt = np.full(len(x), t)
        if z_u is None or self.cfg_scale is None:
            return self.model.predict(Tensor(x), tt, Tensor(z_c)).data
        # two same-shape passes rather than one doubled batch: BLAS blocking
        # depends on batch size, and scale 0 must reproduce the unguided path bitwise
        cond = self.model.predict(Tensor(x), tt, Tensor(z_c)).data
        uncond = self.model.predict(Tensor(x), tt, Tensor(z_u)).data
        return ip.cfg_combine(cond, uncond, self.cfg_scale)

    def run(self, z_c: np.ndarray, z_u: np.ndarray | None, rng: np.random.Generator) -> np.ndarray:
        shape = (z_c.shape[0], self.model.config.latent_width)
        if self.backend == "ddpm-eps":
            return ip.ancestral_sample(lambda x, mt: self._pred(x, mt / T_TRAIN, z_c, z_u),
                                       shape, self.table, rng)
        return ip.ode_sample(lambda x, t: self._pred(x, t, z_c, z_u), shape, self.ode_steps, rng)


def _encode_captions(vocab: Vocab, captions: Sequence[Sequence[str] | None]):
    return vocab.batch([c if c else ["<uncond>"] for c in captions])


def generate(model: MaskedGenerator, vocab: Vocab, captions: Sequence[Sequence[str] | None],
             lengths: Sequence[int], rng: np.random.Generator, K: int | None = None,
             cfg_scale: float | None = "default", steps: int | None = None,
             source: Sequence[np.ndarray] | None = None,
             spans: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Iterative masked generation for a batch of captions.

    Each sequence starts fully masked (or, with ``source``/``spans``, masked
    only on its span). At each iteration the transformer conditions every
    masked slot, the next schedule-sized block in the sequence's random
    pseudo-order is denoised, and those slots become context.
    ``cfg_scale=None`` disables guidance; a caption of ``None`` is unconditional.
    """
    c = model.config
    K = c.ar_iters if K is None else K
    scale = c.cfg_scale if cfg_scale == "default" else cfg_scale
    B = len(captions)
    lengths = [int(n) for n in lengths]
    L = max(lengths)
    x = np.zeros((B, L, c.latent_width))
    valid = np.zeros((B, L), dtype=bool)
    mask = np.zeros((B, L), dtype=bool)
    plans = []
    for b, n in enumerate(lengths):
        valid[b, :n] = True
        if source is not None:
            x[b, :n] = source[b]
            todo = np.flatnonzero(spans[b])
        else:
            todo = np.arange(n)
        order = todo[rng.permutation(len(todo))]
        mask[b, order] = True
        counts = unmask_schedule(len(order), K) if len(order) else np.zeros(0, int)
        plans.append((order, np.concatenate([[0], np.cumsum(counts)])))
    iters = max((len(p[1]) - 1 for p in plans), default=0)
    ids, tmask = _encode_captions(vocab, captions)
    uids, utmask = _encode_captions(vocab, [None] * B)
    den = _Denoiser(model, scale, steps)
    with no_grad():
        cond = model.condition(ids, tmask)
        ucond = model.condition(uids, utmask) if scale is not None else None
        for k in range(iters):
            picks = []
            for b, (order, bounds) in enumerate(plans):
                if k < len(bounds) - 1:
                    picks.extend((b, p) for p in order[bounds[k]:bounds[k + 1]])
            if not picks:
                continue
            bi, pi = np.array(picks).T
            z_c = model.ar_condition(x, mask, valid, cond).data[bi, pi]
            z_u = model.ar_condition(x, mask, valid, ucond).data[bi, pi] if ucond is not None else None
            x[bi, pi] = den.run(z_c, z_u, rng)
            mask[bi, pi] = False
    return [x[b, :n].copy() for b, n in enumerate(lengths)]


def temporal_edit(model: MaskedGenerator, vocab: Vocab, source: np.ndarray, span: np.ndarray,
                  caption: Sequence[str] | None, rng: np.random.Generator, **kwargs) -> np.ndarray:
    """Regenerate the latents where ``span`` is True; all others are copied through."""
    span = np.asarray(span, dtype=bool)
    if span.shape != (source.shape[0],):
        raise ValueError("span must be a boolean vector over latent positions")
    if not span.any():
        return source.copy()
    out = generate(model, vocab, [caption], [source.shape[0]], rng, source=[source], spans=[span],
                   **kwargs)[0]
    out[~span] = source[~span]
    return out


def span_mask(n: int, start: int, stop: int) -> np.ndarray:
    if not 0 <= start <= stop <= n:
        raise ValueError(f"span [{start}, {stop}) outside sequence of length {n}")
    m = np.zeros(n, dtype=bool)
    m[start:stop] = True
    return m


# --------------------------------------------------------------- checkpoint

_STR_FIELDS = {"backend": BACKENDS, "schedule": ("linear", "cosine")}


def save_mar(path, model: MaskedGenerator, stats: LatentStats | None = None) -> None:
    blob = dict(model.state_dict())
    for k, v in asdict(model.config).items():
        if k in _STR_FIELDS:
            v = _STR_FIELDS[k].index(v)
        blob[f"config.{k}"] = np.array(float(v))
    if stats is not None:
        blob["latent.mean"], blob["latent.sd"] = stats.mean, stats.sd
    checkpoint.save(path, blob)


def load_mar(path) -> tuple[MaskedGenerator, LatentStats | None]:
    blob = checkpoint.load(path)
    cfg = {}
    for k, v in blob.items():
        if k.startswith("config."):
            name = k[len("config."):]
            if name in _STR_FIELDS:
                cfg[name] = _STR_FIELDS[name][int(v)]
            elif name in ("cfg_scale", "text_drop"):
                cfg[name] = float(v)
            else:
                cfg[name] = int(v)
    model = MaskedGenerator(GenConfig(**cfg), make_rng(0, "mar", "load"))
    model.load_state_dict({k: v for k, v in blob.items() if not k.startswith(("config.", "latent."))})
    stats = LatentStats(blob["latent.mean"], blob["latent.sd"]) if "latent.mean" in blob else None
    return model, stats
