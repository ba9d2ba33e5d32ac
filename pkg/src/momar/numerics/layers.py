"""Neural layers on top of the tape.

All layers are channels-last: sequences are ``(batch, length, width)``.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    _path: str = ""

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for prefix, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    key = prefix + name
                    if key in out:
                        raise ValueError(f"duplicate parameter name {key}")
                    out[key] = value
        return out

    def bind_names(self) -> "Module":
        for prefix, mod in self.named_modules():
            mod._path = prefix.rstrip(".") or type(mod).__name__
        return self

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, v in state.items():
            if k not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {k}")
                continue
            if params[k].shape != tuple(np.shape(v)):
                raise ShapeError(f"{k}: checkpoint shape {np.shape(v)} != {params[k].shape}")
            params[k].data = np.array(v, dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def _where(self) -> str:
        return self._path or type(self).__name__

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        self.d_in, self.d_out = d_in, d_out
        w = np.zeros((d_out, d_in)) if zero else _uniform(rng, (d_out, d_in), 1.0 / math.sqrt(d_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self._where()}: expected last dim {self.d_in}, got {x.shape}")
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        self.dim, self.eps = dim, eps
        self.weight = Parameter(np.ones(dim)) if affine else None
        self.bias = Parameter(np.zeros(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"{self._where()}: expected last dim {self.dim}, got {x.shape}")
        y = T.layer_norm_op(x, self.eps)
        if self.weight is not None:
            y = y * self.weight + self.bias
        return y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.num, self.dim = num, dim
        self.weight = Parameter(rng.normal(0.0, std, size=(num, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num):
            raise ShapeError(f"{self._where()}: token id out of range [0, {self.num})")
        return T.embedding(self.weight, ids)


class MultiHeadAttention(Module):
    """Bidirectional self-attention.

    ``key_mask`` marks valid keys with True, shape (B, L).
    """

    NEG = -1e9

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"attention width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"{self._where()}: expected (B, L, {self.dim}), got {x.shape}")
        B, L, _ = x.shape
        h, dh = self.heads, self.dim // self.heads
        qkv = self.qkv(x).reshape(B, L, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, bool), 0.0, self.NEG)[:, None, None, :]
            scores = scores + bias
        att = scores.softmax(axis=-1)
        self.last_weights = att.data
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, self.dim)
        return self.proj(out)


def adaln_modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """x * (1 + scale) + shift, with shift/scale broadcast over positions."""
    return x * (scale + 1.0) + shift


class AdaLNTransformerLayer(Module):
    """Pre-norm transformer block whose norms are modulated by a condition.

    The condition is mapped to shift/scale/gate for both sublayers. The
    modulation projection starts at zero so the block begins as identity.
    """

    def __init__(self, dim: int, heads: int, cond_dim: int, rng: np.random.Generator,
                 mlp_ratio: float = 4.0):
        self.dim = dim
        self.norm1 = LayerNorm(dim, affine=False)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim, affine=False)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.modulation = Linear(cond_dim, 6 * dim, rng, zero=True)

    def forward(self, x: Tensor, cond: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        if cond.ndim == 2:
            cond = cond.reshape(cond.shape[0], 1, cond.shape[1])
        mod = self.modulation(cond.silu())
        d = self.dim
        sh1, sc1, g1 = mod[..., 0:d], mod[..., d:2 * d], mod[..., 2 * d:3 * d]
        sh2, sc2, g2 = mod[..., 3 * d:4 * d], mod[..., 4 * d:5 * d], mod[..., 5 * d:6 * d]
        x = x + g1 * self.attn(adaln_modulate(self.norm1(x), sh1, sc1), key_mask)
        hmid = self.fc1(adaln_modulate(self.norm2(x), sh2, sc2)).gelu()
        return x + g2 * self.fc2(hmid)


class TransformerLayer(Module):
    """Plain pre-norm encoder block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: float = 2.0):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.fc2(self.fc1(self.norm2(x)).gelu())


class Conv1d(Module):
    """Channels-last conv with replicate-edge padding.

    With ``stride=1`` and odd ``kernel`` the output length equals the input.
    With ``stride=2`` and ``kernel=4`` the output length is ``L // 2``.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, zero: bool = False):
        if stride == 1 and kernel % 2 == 0:
            raise ShapeError("same-length conv needs an odd kernel")
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        bound = 1.0 / math.sqrt(c_in * kernel)
        w = np.zeros((c_out, kernel, c_in)) if zero else _uniform(rng, (c_out, kernel, c_in), bound)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))
        if stride == 1:
            self.pad = ((kernel - 1) // 2, (kernel - 1) // 2)
        else:
            total = kernel - stride
            self.pad = (total // 2, total - total // 2)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.c_in:
            raise ShapeError(f"{self._where()}: expected (B, L, {self.c_in}), got {x.shape}")
        if self.stride > 1 and x.shape[1] % self.stride:
            raise ShapeError(f"{self._where()}: length {x.shape[1]} not divisible by stride")
        return T.conv1d_op(x, self.weight, self.bias, self.stride, *self.pad)


class Conv1dResBlock(Module):
    """conv - act - conv with identity skip, no normalization."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        self.conv1 = Conv1d(channels, channels, kernel, rng)
        self.conv2 = Conv1d(channels, channels, kernel, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.conv1(x.relu()).relu())


def nearest_upsample_1d(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    if x.ndim == 1:
        return T.repeat_op(x, factor, axis=0)
    return T.repeat_op(x, factor, axis=1)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of a (possibly fractional) timestep."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    return timestep_embedding(np.arange(length), dim)
