from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .layers import Module
from .tensor import NonFiniteError, Tensor


def forward_backward(model: Module, loss_fn: Callable[..., Tensor], *inputs):
    """Run ``loss_fn(model(*inputs))`` and return (loss, grads by parameter name)."""
    model.bind_names()
    model.zero_grad()
    out = model(*inputs)
    loss = loss_fn(out)
    if loss.size != 1:
        raise ValueError("loss must be a scalar")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    loss.backward()
    params = model.named_parameters()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return loss.item(), grads


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    num = np.abs(a - b).max() if a.size else 0.0
    den = max(np.abs(a).max() if a.size else 0.0, np.abs(b).max() if b.size else 0.0, floor)
    return float(num / den)


def check_gradients(closure: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                    h: float = 1e-5, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients to central differences for each named tensor.

    ``closure`` rebuilds the graph and returns a scalar loss. Returns the
    relative error per tensor (max abs diff over max magnitude).
    """
    for t in tensors.values():
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    loss = closure()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}
    errs: dict[str, float] = {}
    for k, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = closure().item()
            flat[i] = orig - h
            fm = closure().item()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        errs[k] = relative_error(analytic[k].reshape(-1)[idx], num)
    return errs
