"""Tensor core: tape autodiff, layers, optimizer, EMA, RNG streams, checkpoints."""
from .tensor import (NonFiniteError, ShapeError, Tensor, as_tensor, concat, embedding, l1,
                     matmul, mse, no_grad, stack, where)
from .layers import (AdaLNTransformerLayer, Conv1d, Conv1dResBlock, Embedding, LayerNorm, Linear,
                     Module, MultiHeadAttention, Parameter, TransformerLayer, adaln_modulate,
                     nearest_upsample_1d, sinusoidal_positions, timestep_embedding)
from .optim import AdamW, EmaState, OptimizerState, WarmupCosineLR, WarmupStepLR, adamw_step, clip_grad_norm, ema_update
from .rng import make_rng, split
from .gradcheck import check_gradients, forward_backward, numeric_grad, relative_error
from . import checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
