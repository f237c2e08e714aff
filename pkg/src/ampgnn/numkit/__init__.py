"""Minimal dense float64 kernel: tensors with reverse-mode gradients,
MLP/GRU blocks, softmax, Adam and the named-tensor container."""

import numpy as np

from .container import ContainerError, load, save
from .nn import ConfigError, GruParams, MlpParams, gru_step, mlp_forward, uniform_init
from .optim import AdamState, TrainingError, adam_step
from .tensor import (
    Tensor,
    UsageError,
    as_tensor,
    clip_min,
    concat,
    exp,
    grad_enabled,
    linear,
    matvec,
    no_grad,
    parameter,
    relu,
    sigmoid,
    softmax,
    tanh,
)


def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run the reverse pass from ``loss`` and return gradients keyed like ``params``.

    Existing ``.grad`` values are cleared first, so repeated calls do not accumulate.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
