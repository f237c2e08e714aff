"""MLP and GRU building blocks on top of :mod:`ampgnn.numkit.tensor`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, linear, parameter, relu, sigmoid, tanh


class ConfigError(ValueError):
    """Inconsistent dimensions or unsupported configuration."""


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MlpParams:
    """Affine layers ``in -> h1 -> h2 -> out`` with ReLU on the hidden layers.

    ``weights[k]`` has shape (out_k, in_k).
    """

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> "MlpParams":
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(parameter(uniform_init(rng, (fan_out, fan_in), fan_in)))
            bs.append(parameter(uniform_init(rng, (fan_out,), fan_in)))
        return cls(ws, bs)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def check(self) -> None:
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ConfigError(f"layer {k}: bias {b.shape} vs weight {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ConfigError(f"layer {k}: input {w.shape[1]} != previous output")

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"{prefix}.l{k}.W"] = w
            out[f"{prefix}.l{k}.b"] = b
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], prefix: str) -> "MlpParams":
        ws, bs = [], []
        k = 1
        while f"{prefix}.l{k}.W" in tensors:
            ws.append(tensors[f"{prefix}.l{k}.W"])
            bs.append(tensors[f"{prefix}.l{k}.b"])
            k += 1
        return cls(ws, bs)


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.weights[0].shape[1]:
        raise ConfigError(
            f"MLP expects input dim {params.weights[0].shape[1]}, got {x.shape[-1]}"
        )
    last = len(params.weights) - 1
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = linear(h, w, b)
        if k < last:
            h = relu(h)
    return h


_GRU_FIELDS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


@dataclass
class GruParams:
    """Update (z), reset (r) and candidate (h) gate parameters.

    ``W*`` act on the input (hidden x input), ``U*`` on the previous state
    (hidden x hidden).
    """

    Wz: Tensor
    Uz: Tensor
    bz: Tensor
    Wr: Tensor
    Ur: Tensor
    br: Tensor
    Wh: Tensor
    Uh: Tensor
    bh: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "GruParams":
        vals = {}
        for gate in "zrh":
            vals[f"W{gate}"] = parameter(uniform_init(rng, (hidden, input_dim), input_dim))
            vals[f"U{gate}"] = parameter(uniform_init(rng, (hidden, hidden), hidden))
            vals[f"b{gate}"] = parameter(uniform_init(rng, (hidden,), hidden))
        return cls(**vals)

    @property
    def input_dim(self) -> int:
        return self.Wz.shape[1]

    @property
    def hidden(self) -> int:
        return self.Wz.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in _GRU_FIELDS}

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], prefix: str) -> "GruParams":
        return cls(**{f: tensors[f"{prefix}.{f}"] for f in _GRU_FIELDS})


def gru_step(params: GruParams, h_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU update.

    z = sigmoid(Wz x + Uz h + bz)
    r = sigmoid(Wr x + Ur h + br)
    c = tanh(Wh x + bh + r * (Uh h))
    h' = z * h + (1 - z) * c
    """
    if h_prev.shape[-1] != params.hidden:
        raise ConfigError(f"GRU hidden dim {params.hidden}, got state {h_prev.shape[-1]}")
    if x.shape[-1] != params.input_dim:
        raise ConfigError(f"GRU input dim {params.input_dim}, got {x.shape[-1]}")
    z = sigmoid(linear(x, params.Wz, params.bz) + linear(h_prev, params.Uz))
    r = sigmoid(linear(x, params.Wr, params.br) + linear(h_prev, params.Ur))
    c = tanh(linear(x, params.Wh, params.bh) + r * linear(h_prev, params.Uh))
    return z * h_prev + (1.0 - z) * c
