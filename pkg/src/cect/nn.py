"""Parameter containers and the handful of layers the model is built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .rng import Rng
from .tensor import Tensor


def parameter(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def kaiming_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int, gain: float) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, shape, dtype=np.float32)


def _walk(value, path: str) -> Iterator[tuple[str, Tensor]]:
    """Trainable tensors inside ``value``, recursing through modules and containers."""
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{path}.{key}")


class Module:
    """Attribute-order parameter registry, loosely after ``torch.nn.Module``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        # fan-in uniform with bound 1/sqrt(fan_in)
        self.weight = parameter(kaiming_uniform(rng, (d_out, d_in), d_in, 1.0 / math.sqrt(3.0)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: Rng, stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, math.sqrt(2.0)))
        self.bias = parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: Rng, stride: int = 1, padding: int = 0):
        # each output pixel sees c_in * (kernel/stride)^2 taps
        fan_in = max(1, c_in * (kernel // stride) ** 2)
        self.weight = parameter(kaiming_uniform(rng, (c_in, c_out, kernel, kernel), fan_in, math.sqrt(2.0)))
        self.bias = parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)
