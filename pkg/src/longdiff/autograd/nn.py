"""Module/parameter bookkeeping and the standard layers."""

from __future__ import annotations

import copy
import hashlib
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, matmul


def _walk(val, name: str):
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


class Module:
    """Parameter container. Sub-modules and parameters are discovered from attributes
    (including nested lists of modules), in attribute insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in self.__dict__.items():
            yield from _walk(val, prefix + name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state dict mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = arr.copy()

    def clone(self) -> "Module":
        return copy.deepcopy(self)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def hash_parameters(params: dict[str, np.ndarray] | Module) -> str:
    """sha256 over names and raw little-endian bytes, in sorted-name order."""
    if isinstance(params, Module):
        params = {k: p.data for k, p in params.named_parameters()}
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, (n_in, n_out), n_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, bias: bool = True, zero: bool = False):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        shape = (c_out, c_in, k, k)
        self.weight = Parameter(np.zeros(shape) if zero else _uniform(rng, shape, c_in * k * k))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    """Exact 2x upsampling with the default k=4, stride=2, pad=1."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 4, stride: int = 2,
                 pad: int = 1):
        self.stride, self.pad = stride, pad
        self.weight = Parameter(_uniform(rng, (c_in, c_out, k, k), c_in * k * k // (stride * stride)))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias)
