"""Parameters, a small module tree, and the layers the model is built from."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class InitSpec:
    kind: str  # "trunc_normal" | "uniform" | "zeros" | "ones"
    scale: float = 0.0


class Param(Tensor):
    """A learnable leaf tensor.  ``name`` is filled in by the owning module tree."""

    __slots__ = ("name", "init_spec")

    def __init__(self, data, init_spec: InitSpec, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=np.asarray(data).dtype)
        self.name = name
        self.init_spec = init_spec


def init_param(rng: np.random.Generator, shape, spec: InitSpec) -> Param:
    if spec.kind == "trunc_normal":
        data = truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) * spec.scale
    elif spec.kind == "uniform":
        data = rng.uniform(-spec.scale, spec.scale, size=shape)
    elif spec.kind == "zeros":
        data = np.zeros(shape)
    elif spec.kind == "ones":
        data = np.ones(shape)
    else:
        raise ValueError(f"unknown init kind {spec.kind!r}")
    return Param(np.asarray(data, dtype=np.float32), spec)


def trunc_normal(rng, shape, std: float = 0.02) -> Param:
    return init_param(rng, shape, InitSpec("trunc_normal", std))


def fan_in_uniform(rng, shape, fan_in: int) -> Param:
    return init_param(rng, shape, InitSpec("uniform", 1.0 / np.sqrt(fan_in)))


def zeros(shape) -> Param:
    return init_param(None, shape, InitSpec("zeros"))


def ones(shape) -> Param:
    return init_param(None, shape, InitSpec("ones"))


class Module:
    """Attribute-walking container; children are Params, Modules, or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Param]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Param):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{path}.{i}", item

    def parameters(self) -> List[Param]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Token-wise affine map on the last axis: ``x @ weight + bias``."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, std: float = 0.02):
        self.weight = trunc_normal(rng, (d_in, d_out), std)
        self.bias = zeros((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        self.weight = fan_in_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = zeros((c_out,)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = ones((dim,))
        self.bias = zeros((dim,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class ChannelLayerNorm(LayerNorm):
    """LayerNorm over the channel axis of an N×C×H×W map."""

    def forward(self, x: Tensor) -> Tensor:
        y = T.layernorm(T.transpose(x, (0, 2, 3, 1)), self.weight, self.bias, self.eps)
        return T.transpose(y, (0, 3, 1, 2))


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def count_params(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))
