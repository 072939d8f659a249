"""Parameter containers, init, and the Adam optimizer.

Modules discover parameters by walking instance attributes in insertion
order, so checkpoint names are stable as long as attribute names are.
Random init is keyed by a path of names rather than call order: the same
seed and the same module tree always produce the same weights.
"""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .errors import ContractError
from .tensor import Parameter, Tensor


class Rng:
    """Deterministic, splittable random stream keyed by (seed, name path)."""

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = _path
        self._gen = None

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self._path + (str(name),))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            tag = f"{self.seed}/" + "/".join(self._path)
            digest = hashlib.blake2s(tag.encode()).digest()
            self._gen = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return self._gen

    def uniform(self, shape, low: float, high: float) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)


def fan_in_uniform(rng: Rng, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Default weight init: uniform(-gain/sqrt(fan_in), +gain/sqrt(fan_in))."""
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


class Module:
    """Minimal parameter registry with torch-like train/eval switching."""

    def __init__(self):
        self.training = True

    def _children(self):
        for name, value in vars(self).items():
            if name == "training":
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            path = f"{prefix}{name}"
            yield from _walk_params(path, value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            yield from _walk_modules(value)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _walk_params(path: str, value):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_params(f"{path}.{i}", item)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_params(f"{path}.{key}", item)


def _walk_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _walk_modules(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _walk_modules(item)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(fan_in_uniform(rng.child("weight"), (in_dim, out_dim), in_dim, gain))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class Dropout(Module):
    """Inverted dropout with an internal deterministic stream.

    The mask sequence depends only on the construction seed and the call
    order, which is fixed in this single-threaded package.
    """

    def __init__(self, p: float, rng: Rng):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)
        self._gen = rng.child("mask").generator

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        mask = (self._gen.random(x.shape) < keep) / keep
        return x * Tensor(mask)


class Adam:
    """Adam with configurable betas; state is kept per parameter."""

    def __init__(self, params, lr: float = 1e-3, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise ContractError("optimizer needs at least one parameter")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self._step = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self._step += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._step
        bias2 = 1.0 - b2 ** self._step
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
