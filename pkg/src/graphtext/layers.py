"""Minimal module system: parameter discovery, linear maps and small MLPs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from graphtext import numerics as nx
from graphtext.numerics import Parameter, Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise nx.ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        if x.ndim > 2:
            lead = x.shape[:-1]
            return self(x.reshape(-1, self.d_in)).reshape(*lead, self.d_out)
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Two affine maps with a relu in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.first = Linear(d_in, d_hidden, rng)
        self.second = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(nx.relu(self.first(x)))


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])
