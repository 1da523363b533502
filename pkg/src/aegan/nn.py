"""Minimal module system: named parameters, buffers, and train/eval mode."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype

INIT_STD = 0.02


def parameter(shape, rng: np.random.Generator, std: float = INIT_STD, fill: float | None = None) -> Tensor:
    dtype = get_default_dtype()
    if fill is None:
        data = rng.standard_normal(size=shape, dtype=np.float32).astype(dtype, copy=False)
        data *= std
    else:
        data = np.full(shape, fill, dtype=dtype)
    return Tensor(data, requires_grad=True)


class Module:
    """Base class. Child modules and parameters are discovered from instance attributes."""

    training: bool = True

    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
        for key, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", value

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = parameter((cout, cin, k, k), rng)
        self.bias = parameter((cout,), rng, fill=0.0) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape from the conv size formula, without computing anything."""
        cout, cin, k, _ = self.weight.shape
        c, h, w = shape
        if c != cin:
            raise ValueError(f"conv expects {cin} input channels, got shape {shape}")
        return (cout, F.conv_output_size(h, k, self.stride, self.padding), F.conv_output_size(w, k, self.stride, self.padding))


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = parameter((cin, cout, k, k), rng)
        self.bias = parameter((cout,), rng, fill=0.0) if bias else None

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        cin, cout, k, _ = self.weight.shape
        c, h, w = shape
        if c != cin:
            raise ValueError(f"transposed conv expects {cin} input channels, got shape {shape}")
        return (
            cout,
            F.conv_transpose_output_size(h, k, self.stride, self.padding),
            F.conv_transpose_output_size(w, k, self.stride, self.padding),
        )


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng, bias: bool = True):
        super().__init__()
        self.weight = parameter((fout, fin), rng)
        self.bias = parameter((fout,), rng, fill=0.0) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        fout, fin = self.weight.shape
        if shape != (fin,):
            raise ValueError(f"linear expects ({fin},) inputs, got {shape}")
        return (fout,)


class BatchNorm(Module):
    """Batch normalization over channels; gamma ~ N(1, 0.02) as in DCGAN-style init."""

    def __init__(self, channels: int, rng, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = parameter((channels,), rng)
        self.gamma.data += 1.0
        self.beta = parameter((channels,), rng, fill=0.0)
        dtype = get_default_dtype()
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x):
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
