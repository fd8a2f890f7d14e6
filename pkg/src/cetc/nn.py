"""Parameter containers and the small layer zoo the classifier is built from.

``Module`` tracks parameters through public instance attributes: any
attribute that is a ``Parameter`` or another ``Module`` is registered under
its attribute name, giving dotted checkpoint names such as
``tdb.sd3.tconv.kernel``.  Attributes starting with an underscore are
ignored, so helper lists can be kept without double registration.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .autodiff import Parameter, ShapeError, Tensor
from .ops import ConvSpec

__all__ = ["Module", "Conv2d", "ConvTranspose2d", "Linear", "LayerNorm"]


class Module:
    """Base class with recursive, name-preserving parameter discovery."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    """Strided 2-D convolution with He-normal init."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng()
        k = kernel_size
        self.kernel = Parameter(_he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.spec = ConvSpec(self.kernel, (stride, stride), (padding, padding),
                             bias=self.bias)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.spec)


class ConvTranspose2d(Module):
    """Transposed 2-D convolution (adjoint geometry of ``Conv2d``).

    ``in_ch`` / ``out_ch`` are the transposed op's own input/output channel
    counts; the stored kernel has shape (in_ch, out_ch, k, k).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, output_padding: int = 0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        rng = rng or np.random.default_rng()
        k = kernel_size
        self.kernel = Parameter(_he_normal(rng, (in_ch, out_ch, k, k), in_ch * k * k, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.spec = ConvSpec(self.kernel, (stride, stride), (padding, padding),
                             (output_padding, output_padding), bias=self.bias)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.spec)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64, weight_std: float = 0.02):
        rng = rng or np.random.default_rng()
        self.weight = Parameter((rng.standard_normal((out_f, in_f)) * weight_std).astype(dtype))
        self.bias = Parameter(np.zeros(out_f, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift, self._eps)
