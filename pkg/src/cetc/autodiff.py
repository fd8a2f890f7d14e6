"""Minimal reverse-mode automatic differentiation core.

A ``Tensor`` wraps a dense numpy array plus an optional gradient buffer.
Operations (see :mod:`cetc.ops`) record themselves onto the active
``GradTape``; replaying the tape in reverse execution order accumulates
gradients into every tensor that requires them.  There is no graph pruning
or fusion: the tape is a plain ordered log, which keeps backward behaviour
easy to reason about and to test.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "ShapeError",
    "NumericsError",
    "backward",
    "active_tape",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericsError(RuntimeError):
    """Raised when a computation produces or receives non-finite values."""


class Tensor:
    """Dense numeric array with an optional same-shape gradient slot.

    Feature maps are stored as rank-4 arrays (batch, channels, height,
    width); token grids and flattened activations reuse the same class at
    other ranks.  ``data`` and ``grad`` always share shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


# Alias used where the rank-4 (batch, channels, height, width) layout is meant.
Tensor4D = Tensor


class Parameter(Tensor):
    """A trainable tensor; always participates in gradient accumulation."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class TapeNode:
    """One executed operation: inputs, output, and its vector-Jacobian rule.

    ``backward_fn(grad_out, needs)`` returns one gradient array (or None)
    per input; ``needs[i]`` tells the rule whether input ``i``'s gradient
    will actually be consumed, so expensive cotangents can be skipped.
    """

    __slots__ = ("op", "inputs", "output", "backward_fn", "needs")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable, needs: tuple):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.needs = needs


_TAPE_STACK: list["GradTape"] = []


def active_tape() -> Optional["GradTape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradTape:
    """Ordered record of executed operations for reverse-mode replay."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable) -> None:
        # An input's gradient is needed if it is trainable or was itself
        # produced on this tape (so gradient must flow through it).
        needs = tuple(
            inp.requires_grad or id(inp) in self._produced for inp in inputs
        )
        self.nodes.append(TapeNode(op, inputs, output, backward_fn, needs))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def first_nonfinite_op(self) -> Optional[str]:
        """Name of the earliest recorded op whose output is non-finite."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node.op
        return None

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: GradTape) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every needed tensor.

    The tape is replayed once, in reverse execution order.  Tensors that do
    not lie on a path from the loss keep their gradient unchanged
    (zero or absent).
    """
    if not tape.nodes:
        raise RuntimeError("backward on an empty tape: no operations were recorded")
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise RuntimeError("loss was not produced by an operation on this tape")

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue  # output not on any path to the loss
        grads = node.backward_fn(g_out, node.needs)
        for inp, g, needed in zip(node.inputs, grads, node.needs):
            if needed and g is not None:
                inp.accumulate_grad(g)
