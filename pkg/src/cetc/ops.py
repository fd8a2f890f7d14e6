"""Forward operations and their reverse-mode gradient rules.

Every public function here accepts :class:`~cetc.autodiff.Tensor` operands,
computes the forward result with numpy, and registers a vector-Jacobian
rule on the active :class:`~cetc.autodiff.GradTape` (if any).  Shape
checking is strict: there is no implicit broadcasting beyond the bias add
inside ``conv2d`` / ``linear``; anything that needs a broadcast does it
explicitly through :func:`broadcast_to`.

Convolutions are implemented with im2col / col2im so the heavy lifting is
a single BLAS matmul per call.  The transposed convolution is the exact
adjoint of the convolution with the same kernel, stride and padding
(plus ``output_padding`` rows/columns of zeros at the bottom/right), which
makes the inner-product identity

    <conv2d(y, spec), x> == <y, conv_transpose2d(x, spec)>

hold to rounding error for any shared spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .autodiff import ShapeError, Tensor, active_tape

__all__ = [
    "ConvSpec",
    "conv2d",
    "conv_transpose2d",
    "linear",
    "layer_norm",
    "activation",
    "relu",
    "gelu",
    "softmax",
    "softmax_cross_entropy",
    "add",
    "scale",
    "broadcast_to",
    "matmul",
    "transpose",
    "reshape",
    "roll2d",
    "gather_rows",
    "mean_axis",
    "sum_all",
    "weighted_sum",
    "upsample_nearest2",
]

# Plain python floats: numpy-scalar constants would promote float32
# operands to float64.
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _register(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
        out.requires_grad = True
    return out


# ---------------------------------------------------------------------------
# Convolution machinery
# ---------------------------------------------------------------------------

@dataclass
class ConvSpec:
    """Geometry and parameters shared by a conv / transposed-conv pair.

    The kernel axes are ``(c0, c1, kh, kw)``: ``conv2d`` maps ``c1``
    channels to ``c0`` (its input channel count is ``kernel.shape[1]``),
    while ``conv_transpose2d`` runs the adjoint map from ``c0`` channels to
    ``c1``.  ``bias``, when present, must match the respective op's output
    channel count.  ``output_padding`` applies to the transposed direction
    only and must stay below the stride.
    """

    kernel: Tensor
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    output_padding: tuple[int, int] = (0, 0)
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        if any(s < 1 for s in self.stride):
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if any(o < 0 for o in self.output_padding):
            raise ValueError(f"output_padding must be >= 0, got {self.output_padding}")
        if any(o >= s for o, s in zip(self.output_padding, self.stride)):
            raise ValueError(
                f"output_padding {self.output_padding} must be smaller than "
                f"stride {self.stride} in every dimension"
            )
        if self.bias is not None and self.bias.ndim != 1:
            raise ShapeError(f"bias must be rank 1, got shape {self.bias.shape}")

    def conv_output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel.shape[2:]
        (sh, sw), (ph, pw) = self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def transpose_output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel.shape[2:]
        (sh, sw), (ph, pw) = self.stride, self.padding
        oh, ow = self.output_padding
        return (h - 1) * sh - 2 * ph + kh + oh, (w - 1) * sw - 2 * pw + kw + ow


def _im2col(x: np.ndarray, kh: int, kw: int, stride,
            padding) -> tuple[np.ndarray, int, int]:
    """(B, C, H, W) -> ((B, C*kh*kw, L) patch matrix, out_h, out_w)."""
    b, c, h, w = x.shape
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hp, wp = x.shape[2:]
    out_h = (hp - kh) // sh + 1
    out_w = (wp - kw) // sw + 1
    s0, s1, s2, s3 = x.strides
    windows = as_strided(
        x,
        shape=(b, c, kh, kw, out_h, out_w),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return windows.reshape(b, c * kh * kw, out_h * out_w), out_h, out_w


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, out_h: int, out_w: int,
            stride, full_h: int, full_w: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto a canvas."""
    b = cols.shape[0]
    sh, sw = stride
    canvas = np.zeros((b, c, full_h, full_w), dtype=cols.dtype)
    patches = cols.reshape(b, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += patches[:, :, i, j]
    return canvas


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation of (B, C, H, W) input with ``spec.kernel``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input, got shape {x.shape}")
    c0, c1, kh, kw = spec.kernel.shape
    if x.shape[1] != c1:
        raise ShapeError(
            f"conv2d channel mismatch: input has shape {x.shape} "
            f"(channels={x.shape[1]}) but kernel {spec.kernel.shape} expects {c1}"
        )
    if spec.bias is not None and spec.bias.shape[0] != c0:
        raise ShapeError(
            f"conv2d bias length {spec.bias.shape[0]} != output channels {c0}"
        )
    b, _, h, w = x.shape
    out_h, out_w = spec.conv_output_size(h, w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d produces empty output {(out_h, out_w)} for input {x.shape} "
            f"with kernel {spec.kernel.shape}, stride {spec.stride}, padding {spec.padding}"
        )

    cols, out_h, out_w = _im2col(x.data, kh, kw, spec.stride, spec.padding)
    kflat = spec.kernel.data.reshape(c0, c1 * kh * kw)
    y = np.matmul(kflat, cols).reshape(b, c0, out_h, out_w)
    if spec.bias is not None:
        y = y + spec.bias.data.reshape(1, c0, 1, 1)

    inputs = [x, spec.kernel] + ([spec.bias] if spec.bias is not None else [])

    def backward_fn(g, needs):
        gy = g.reshape(b, c0, out_h * out_w)
        gx = gk = gb = None
        if needs[0]:
            gcols = np.matmul(kflat.T, gy)
            ph, pw = spec.padding
            canvas = _col2im(gcols, c1, kh, kw, out_h, out_w, spec.stride,
                             h + 2 * ph, w + 2 * pw)
            gx = canvas[:, :, ph:ph + h, pw:pw + w]
        if needs[1]:
            gk = np.einsum("bol,bkl->ok", gy, cols).reshape(spec.kernel.shape)
        if spec.bias is not None and needs[2]:
            gb = gy.sum(axis=(0, 2))
        return (gx, gk, gb) if spec.bias is not None else (gx, gk)

    return _register("conv2d", inputs, y, backward_fn)


def conv_transpose2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Exact adjoint of ``conv2d`` with the same spec, plus output padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects rank-4 input, got shape {x.shape}")
    c0, c1, kh, kw = spec.kernel.shape
    if x.shape[1] != c0:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input has shape {x.shape} "
            f"(channels={x.shape[1]}) but kernel {spec.kernel.shape} expects {c0}"
        )
    if spec.bias is not None and spec.bias.shape[0] != c1:
        raise ShapeError(
            f"conv_transpose2d bias length {spec.bias.shape[0]} != output channels {c1}"
        )
    b, _, h, w = x.shape
    out_h, out_w = spec.transpose_output_size(h, w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv_transpose2d produces empty output {(out_h, out_w)} for input {x.shape}"
        )
    (sh, sw), (ph, pw) = spec.stride, spec.padding
    oh, ow = spec.output_padding
    # Scatter canvas: windows occupy [0, (h-1)*s + k); the output_padding
    # tail stays zero; final crop removes `padding` from each border.
    full_h = (h - 1) * sh + kh + oh
    full_w = (w - 1) * sw + kw + ow

    kflat = spec.kernel.data.reshape(c0, c1 * kh * kw)
    x_flat = x.data.reshape(b, c0, h * w)
    cols = np.matmul(kflat.T, x_flat)
    canvas = _col2im(cols, c1, kh, kw, h, w, spec.stride, full_h, full_w)
    y = canvas[:, :, ph:ph + out_h, pw:pw + out_w]
    if spec.bias is not None:
        y = y + spec.bias.data.reshape(1, c1, 1, 1)

    inputs = [x, spec.kernel] + ([spec.bias] if spec.bias is not None else [])

    def backward_fn(g, needs):
        gx = gk = gb = None
        if needs[0] or needs[1]:
            g_canvas = np.zeros((b, c1, full_h, full_w), dtype=g.dtype)
            g_canvas[:, :, ph:ph + out_h, pw:pw + out_w] = g
            gcols, gh, gw = _im2col(g_canvas, kh, kw, spec.stride, (0, 0))
            assert (gh, gw) == (h, w)
            if needs[0]:
                gx = np.matmul(kflat, gcols).reshape(b, c0, h, w)
            if needs[1]:
                gk = np.einsum("bol,bkl->ok", x_flat, gcols).reshape(spec.kernel.shape)
        if spec.bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if spec.bias is not None else (gx, gk)

    return _register("conv_transpose2d", inputs, y, backward_fn)


# ---------------------------------------------------------------------------
# Dense / normalization / activation primitives
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias, applied over the last axis of ``x``."""
    if weight.ndim != 2:
        raise ShapeError(f"weight must be rank 2, got shape {weight.shape}")
    out_f, in_f = weight.shape
    if x.shape[-1] != in_f:
        raise ShapeError(
            f"linear feature mismatch: input shape {x.shape} vs weight {weight.shape}"
        )
    if bias is not None and bias.shape != (out_f,):
        raise ShapeError(f"bias shape {bias.shape} != ({out_f},)")
    y = np.matmul(x.data, weight.data.T)
    if bias is not None:
        y = y + bias.data
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def backward_fn(g, needs):
        gx = gw = gb = None
        g2 = g.reshape(-1, out_f)
        if needs[0]:
            gx = np.matmul(g, weight.data)
        if needs[1]:
            gw = np.matmul(g2.T, x.data.reshape(-1, in_f))
        if bias is not None and needs[2]:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _register("linear", inputs, y, backward_fn)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"gain/shift must have shape ({d},), got {gain.shape} and {shift.shape}"
        )
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_sigma
    y = xhat * gain.data + shift.data

    def backward_fn(g, needs):
        gx = gg = gs = None
        if needs[0]:
            gh = g * gain.data
            gx = inv_sigma * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gs = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gs

    return _register("layer_norm", [x, gain, shift], y, backward_fn)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: ``relu`` or exact Gaussian-CDF ``gelu``."""
    if kind == "relu":
        y = np.maximum(x.data, 0.0)

        def backward_fn(g, needs):
            return ((g * (x.data > 0)) if needs[0] else None,)

        return _register("relu", [x], y, backward_fn)
    if kind == "gelu":
        phi = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
        y = x.data * phi

        def backward_fn(g, needs):
            if not needs[0]:
                return (None,)
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            return (g * (phi + x.data * pdf),)

        return _register("gelu", [x], y, backward_fn)
    raise ValueError(f"unknown activation kind: {kind!r} (expected 'relu' or 'gelu')")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _register("softmax", [x], y, backward_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under the logits.

    Gradient w.r.t. the logits is ``(softmax - onehot) / batch``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    b, k = logits.shape
    if k < 2:
        raise ShapeError(f"need at least 2 classes, got {k}")
    lab = np.asarray(labels)
    if lab.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise TypeError(f"labels must be integers, got dtype {lab.dtype}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(
            f"label out of range: values span [{lab.min()}, {lab.max()}] "
            f"but there are {k} classes"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(b), lab].mean()

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        p = np.exp(logp)
        p[np.arange(b), lab] -= 1.0
        return (g * p / b,)

    return _register("softmax_cross_entropy", [logits],
                     np.asarray(loss, dtype=logits.dtype), backward_fn)


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward_fn(g, needs):
        return (g if needs[0] else None, g if needs[1] else None)

    return _register("add", [a, b], a.data + b.data, backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)

    def backward_fn(g, needs):
        return ((g * s) if needs[0] else None,)

    return _register("scale", [x], x.data * s, backward_fn)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    """Explicit broadcast; backward sums over the broadcast axes."""
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        extra = len(shape) - x.ndim
        gsum = g.sum(axis=tuple(range(extra))) if extra else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and gsum.shape[i] != 1)
        if axes:
            gsum = gsum.sum(axis=axes, keepdims=True)
        return (gsum.reshape(x.shape),)

    return _register("broadcast_to", [x], y.copy(), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading (batch) axes must be identical on both operands, or one operand
    may be a plain rank-2 matrix.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    y = np.matmul(a.data, b.data)

    def backward_fn(g, needs):
        ga = gb = None
        if needs[0]:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
        if needs[1]:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _register("matmul", [a, b], y, backward_fn)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))

    def backward_fn(g, needs):
        return (np.transpose(g, inv).copy() if needs[0] else None,)

    return _register("transpose", [x], np.transpose(x.data, axes).copy(), backward_fn)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward_fn(g, needs):
        return (g.reshape(x.shape) if needs[0] else None,)

    return _register("reshape", [x], x.data.reshape(shape).copy(), backward_fn)


def roll2d(x: Tensor, shifts: tuple[int, int], axes: tuple[int, int]) -> Tensor:
    """Cyclic shift along two axes (used for shifted-window attention)."""
    y = np.roll(x.data, shifts, axis=axes)

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        return (np.roll(g, (-shifts[0], -shifts[1]), axis=axes),)

    return _register("roll2d", [x], y, backward_fn)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Look up ``table`` rows: output shape = index.shape + table.shape[1:]."""
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows index must be integer-valued")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ValueError(
            f"gather_rows index out of range [0, {table.shape[0]}): "
            f"[{idx.min()}, {idx.max()}]"
        )
    y = table.data[idx]

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _register("gather_rows", [table], y, backward_fn)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (no keepdims)."""
    n = x.shape[axis]

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return _register("mean_axis", [x], x.data.mean(axis=axis), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g, needs):
        return (np.broadcast_to(g, x.shape).copy() if needs[0] else None,)

    return _register("sum_all", [x], np.asarray(x.data.sum(), dtype=x.dtype),
                     backward_fn)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <x, weights> against a fixed (non-differentiated) array."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {w.shape} != tensor shape {x.shape}")

    def backward_fn(g, needs):
        return ((g * w) if needs[0] else None,)

    return _register("weighted_sum", [x],
                     np.asarray((x.data * w).sum(), dtype=x.dtype), backward_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (B, C, H, W)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects rank-4 input, got {x.shape}")
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _register("upsample_nearest2", [x], y, backward_fn)
