"""Transformer classification block: hierarchical shifted-window attention.

The fused decoder map is patch-embedded into a token grid and passed
through four levels of CSwT blocks.  Each block is a pair of residual
sub-layers, ``z_hat = Attn(LN(z)) + z`` then ``z_next = MLP(LN(z_hat)) +
z_hat``, where Attn is windowed multi-head self-attention: plain (W-MSA)
in even blocks, cyclically shifted by half a window with cross-region
masking (SW-MSA) in odd blocks.  Between levels a patch-merging step
halves the grid and doubles the channels; a global token average and a
two-way linear head produce the logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import ops
from .autodiff import Parameter, ShapeError, Tensor
from .nn import LayerNorm, Linear, Module
from .ops import ConvSpec

__all__ = [
    "TCBConfig",
    "RelativePositionBias",
    "window_partition",
    "window_reverse",
    "build_shift_mask",
    "WindowAttention",
    "CSwTBlock",
    "PatchMerging",
    "PatchEmbed",
    "TCB",
]

MASK_FILL = -1e9


@dataclass
class TCBConfig:
    """Four-level transformer geometry.

    ``depths`` must all be even so every level alternates complete
    W-MSA / SW-MSA pairs; ``heads[i]`` must divide the level's channel
    count ``embed_dim * 2**i``.
    """

    patch_size: int = 4
    embed_dim: int = 96
    depths: tuple[int, int, int, int] = (2, 2, 6, 2)
    heads: tuple[int, int, int, int] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    num_classes: int = 2

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads must list exactly four levels")
        if any(d <= 0 or d % 2 for d in self.depths):
            raise ValueError(f"each level depth must be a positive even count, got {self.depths}")
        for i, h in enumerate(self.heads):
            dim = self.embed_dim * (2 ** i)
            if h <= 0 or dim % h:
                raise ValueError(
                    f"heads[{i}]={h} must divide the level channel count {dim}"
                )
        if self.patch_size < 1 or self.window_size < 1 or self.embed_dim < 1:
            raise ValueError("patch_size, window_size and embed_dim must be positive")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @staticmethod
    def desk() -> "TCBConfig":
        return TCBConfig(embed_dim=8, depths=(2, 2, 2, 2), heads=(1, 1, 1, 1))

    @staticmethod
    def tiny() -> "TCBConfig":
        return TCBConfig(patch_size=2, embed_dim=2, depths=(2, 2, 2, 2),
                         heads=(1, 1, 1, 1), window_size=2, mlp_ratio=2.0)

    def level_dim(self, level: int) -> int:
        return self.embed_dim * (2 ** level)


def window_partition(tokens: Tensor, window: int) -> Tensor:
    """(B, H, W, D) -> (B*nW, window**2, D) non-overlapping windows."""
    b, h, w, d = tokens.shape
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window size {window}")
    nh, nw = h // window, w // window
    x = ops.reshape(tokens, (b, nh, window, nw, window, d))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b * nh * nw, window * window, d))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`; exact round-trip."""
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window size {window}")
    nh, nw = h // window, w // window
    b = windows.shape[0] // (nh * nw)
    d = windows.shape[-1]
    x = ops.reshape(windows, (b, nh, nw, window, window, d))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, h, w, d))


@lru_cache(maxsize=64)
def _shift_mask_cached(h: int, w: int, window: int, shift: int) -> np.ndarray:
    n_win = (h // window) * (w // window)
    t = window * window
    if shift == 0:
        mask = np.zeros((n_win, t, t))
        mask.flags.writeable = False
        return mask
    # Label the rolled grid by pre-shift region: after rolling by
    # (-shift, -shift) the wrapped rows/cols sit in the last `shift` lines,
    # and the last window additionally mixes two non-adjacent bands.
    labels = np.zeros((h, w))
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    region = 0
    for hs in bounds:
        for ws in bounds:
            labels[hs, ws] = region
            region += 1
    win_labels = (
        labels.reshape(h // window, window, w // window, window)
        .transpose(0, 2, 1, 3)
        .reshape(n_win, t)
    )
    mask = np.where(win_labels[:, :, None] != win_labels[:, None, :], MASK_FILL, 0.0)
    mask.flags.writeable = False
    return mask


def build_shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive (nW, w^2, w^2) attention mask for shifted windows.

    Token pairs that originate from different pre-shift regions get
    ``MASK_FILL`` (softmax weight underflows to zero); same-region pairs
    get 0.  ``shift`` 0 yields an all-zero mask.
    """
    if not (0 <= shift < window):
        raise ValueError(f"shift must satisfy 0 <= shift < window, got {shift} vs {window}")
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window size {window}")
    return _shift_mask_cached(h, w, window, shift)


class RelativePositionBias(Module):
    """Learnable per-head additive bias indexed by intra-window offset.

    The table has one row per (dy, dx) offset pair, (2w-1)^2 rows in all;
    the fixed (w^2, w^2) index maps token pairs to rows.  Zero-initialized
    so freshly built attention matches a bias-free oracle exactly.
    """

    def __init__(self, window: int, heads: int, dtype=np.float64):
        self._window = window
        side = 2 * window - 1
        self.table = Parameter(np.zeros((side * side, heads), dtype=dtype))
        coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                      indexing="ij"), axis=-1).reshape(-1, 2)
        rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
        self._index = (rel[..., 0] * side + rel[..., 1]).astype(np.int64)
        self._index.flags.writeable = False

    @property
    def index(self) -> np.ndarray:
        return self._index

    def forward(self) -> Tensor:
        t = self._window * self._window
        bias = ops.gather_rows(self.table, self._index.reshape(-1))
        bias = ops.reshape(bias, (t, t, self.table.shape[1]))
        return ops.transpose(bias, (2, 0, 1))  # (heads, T, T)


class WindowAttention(Module):
    """Multi-head scaled dot-product attention within windows."""

    def __init__(self, dim: int, heads: int, window: int,
                 rng: np.random.Generator, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"heads {heads} must divide dim {dim}")
        self._dim = dim
        self._heads = heads
        self._window = window
        self._scale = (dim // heads) ** -0.5
        self.q = Linear(dim, dim, rng=rng, dtype=dtype)
        self.k = Linear(dim, dim, rng=rng, dtype=dtype)
        self.v = Linear(dim, dim, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.rel_bias = RelativePositionBias(window, heads, dtype=dtype)

    def forward(self, windows: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        bw, t, d = windows.shape
        if t != self._window * self._window:
            raise ShapeError(
                f"window token count {t} != window_size^2 = {self._window ** 2}"
            )
        heads, hd = self._heads, d // self._heads

        def split_heads(x: Tensor) -> Tensor:
            x = ops.reshape(x, (bw, t, heads, hd))
            return ops.transpose(x, (0, 2, 1, 3))

        q = split_heads(ops.scale(self.q.forward(windows), self._scale))
        k = split_heads(self.k.forward(windows))
        v = split_heads(self.v.forward(windows))

        logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))  # (Bw, heads, T, T)
        bias = ops.reshape(self.rel_bias.forward(), (1, heads, t, t))
        logits = ops.add(logits, ops.broadcast_to(bias, logits.shape))

        if mask is not None:
            n_win = mask.shape[0]
            if mask.shape != (n_win, t, t):
                raise ShapeError(
                    f"mask shape {mask.shape} != (nW, {t}, {t})"
                )
            if bw % n_win:
                raise ShapeError(
                    f"window batch {bw} not divisible by mask window count {n_win}"
                )
            b = bw // n_win
            logits = ops.reshape(logits, (b, n_win, heads, t, t))
            mask_t = Tensor(np.ascontiguousarray(mask).reshape(1, n_win, 1, t, t)
                            .astype(windows.dtype))
            logits = ops.add(logits, ops.broadcast_to(mask_t, logits.shape))
            logits = ops.reshape(logits, (bw, heads, t, t))

        weights = ops.softmax(logits, axis=-1)
        ctx = ops.matmul(weights, v)  # (Bw, heads, T, hd)
        ctx = ops.transpose(ctx, (0, 2, 1, 3))
        ctx = ops.reshape(ctx, (bw, t, d))
        return self.proj.forward(ctx)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(ops.gelu(self.fc1.forward(x)))


class CSwTBlock(Module):
    """One residual attention+MLP pair; ``shift`` 0 is W-MSA, >0 is SW-MSA."""

    def __init__(self, dim: int, heads: int, window: int, shift: int,
                 mlp_ratio: float, rng: np.random.Generator, dtype=np.float64):
        if not (0 <= shift < window):
            raise ValueError(f"shift {shift} must lie in [0, window={window})")
        self._window = window
        self._shift = shift
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng=rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)), rng=rng, dtype=dtype)

    @property
    def shift(self) -> int:
        return self._shift

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        win, shift = self._window, self._shift
        z = self.ln1.forward(x)
        if shift:
            z = ops.roll2d(z, (-shift, -shift), axes=(1, 2))
            mask = build_shift_mask(h, w, win, shift)
        else:
            mask = None
        windows = window_partition(z, win)
        attended = self.attn.forward(windows, mask=mask)
        z = window_reverse(attended, win, h, w)
        if shift:
            z = ops.roll2d(z, (shift, shift), axes=(1, 2))
        z_hat = ops.add(x, z)
        return ops.add(z_hat, self.mlp.forward(self.ln2.forward(z_hat)))


class PatchMerging(Module):
    """Concatenate each 2x2 token neighbourhood, normalize, halve channels."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even grid sides, got {h}x{w}")
        x = ops.reshape(x, (b, h // 2, 2, w // 2, 2, d))
        x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ops.reshape(x, (b, h // 2, w // 2, 4 * d))
        return self.reduction.forward(self.norm.forward(x))


class PatchEmbed(Module):
    """Linear projection of non-overlapping patches into tokens."""

    def __init__(self, in_ch: int, embed_dim: int, patch: int,
                 rng: np.random.Generator, dtype=np.float64):
        self._patch = patch
        fan_in = in_ch * patch * patch
        k = (rng.standard_normal((embed_dim, in_ch, patch, patch))
             * np.sqrt(1.0 / fan_in)).astype(dtype)
        self.kernel = Parameter(k)
        self.bias = Parameter(np.zeros(embed_dim, dtype=dtype))
        self._spec = ConvSpec(self.kernel, (patch, patch), (0, 0), bias=self.bias)
        self.norm = LayerNorm(embed_dim, dtype=dtype)

    def forward(self, y: Tensor) -> Tensor:
        b, c, h, w = y.shape
        p = self._patch
        if h % p or w % p:
            raise ShapeError(f"spatial size {h}x{w} not divisible by patch size {p}")
        x = ops.conv2d(y, self._spec)  # (B, E, H/p, W/p)
        e = x.shape[1]
        x = ops.reshape(x, (b, e, (h // p) * (w // p)))
        x = ops.transpose(x, (0, 2, 1))  # (B, L, E)
        return self.norm.forward(x)


class TCBLevel(Module):
    def __init__(self, dim: int, depth: int, heads: int, window: int,
                 mlp_ratio: float, merge: bool, rng: np.random.Generator,
                 dtype=np.float64):
        self._blocks = []
        for i in range(depth):
            shift = 0 if i % 2 == 0 else window // 2
            block = CSwTBlock(dim, heads, window, shift, mlp_ratio, rng, dtype)
            setattr(self, f"block{i}", block)
            self._blocks.append(block)
        self.merge = PatchMerging(dim, rng, dtype) if merge else None

    def forward(self, x: Tensor) -> Tensor:
        for block in self._blocks:
            x = block.forward(x)
        if self.merge is not None:
            x = self.merge.forward(x)
        return x


class TCB(Module):
    """Patch embed -> four CSwT levels with merging -> pooled linear head."""

    def __init__(self, in_ch: int, cfg: TCBConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(in_ch, cfg.embed_dim, cfg.patch_size, rng, dtype)
        self._levels = []
        for i in range(4):
            level = TCBLevel(cfg.level_dim(i), cfg.depths[i], cfg.heads[i],
                             cfg.window_size, cfg.mlp_ratio, merge=(i < 3),
                             rng=rng, dtype=dtype)
            setattr(self, f"level{i}", level)
            self._levels.append(level)
        final_dim = cfg.level_dim(3)
        self.norm = LayerNorm(final_dim, dtype=dtype)
        self.head = Linear(final_dim, cfg.num_classes, rng=rng, dtype=dtype,
                           weight_std=0.01)

    def forward(self, y: Tensor) -> Tensor:
        if y.ndim != 4:
            raise ShapeError(f"TCB expects a rank-4 input map, got shape {y.shape}")
        b = y.shape[0]
        tokens = self.patch_embed.forward(y)  # (B, L, E)
        side = y.shape[2] // self.cfg.patch_size
        if side * (y.shape[3] // self.cfg.patch_size) != tokens.shape[1]:
            raise ShapeError("token count inconsistent with patch grid")
        x = ops.reshape(tokens, (b, side, y.shape[3] // self.cfg.patch_size,
                                 self.cfg.embed_dim))
        for i, level in enumerate(self._levels):
            g = x.shape[1]
            if g % self.cfg.window_size or x.shape[2] % self.cfg.window_size:
                raise ShapeError(
                    f"level {i}: token grid {x.shape[1]}x{x.shape[2]} not divisible "
                    f"by window size {self.cfg.window_size}"
                )
            x = level.forward(x)
        b2, gh, gw, d = x.shape
        x = ops.reshape(x, (b2, gh * gw, d))
        x = self.norm.forward(x)
        pooled = ops.mean_axis(x, axis=1)  # (B, D)
        return self.head.forward(pooled)
