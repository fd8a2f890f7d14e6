"""Transposed-convolutional decoder block and the controllable fusion.

Three sub-decoders return the encoder maps to input resolution:

* SD1 (x2): nearest-neighbour upsample + 3x3 conv + ReLU, then two 5x5
  stride-1 pad-2 transposed convolutions with a ReLU between them.
* SD2 (x8): 5x5 transposed conv, stride 4, then ReLU, then another 5x5
  transposed conv, stride 2.
* SD3 (x4): a single 4x4 stride-4 transposed convolution.

All three emit the same channel count so the fused map is a plain weighted
sum ``y = alpha*FSD1 + beta*FSD2 + gamma*FSD3`` with coefficients in [0, 1]
that must sum to one.  Terms whose coefficient is exactly zero are skipped,
so degenerate groups such as (1, 0, 0) reproduce the surviving map bit for
bit and route no gradient to the silenced sub-decoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ShapeError, Tensor
from .encoder import CEBOutput
from .nn import Conv2d, ConvTranspose2d, Module

__all__ = ["EnsembleCoefficients", "SubDecoderConfig", "SubDecoder", "TDB",
           "ensemble_sum", "UPSCALE_FACTORS"]

UPSCALE_FACTORS = {"SD1": 2, "SD2": 8, "SD3": 4}

_COEFF_SUM_TOL = 1e-9


@dataclass(frozen=True)
class EnsembleCoefficients:
    """The (alpha, beta, gamma) fusion weights; validated, never renormalized."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"coefficient {name}={v} outside [0, 1]")
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > _COEFF_SUM_TOL:
            raise ValueError(
                f"coefficients must sum to 1 within {_COEFF_SUM_TOL}, "
                f"got {self.alpha} + {self.beta} + {self.gamma} = {total!r}"
            )

    @staticmethod
    def uniform() -> "EnsembleCoefficients":
        third = 1.0 / 3.0
        return EnsembleCoefficients(third, third, third)

    @staticmethod
    def parse_value(token: str) -> float:
        """Parse one coefficient; '1/3' and the spelling '0.3333333333'
        both mean exactly 1/3."""
        token = token.strip()
        if token == "0.3333333333":
            return 1.0 / 3.0
        if "/" in token:
            num, den = token.split("/", 1)
            return float(num) / float(den)
        return float(token)

    @classmethod
    def parse(cls, text: str) -> "EnsembleCoefficients":
        parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated coefficients, got {text!r}")
        a, b, g = (cls.parse_value(p) for p in parts)
        return cls(a, b, g)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


@dataclass
class SubDecoderConfig:
    id: str
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.id not in UPSCALE_FACTORS:
            raise ValueError(f"unknown sub-decoder id {self.id!r}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")

    @property
    def upscale_factor(self) -> int:
        return UPSCALE_FACTORS[self.id]


class SubDecoder(Module):
    def __init__(self, cfg: SubDecoderConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        c_in, c_out = cfg.in_channels, cfg.out_channels
        if cfg.id == "SD1":
            self.conv = Conv2d(c_in, c_out, 3, stride=1, padding=1, rng=rng, dtype=dtype)
            self.tconv1 = ConvTranspose2d(c_out, c_out, 5, stride=1, padding=2,
                                          rng=rng, dtype=dtype)
            self.tconv2 = ConvTranspose2d(c_out, c_out, 5, stride=1, padding=2,
                                          rng=rng, dtype=dtype)
        elif cfg.id == "SD2":
            # 5x5 kernels factorizing x8 as stride 4 then stride 2; the
            # output paddings make the sizes land exactly on 4h and 8h.
            self.tconv1 = ConvTranspose2d(c_in, c_out, 5, stride=4, padding=2,
                                          output_padding=3, rng=rng, dtype=dtype)
            self.tconv2 = ConvTranspose2d(c_out, c_out, 5, stride=2, padding=2,
                                          output_padding=1, rng=rng, dtype=dtype)
        else:  # SD3
            self.tconv = ConvTranspose2d(c_in, c_out, 4, stride=4, padding=0,
                                         rng=rng, dtype=dtype)

    def forward(self, f: Tensor, expected_output: int | None = None) -> Tensor:
        if f.ndim != 4:
            raise ShapeError(f"{self.cfg.id}: expected rank-4 input, got shape {f.shape}")
        if expected_output is not None:
            got = f.shape[2] * self.cfg.upscale_factor
            if got != expected_output or f.shape[3] * self.cfg.upscale_factor != expected_output:
                raise ShapeError(
                    f"{self.cfg.id}: input scale mismatch, expected spatial "
                    f"{expected_output // self.cfg.upscale_factor} for target "
                    f"{expected_output}, got {f.shape[2:]} "
                )
        if self.cfg.id == "SD1":
            x = ops.upsample_nearest2(f)
            x = ops.relu(self.conv.forward(x))
            x = ops.relu(self.tconv1.forward(x))
            return self.tconv2.forward(x)
        if self.cfg.id == "SD2":
            x = ops.relu(self.tconv1.forward(f))
            return self.tconv2.forward(x)
        return self.tconv.forward(f)


def ensemble_sum(fsd1: Tensor, fsd2: Tensor, fsd3: Tensor,
                 coeffs: EnsembleCoefficients) -> Tensor:
    """Weighted fusion of the three decoded maps (alpha*SD1 + beta*SD2 + gamma*SD3)."""
    if not (fsd1.shape == fsd2.shape == fsd3.shape):
        raise ShapeError(
            f"ensemble_sum shape mismatch: {fsd1.shape}, {fsd2.shape}, {fsd3.shape}"
        )
    if not isinstance(coeffs, EnsembleCoefficients):
        coeffs = EnsembleCoefficients(*coeffs)
    terms = [
        (coeffs.alpha, fsd1),
        (coeffs.beta, fsd2),
        (coeffs.gamma, fsd3),
    ]
    out = None
    for c, f in terms:
        if c == 0.0:
            continue
        term = f if c == 1.0 else ops.scale(f, c)
        out = term if out is None else ops.add(out, term)
    assert out is not None  # coefficients summing to 1 cannot all be zero
    return out


class TDB(Module):
    """Decode the three encoder maps back to input scale and fuse them."""

    def __init__(self, in_channels: tuple[int, int, int], out_channels: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.sd1 = SubDecoder(SubDecoderConfig("SD1", in_channels[0], out_channels),
                              rng, dtype)
        self.sd2 = SubDecoder(SubDecoderConfig("SD2", in_channels[1], out_channels),
                              rng, dtype)
        self.sd3 = SubDecoder(SubDecoderConfig("SD3", in_channels[2], out_channels),
                              rng, dtype)

    def forward(self, enc: CEBOutput, coeffs: EnsembleCoefficients) -> Tensor:
        target = enc.f_se1.shape[2] * 2
        f1 = self.sd1.forward(enc.f_se1, expected_output=target)
        f2 = self.sd2.forward(enc.f_se2, expected_output=target)
        f3 = self.sd3.forward(enc.f_se3, expected_output=target)
        return ensemble_sum(f1, f2, f3, coeffs)
