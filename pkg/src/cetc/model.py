"""The full controllable ensemble CNN-transformer classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .decoder import TDB, EnsembleCoefficients
from .encoder import CEB, SubEncoderConfig
from .nn import Module
from .transformer import TCB, TCBConfig

__all__ = ["ModelConfig", "CETC"]

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    """Everything needed to build a model, independent of input size."""

    encoders: list[SubEncoderConfig]
    decoder_channels: int = 3
    tcb: TCBConfig = field(default_factory=TCBConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.decoder_channels <= 0:
            raise ValueError("decoder_channels must be positive")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @staticmethod
    def default(dtype: str = "float32") -> "ModelConfig":
        """Full-size geometry: 224 input, window-7 four-level transformer."""
        return ModelConfig(
            encoders=[SubEncoderConfig.default(i) for i in ("SE1", "SE2", "SE3")],
            decoder_channels=3,
            tcb=TCBConfig(),
            dtype=dtype,
        )

    @staticmethod
    def desk(dtype: str = "float32") -> "ModelConfig":
        """224-input geometry with a skinny transformer; minutes-scale on CPU."""
        return ModelConfig(
            encoders=[SubEncoderConfig.default(i) for i in ("SE1", "SE2", "SE3")],
            decoder_channels=3,
            tcb=TCBConfig.desk(),
            dtype=dtype,
        )

    @staticmethod
    def tiny(width: int = 2, decoder_channels: int = 2, embed_dim: int = 2,
             dtype: str = "float64") -> "ModelConfig":
        """Smallest config exercising every path; expects 32x32 inputs
        (patch 2 -> 16x16 token grid -> window-2 levels 16/8/4/2)."""
        return ModelConfig(
            encoders=[SubEncoderConfig.tiny(i, width) for i in ("SE1", "SE2", "SE3")],
            decoder_channels=decoder_channels,
            tcb=TCBConfig(patch_size=2, embed_dim=embed_dim, depths=(2, 2, 2, 2),
                          heads=(1, 1, 1, 1), window_size=2, mlp_ratio=2.0),
            dtype=dtype,
        )


class CETC(Module):
    """Encoder -> controllable decoder fusion -> shifted-window classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        self.config = config
        self.ceb = CEB(config.encoders, rng, dtype)
        enc_channels = tuple(
            {c.id: c.out_channels for c in config.encoders}[i]
            for i in ("SE1", "SE2", "SE3")
        )
        self.tdb = TDB(enc_channels, config.decoder_channels, rng, dtype)
        self.tcb = TCB(config.decoder_channels, config.tcb, rng, dtype)

    def forward(self, x: Tensor, coeffs: EnsembleCoefficients) -> Tensor:
        if x.dtype != self.config.np_dtype:
            x = Tensor(x.data.astype(self.config.np_dtype),
                       requires_grad=x.requires_grad)
        enc = self.ceb.forward(x)
        fused = self.tdb.forward(enc, coeffs)
        return self.tcb.forward(fused)
