"""Convolutional encoder block: three parallel multi-scale sub-encoders.

Each sub-encoder is a stack of stride-2 3x3 convolutions (one per factor
of 2 in its downsample factor) with a ReLU after every stage.  The scale
contract is fixed per sub-encoder id (SE1 halves the input, SE2 divides
by 8, SE3 by 4), so a 224x224 image yields 112/28/56 feature maps.  The
contract is relative: any input whose sides divide evenly works.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import ShapeError, Tensor
from .nn import Conv2d, Module

__all__ = ["SubEncoderConfig", "CEBOutput", "SubEncoder", "CEB",
           "DOWNSAMPLE_FACTORS"]

DOWNSAMPLE_FACTORS = {"SE1": 2, "SE2": 8, "SE3": 4}


@dataclass
class SubEncoderConfig:
    """Width/depth plan for one sub-encoder.

    ``stage_widths`` lists the output channels of each stride-2 stage; its
    length must equal log2 of the downsample factor so the stage stack
    realizes the scale contract exactly.
    """

    id: str
    out_channels: int
    stage_widths: list[int] = field(default_factory=list)
    in_channels: int = 3

    def __post_init__(self):
        if self.id not in DOWNSAMPLE_FACTORS:
            raise ValueError(f"unknown sub-encoder id {self.id!r}")
        factor = DOWNSAMPLE_FACTORS[self.id]
        n_stages = factor.bit_length() - 1
        if not self.stage_widths:
            raise ValueError(f"{self.id}: stage_widths must be non-empty")
        if any(w <= 0 for w in self.stage_widths):
            raise ValueError(f"{self.id}: stage_widths must be positive, got {self.stage_widths}")
        if len(self.stage_widths) != n_stages:
            raise ValueError(
                f"{self.id}: downsample factor {factor} needs {n_stages} stride-2 "
                f"stages, got {len(self.stage_widths)} widths"
            )
        if self.stage_widths[-1] != self.out_channels:
            raise ValueError(
                f"{self.id}: last stage width {self.stage_widths[-1]} must equal "
                f"out_channels {self.out_channels}"
            )

    @property
    def downsample_factor(self) -> int:
        return DOWNSAMPLE_FACTORS[self.id]

    @staticmethod
    def default(id: str) -> "SubEncoderConfig":
        widths = {"SE1": [16], "SE2": [16, 24, 32], "SE3": [16, 32]}[id]
        return SubEncoderConfig(id=id, out_channels=widths[-1], stage_widths=widths)

    @staticmethod
    def tiny(id: str, width: int = 2) -> "SubEncoderConfig":
        n = DOWNSAMPLE_FACTORS[id].bit_length() - 1
        return SubEncoderConfig(id=id, out_channels=width, stage_widths=[width] * n)


@dataclass
class CEBOutput:
    """The three encoder feature maps at 1/2, 1/8 and 1/4 input scale."""

    f_se1: Tensor
    f_se2: Tensor
    f_se3: Tensor


class SubEncoder(Module):
    def __init__(self, cfg: SubEncoderConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        in_ch = cfg.in_channels
        self._stages = []
        for i, width in enumerate(cfg.stage_widths):
            stage = Conv2d(in_ch, width, kernel_size=3, stride=2, padding=1,
                           rng=rng, dtype=dtype)
            setattr(self, f"stage{i}", stage)
            self._stages.append(stage)
            in_ch = width

    def forward(self, x: Tensor) -> Tensor:
        factor = self.cfg.downsample_factor
        if x.ndim != 4:
            raise ShapeError(f"{self.cfg.id}: expected rank-4 input, got {x.shape}")
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(
                f"{self.cfg.id}: spatial size {x.shape[2:]} not divisible by "
                f"downsample factor {factor}"
            )
        for stage in self._stages:
            x = ops.relu(stage.forward(x))
        return x


class CEB(Module):
    """Runs SE1/SE2/SE3 on the same input; the three have disjoint weights."""

    def __init__(self, cfgs: list[SubEncoderConfig], rng: np.random.Generator,
                 dtype=np.float64):
        ids = [c.id for c in cfgs]
        if sorted(ids) != ["SE1", "SE2", "SE3"]:
            raise ValueError(f"CEB needs exactly the ids SE1, SE2, SE3, got {ids}")
        by_id = {c.id: c for c in cfgs}
        self.se1 = SubEncoder(by_id["SE1"], rng, dtype)
        self.se2 = SubEncoder(by_id["SE2"], rng, dtype)
        self.se3 = SubEncoder(by_id["SE3"], rng, dtype)

    def forward(self, x: Tensor) -> CEBOutput:
        return CEBOutput(
            f_se1=self.se1.forward(x),
            f_se2=self.se2.forward(x),
            f_se3=self.se3.forward(x),
        )
