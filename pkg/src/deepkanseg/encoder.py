"""Residual convolutional encoder producing a four-scale feature pyramid."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import ops
from .module import BatchNorm2d, Conv2d, Module
from .tensor import ShapeError, Tensor


class ResidualStage(Module):
    """Two 3x3 conv-BN layers with an additive shortcut; ReLU after the add.

    The shortcut is the identity when shape is preserved, otherwise a
    strided 1x1 conv + BN projection.
    """

    def __init__(self, c_in: int, c_out: int, stride: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride=stride, bias=False, rng=rng)
            self.bn_proj = BatchNorm2d(c_out)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        shortcut = self.bn_proj(self.proj(x)) if self.proj is not None else x
        return ops.relu(ops.add(y, shortcut))


class Encoder(Module):
    """Stem (3x3 stride-2 conv + BN + ReLU + 2x2 max-pool) and four residual
    stages, yielding features at strides (4, 8, 16, 32)."""

    def __init__(self, channels: Sequence[int] = (64, 128, 256, 512),
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if len(channels) != 4:
            raise ValueError(f"encoder needs 4 stage widths, got {channels}")
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.stem_conv = Conv2d(3, c1, 3, stride=2, padding=1, bias=False, rng=rng)
        self.stem_bn = BatchNorm2d(c1)
        self.stage1 = ResidualStage(c1, c1, stride=1, rng=rng)
        self.stage2 = ResidualStage(c1, c2, stride=2, rng=rng)
        self.stage3 = ResidualStage(c2, c3, stride=2, rng=rng)
        self.stage4 = ResidualStage(c3, c4, stride=2, rng=rng)

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"encoder expects (B, 3, H, W) input, got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % 32 or w % 32:
            raise ShapeError(f"input extents must be divisible by 32, got {h}x{w}")
        x = ops.maxpool2d(ops.relu(self.stem_bn(self.stem_conv(image))), 2)
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return f1, f2, f3, f4
