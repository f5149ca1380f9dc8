"""Deep feature refinement: stacked layer-norm + triple-KAN-block modules."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .kan import KanBlock, map_to_tokens, tokens_to_map
from .module import LayerNorm, Module
from .spline import SplineGrid
from .tensor import ShapeError, Tensor


class DeepKanModule(Module):
    """One refinement unit: layer-norm, then three channel-preserving KAN blocks."""

    def __init__(self, channels: int, grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.block0 = KanBlock(channels, channels, grid=grid, rng=rng)
        self.block1 = KanBlock(channels, channels, grid=grid, rng=rng)
        self.block2 = KanBlock(channels, channels, grid=grid, rng=rng)

    def forward(self, z: Tensor, spatial: tuple[int, int]) -> Tensor:
        z = self.norm(z)
        z = self.block0(z, spatial)
        z = self.block1(z, spatial)
        return self.block2(z, spatial)


class DeepKanRefiner(Module):
    """Refine the deepest pyramid feature while preserving its shape.

    The map is flattened to row-major tokens, passed through ``n_modules``
    DeepKanModule units, and reshaped back. ``residual`` optionally wraps
    each unit in an additive skip (off by default; kept as an ablation
    knob since either reading is defensible).
    """

    def __init__(self, channels: int, n_modules: int = 4,
                 grid: Optional[SplineGrid] = None, residual: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if n_modules < 1:
            raise ValueError(f"need at least one refinement module, got {n_modules}")
        self.channels = channels
        self.residual = residual
        self.stages = []
        for i in range(n_modules):
            stage = DeepKanModule(channels, grid=grid, rng=rng)
            setattr(self, f"stage{i}", stage)
            self.stages.append(stage)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"refiner expects (B, {self.channels}, h, w), got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        z = map_to_tokens(x)
        for stage in self.stages:
            out = stage(z, (h, w))
            z = ops.add(out, z) if self.residual else out
        return tokens_to_map(z, h, w)
