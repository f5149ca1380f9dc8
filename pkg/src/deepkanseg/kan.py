"""KAN layers: spline-parameterized edge functions, stacks, and blocks."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .module import BatchNorm2d, DepthwiseConv2d, Linear, Module, _param
from .spline import SplineGrid, evaluate_basis
from .tensor import ShapeError, Tensor


class KanLayer(Module):
    """A grid of learnable univariate edge functions mapping n_in to n_out.

    Each edge applies phi(x) = w_b * silu(x) + w_s * sum_i c_i B_i(x) and
    the outputs sum over input features. Parameters are stored input-major
    ((n_in, ..., n_out)) so the forward pass is two matmuls:

        out = silu(x) @ base_weight + basis(x) @ (scale * coeffs)

    spline_scale keeps a broadcast-ready (n_in, 1, n_out) shape; squeeze the
    middle axis for the per-edge w_s value.
    """

    def __init__(self, n_in: int, n_out: int, grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ValueError(f"layer extents must be positive, got {n_in}->{n_out}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.n_out = n_out
        self.grid = grid if grid is not None else SplineGrid()
        nb = self.grid.n_basis
        bound = float(np.sqrt(1.0 / n_in))
        self.base_weight = _param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.spline_scale = _param(np.ones((n_in, 1, n_out)))
        self.spline_coeffs = _param(rng.normal(0.0, 0.1 / nb, size=(n_in, nb, n_out)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[-1] != self.n_in:
            raise ShapeError(
                f"kan layer expects (..., {self.n_in}) input, got {x.shape}")
        nb = self.grid.n_basis
        base = ops.matmul(ops.silu(x), self.base_weight)
        basis = evaluate_basis(x, self.grid)
        flat = ops.reshape(basis, x.shape[:-1] + (self.n_in * nb,))
        weights = ops.reshape(ops.mul(self.spline_scale, self.spline_coeffs),
                              (self.n_in * nb, self.n_out))
        return ops.add(base, ops.matmul(flat, weights))


class KanStack(Module):
    """Sequential composition of KAN layers; the first layer applies first."""

    def __init__(self, widths: list[int], grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("stack needs at least an input and output width")
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layer = KanLayer(a, b, grid=grid, rng=rng)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def tokens_to_map(z: Tensor, h: int, w: int) -> Tensor:
    """(B, h*w, C) row-major tokens -> (B, C, h, w)."""
    b, l, c = z.shape
    if l != h * w:
        raise ShapeError(f"{l} tokens do not tile a {h}x{w} map")
    return ops.transpose(ops.reshape(z, (b, h, w, c)), (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C) with token index y*w + x."""
    b, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


class KanBlock(Module):
    """KAN layer, then depthwise 3x3 + batch-norm + ReLU on the 2-D layout.

    Operates on token sequences (B, L, C); the caller supplies the (h, w)
    factorization used to restore the spatial layout for the convolution.
    """

    def __init__(self, n_in: int, n_out: int, grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.kan = KanLayer(n_in, n_out, grid=grid, rng=rng)
        self.dw = DepthwiseConv2d(n_out, 3, rng=rng)
        self.bn = BatchNorm2d(n_out)

    def forward(self, z: Tensor, spatial: tuple[int, int]) -> Tensor:
        h, w = spatial
        x = tokens_to_map(self.kan(z), h, w)
        x = ops.relu(self.bn(self.dw(x)))
        return map_to_tokens(x)


class PlainBlock(Module):
    """Drop-in for KanBlock with a plain linear + ReLU token mixer."""

    def __init__(self, n_in: int, n_out: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.fc = Linear(n_in, n_out, rng=rng)

    def forward(self, z: Tensor, spatial: tuple[int, int]) -> Tensor:
        return ops.relu(self.fc(z))
