"""Decoder: attention + KAN feed-forward blocks, skip fusion, classifier."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import ops
from .attention import GlobalLocalAttention
from .kan import KanBlock, PlainBlock, map_to_tokens, tokens_to_map
from .module import Conv2d, LayerNorm, Module, _param
from .spline import SplineGrid
from .tensor import ShapeError, Tensor

FUSION_EPS = 1e-4


class GlkanBlock(Module):
    """Pre-norm attention and double feed-forward block, both residual:

        y = GLAttn(LN(x)) + x
        out = FFN(FFN(LN(y))) + y

    The feed-forward units are KAN blocks, or linear+ReLU when use_kan is off.
    """

    def __init__(self, channels: int, window: int = 8, heads: int = 4,
                 grid: Optional[SplineGrid] = None, use_kan: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.channels = channels
        self.norm1 = LayerNorm(channels)
        self.attn = GlobalLocalAttention(channels, window=window, heads=heads, rng=rng)
        self.norm2 = LayerNorm(channels)
        if use_kan:
            self.ffn0 = KanBlock(channels, channels, grid=grid, rng=rng)
            self.ffn1 = KanBlock(channels, channels, grid=grid, rng=rng)
        else:
            self.ffn0 = PlainBlock(channels, channels, rng=rng)
            self.ffn1 = PlainBlock(channels, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"block built for {self.channels} channels, got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        normed = tokens_to_map(self.norm1(map_to_tokens(x)), h, w)
        y = ops.add(self.attn(normed), x)
        z = self.norm2(map_to_tokens(y))
        z = self.ffn0(z, (h, w))
        z = self.ffn1(z, (h, w))
        return ops.add(tokens_to_map(z, h, w), y)


class Decoder(Module):
    """Three-stage progressive decoder over the feature pyramid.

    Each stage runs a GlkanBlock, upsamples 2x, reduces channels with a 1x1
    conv, and fuses the matching skip (also projected 1x1) via a normalized
    nonnegative weighted sum. A 1x1 classifier plus 4x bilinear upsample
    maps the result to full-resolution logits.
    """

    def __init__(self, num_classes: int,
                 in_channels: Sequence[int] = (64, 128, 256, 512),
                 widths: Sequence[int] = (256, 128, 64), window: int = 8,
                 heads: int = 4, grid: Optional[SplineGrid] = None,
                 use_kan: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if len(in_channels) != 4 or len(widths) != 3:
            raise ValueError("decoder expects a 4-level pyramid and 3 stage widths")
        c1, c2, c3, c4 = in_channels
        w4, w3, w2 = widths
        self.in_channels = tuple(in_channels)
        self.proj_in = Conv2d(c4, w4, 1, rng=rng)
        kw = dict(window=window, heads=heads, grid=grid, use_kan=use_kan, rng=rng)
        self.block4 = GlkanBlock(w4, **kw)
        self.block3 = GlkanBlock(w3, **kw)
        self.block2 = GlkanBlock(w2, **kw)
        self.reduce4 = Conv2d(w4, w3, 1, rng=rng)
        self.reduce3 = Conv2d(w3, w2, 1, rng=rng)
        self.reduce2 = Conv2d(w2, w2, 1, rng=rng)
        self.skip3 = Conv2d(c3, w3, 1, rng=rng)
        self.skip2 = Conv2d(c2, w2, 1, rng=rng)
        self.skip1 = Conv2d(c1, w2, 1, rng=rng)
        for name in ("fuse4", "fuse3", "fuse2"):
            setattr(self, name + "_main", _param(np.ones(())))
            setattr(self, name + "_skip", _param(np.ones(())))
        self.classifier = Conv2d(w2, num_classes, 1, rng=rng)

    def _fuse(self, x: Tensor, skip: Tensor, wx: Tensor, ws: Tensor) -> Tensor:
        a = ops.relu(wx)
        b = ops.relu(ws)
        num = ops.add(ops.mul(a, x), ops.mul(b, skip))
        den = ops.add(ops.add(a, b), ops.const(FUSION_EPS, like=a))
        return ops.div(num, den)

    def _check_pyramid(self, f1, f2, f3, f4):
        got = [t.shape for t in (f1, f2, f3, f4)]
        b, _, h4, w4 = f4.shape
        want = [(b, self.in_channels[0], 8 * h4, 8 * w4),
                (b, self.in_channels[1], 4 * h4, 4 * w4),
                (b, self.in_channels[2], 2 * h4, 2 * w4),
                (b, self.in_channels[3], h4, w4)]
        if got != want:
            raise ShapeError(f"inconsistent pyramid: expected {want}, got {got}")

    def forward(self, f1: Tensor, f2: Tensor, f3: Tensor, f4: Tensor) -> Tensor:
        self._check_pyramid(f1, f2, f3, f4)
        x = self.proj_in(f4)
        x = self.block4(x)
        x = ops.upsample2d(x, 2, "bilinear")
        x = self._fuse(self.reduce4(x), self.skip3(f3), self.fuse4_main, self.fuse4_skip)
        x = self.block3(x)
        x = ops.upsample2d(x, 2, "bilinear")
        x = self._fuse(self.reduce3(x), self.skip2(f2), self.fuse3_main, self.fuse3_skip)
        x = self.block2(x)
        x = ops.upsample2d(x, 2, "bilinear")
        x = self._fuse(self.reduce2(x), self.skip1(f1), self.fuse2_main, self.fuse2_skip)
        logits = self.classifier(x)
        return ops.upsample2d(logits, 4, "bilinear")
