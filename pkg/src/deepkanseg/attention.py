"""Global-local attention: windowed multi-head self-attention plus a conv branch."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .module import Conv2d, DepthwiseConv2d, Linear, Module
from .tensor import ShapeError, Tensor


class GlobalLocalAttention(Module):
    """Two parallel context paths over a feature map, fused by summation.

    Global branch: non-overlapping window self-attention (the map is
    bottom/right zero-padded to a window multiple, attended, then cropped).
    Local branch: depthwise 3x3 followed by a pointwise 1x1 convolution.
    Cross-window mixing comes from the conv branch, not shifted windows.
    """

    def __init__(self, channels: int, window: int = 8, heads: int = 4,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.channels = channels
        self.window = window
        self.heads = heads
        self.q = Linear(channels, channels, rng=rng)
        self.k = Linear(channels, channels, rng=rng)
        self.v = Linear(channels, channels, rng=rng)
        self.proj = Linear(channels, channels, rng=rng)
        self.local_dw = DepthwiseConv2d(channels, 3, rng=rng)
        self.local_pw = Conv2d(channels, channels, 1, rng=rng)

    def _split_heads(self, t: Tensor, n: int, tokens: int) -> Tensor:
        dh = self.channels // self.heads
        t = ops.reshape(t, (n, tokens, self.heads, dh))
        return ops.transpose(t, (0, 2, 1, 3))

    def global_branch(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"attention built for {self.channels} channels, got {c}")
        win = self.window
        ph = (win - h % win) % win
        pw = (win - w % win) % win
        xp = ops.pad2d(x, (0, ph, 0, pw)) if (ph or pw) else x
        hp, wp = h + ph, w + pw
        tokens = win * win
        t = ops.window_partition(xp, win)
        n = t.shape[0]
        q = self._split_heads(self.q(t), n, tokens)
        k = self._split_heads(self.k(t), n, tokens)
        v = self._split_heads(self.v(t), n, tokens)
        dh = self.channels // self.heads
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
        scores = ops.mul(scores, ops.const(1.0 / np.sqrt(dh), like=scores))
        attn = ops.softmax(scores, axis=-1)
        out = ops.matmul(attn, v)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (n, tokens, c))
        out = ops.window_merge(self.proj(out), win, hp, wp)
        if ph or pw:
            out = ops.crop2d(out, h, w)
        return out

    def local_branch(self, x: Tensor) -> Tensor:
        return self.local_pw(self.local_dw(x))

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(self.global_branch(x), self.local_branch(x))
