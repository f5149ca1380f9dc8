"""Uniform B-spline basis evaluation with derivative-based backward.

Evaluation exploits local support: at any x only ``order + 1`` basis
functions are nonzero, so the recursion runs on that band (in knot units)
and the values are scattered into the full basis vector afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, apply_op, register_primitive


@dataclass(frozen=True)
class SplineGrid:
    """A uniform knot grid on [low, high] with ``size`` intervals.

    The knot vector is extended by ``order`` steps on both sides so that
    ``size + order`` basis functions cover the range and sum to one on it.
    """

    size: int = 5
    order: int = 3
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"grid size must be >= 1, got {self.size}")
        if self.order < 0:
            raise ValueError(f"spline order must be >= 0, got {self.order}")
        if not self.low < self.high:
            raise ValueError(f"grid range [{self.low}, {self.high}] is empty")

    @property
    def n_basis(self) -> int:
        return self.size + self.order

    @property
    def step(self) -> float:
        return (self.high - self.low) / self.size

    def knots(self, dtype=np.float64) -> np.ndarray:
        k, g = self.order, self.size
        return (self.low + np.arange(-k, g + k + 1, dtype=np.float64)
                * float(self.step)).astype(dtype)


def _interval_and_frac(x, size, order, low, high):
    """Clamp x, locate its knot interval j in 0..size-1, return (j, u, mask).

    ``u`` is the fractional position inside the interval (u = 1 only at the
    exact right edge); ``mask`` is 1 where the clamp did not saturate.
    """
    h = (high - low) / size
    xc = np.clip(x, low, high)
    t = (xc - low) / x.dtype.type(h)
    j = np.minimum(t.astype(np.int64), size - 1)
    u = t - j
    mask = ((x >= low) & (x <= high)).astype(x.dtype)
    return j, u, mask


def _local_basis(u, upto: int) -> np.ndarray:
    """Nonzero B-spline values of degree ``upto`` at fractional position u.

    Works in knot units on a uniform grid; returns (..., upto + 1) where
    entry m is the value of the basis function starting m intervals left of
    u's interval (triangular recursion over the local band).
    """
    n = np.zeros(u.shape + (upto + 1,), dtype=u.dtype)
    n[..., 0] = 1.0
    for d in range(1, upto + 1):
        saved = np.zeros_like(u)
        inv = u.dtype.type(1.0 / d)
        for r in range(d):
            temp = n[..., r] * inv
            n[..., r] = saved + (r + 1 - u) * temp
            saved = (u + d - r - 1) * temp
        n[..., d] = saved
    return n


def _bspline_basis_fwd(x, size, order, low, high):
    j, u, _ = _interval_and_frac(x, size, order, low, high)
    local = _local_basis(u, order)
    out = np.zeros(x.shape + (size + order,), dtype=x.dtype)
    pos = j[..., None] + np.arange(order + 1)
    np.put_along_axis(out, pos, local, axis=-1)
    return out, x


def _bspline_basis_bwd(ctx, g, needs, size, order, low, high):
    x = ctx
    if order == 0:
        # Piecewise-constant basis: zero derivative almost everywhere.
        return (np.zeros_like(x),)
    j, u, mask = _interval_and_frac(x, size, order, low, high)
    lower = _local_basis(u, order - 1)
    # d/dx B_k[i] = (B_{k-1}[i] - B_{k-1}[i+1]) / h on a uniform grid.
    h = x.dtype.type((high - low) / size)
    deriv = np.zeros(x.shape + (order + 1,), dtype=x.dtype)
    deriv[..., 0] = -lower[..., 0]
    deriv[..., order] = lower[..., order - 1]
    if order > 1:
        deriv[..., 1:order] = lower[..., :-1] - lower[..., 1:]
    deriv /= h
    pos = j[..., None] + np.arange(order + 1)
    picked = np.take_along_axis(g, pos, axis=-1)
    return ((picked * deriv).sum(axis=-1) * mask,)


register_primitive("bspline_basis", _bspline_basis_fwd, _bspline_basis_bwd)


def evaluate_basis(x: Tensor, grid: SplineGrid) -> Tensor:
    """Evaluate all basis functions at each element: (...,) -> (..., n_basis).

    Inputs are clamped to the grid range, so the basis row always sums to
    one; gradients are zero where the clamp saturates.
    """
    return apply_op("bspline_basis", (x,), size=grid.size, order=grid.order,
                    low=grid.low, high=grid.high)
