"""Finite-difference gradient checking for layers and whole models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Graph, Tensor


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    n_checked: int
    n_skipped: int


@dataclass
class GradCheckReport:
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def n_skipped(self) -> int:
        return sum(c.n_skipped for c in self.checks)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def format(self, tol: float) -> str:
        lines = []
        for c in self.checks:
            flag = "ok" if c.max_rel_err < tol else "FAIL"
            lines.append(f"  {c.name}: max_rel_err={c.max_rel_err:.3e} "
                         f"checked={c.n_checked} skipped={c.n_skipped} {flag}")
        return "\n".join(lines)


def grad_check(fn: Callable[[], Tensor], tensors: dict[str, Tensor],
               eps: float = 1e-5, max_coords: int = 10,
               rng: Optional[np.random.Generator] = None,
               avoid: Optional[dict[str, Sequence[float]]] = None,
               avoid_margin: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    ``fn`` must be a pure function of the given tensors (64-bit). For each
    tensor up to ``max_coords`` coordinates are perturbed by +-eps. A
    coordinate whose current value lies within ``avoid_margin`` of any value
    in ``avoid[name]`` (knot/kink locations) is skipped and counted, not
    failed. The relative-error denominator is floored at 1e-4 of the loss
    magnitude: below that, central differences only measure rounding noise
    (about 1e-16 * |loss| / eps), not the gradient.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    with Graph() as graph:
        loss = fn()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    if loss.dtype != np.float64:
        raise ValueError("grad_check requires float64 evaluation")
    graph.backward(loss)
    floor = 1e-4 * max(1.0, abs(float(loss.data)))
    analytic = {name: (t.grad.copy() if t.grad is not None
                       else np.zeros_like(t.data))
                for name, t in tensors.items()}

    report = GradCheckReport()
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        count = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        bad_points = np.asarray((avoid or {}).get(name, ()), dtype=np.float64)
        worst, checked, skipped = 0.0, 0, 0
        for i in coords:
            orig = flat[i]
            if bad_points.size and np.abs(bad_points - orig).min() < avoid_margin:
                skipped += 1
                continue
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(ana[i] - fd) / max(abs(ana[i]), abs(fd), floor)
            worst = max(worst, rel)
            checked += 1
        report.checks.append(TensorCheck(name, worst, checked, skipped))
    return report


def sample_away_from(rng: np.random.Generator, shape, low: float, high: float,
                     avoid: Sequence[float], margin: float) -> np.ndarray:
    """Uniform draw on [low, high] resampling any value near an avoid point."""
    pts = np.asarray(avoid, dtype=np.float64)
    x = rng.uniform(low, high, size=shape)
    for _ in range(100):
        near = (np.abs(x[..., None] - pts).min(axis=-1) < margin)
        if not near.any():
            return x
        x = np.where(near, rng.uniform(low, high, size=shape), x)
    raise RuntimeError("could not sample away from avoid points")


def run_family_checks(seed: int = 0, max_coords: int = 6
                      ) -> list[tuple[str, GradCheckReport, float]]:
    """FD-check one representative of every layer family at 64-bit.

    Returns (family name, report, tolerance) triples; layers are held to
    1e-4 and the end-to-end micro model to 1e-3.
    """
    from . import ops
    from .attention import GlobalLocalAttention
    from .decoder import GlkanBlock
    from .deepkan import DeepKanRefiner
    from .encoder import ResidualStage
    from .kan import KanBlock, KanLayer
    from .model import DeepKanSeg, ModelConfig
    from .spline import SplineGrid
    from .tensor import default_dtype, set_default_dtype

    previous = default_dtype()
    set_default_dtype("float64")
    try:
        rng = np.random.default_rng(seed)
        knots = [float(k) for k in SplineGrid().knots()]
        results = []

        def sumsq(t):
            return ops.reduce_sum(ops.mul(t, t))

        def check(name, module, x, tol, coords=max_coords, spatial=None):
            tensors = {"input": x}
            tensors.update(dict(module.named_parameters()))
            fn = (lambda: sumsq(module(x, spatial))) if spatial else \
                (lambda: sumsq(module(x)))
            rep = grad_check(fn, tensors, max_coords=coords,
                             rng=np.random.default_rng(seed + 1),
                             avoid={"input": knots})
            results.append((name, rep, tol))

        check("kan_layer", KanLayer(4, 3, rng=rng),
              Tensor(sample_away_from(rng, (2, 4), -0.9, 0.9, knots, 1e-3)), 1e-4)
        check("kan_block", KanBlock(3, 5, rng=rng),
              Tensor(sample_away_from(rng, (2, 4, 3), -0.9, 0.9, knots, 1e-3)),
              1e-4, spatial=(2, 2))
        check("deepkan_module", DeepKanRefiner(4, n_modules=1, rng=rng),
              Tensor(rng.normal(0.0, 0.5, size=(2, 4, 2, 2))), 1e-4)
        check("global_local_attention",
              GlobalLocalAttention(4, window=2, heads=2, rng=rng),
              Tensor(rng.normal(0.0, 0.5, size=(1, 4, 4, 4))), 1e-4)
        check("glkan_block", GlkanBlock(4, window=2, heads=2, rng=rng),
              Tensor(rng.normal(0.0, 0.5, size=(2, 4, 4, 4))), 1e-4)
        check("encoder_stage", ResidualStage(3, 4, stride=2, rng=rng),
              Tensor(rng.normal(0.0, 0.5, size=(2, 3, 8, 8))), 1e-4)

        config = ModelConfig(num_classes=3, encoder_channels=(8, 16, 32, 64),
                             deepkan_modules=1, window=4, heads=2,
                             decoder_widths=(16, 8, 8))
        model = DeepKanSeg(config, seed=seed)
        image = Tensor(rng.uniform(-1.0, 1.0, size=(1, 3, 64, 64)))
        check("full_model", model, image, 1e-3, coords=2)
        return results
    finally:
        set_default_dtype(previous)
