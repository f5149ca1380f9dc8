"""Training: loss, SGD with momentum, step schedule, loop, tiled evaluation."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .data import Sample, augment, normalize_image, sliding_window
from .metrics import FOREGROUND, ConfusionMatrix, mean_scores
from .model import DeepKanSeg, save_checkpoint
from .tensor import Graph, NonFiniteError, Tensor


class TrainError(RuntimeError):
    """Training aborted: divergence or invalid optimizer state."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 50
    milestones: tuple = (25, 35, 45)
    gamma: float = 0.1
    batch: int = 10
    seed: int = 0
    ignore_index: int = 255
    augment: bool = True

    def __post_init__(self):
        if self.lr0 <= 0 or self.gamma <= 0:
            raise ValueError("lr0 and gamma must be positive")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        ms = list(self.milestones)
        if ms != sorted(set(ms)) or any(m >= self.epochs or m < 0 for m in ms):
            raise ValueError(
                f"milestones must be strictly increasing and < epochs, got {ms}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    drops = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr0 * cfg.gamma ** drops


def cross_entropy_loss(logits: Tensor, target: np.ndarray,
                       ignore_index: int = 255) -> tuple[Tensor, int]:
    """Mean -log softmax over non-ignored pixels plus the contributing count."""
    count = int((np.asarray(target) != ignore_index).sum())
    loss = ops.cross_entropy(logits, target, ignore_index=ignore_index)
    return loss, count


class SGD:
    """Heavy-ball SGD: g' = g + wd*w; v <- momentum*v + g'; w <- w - lr*v."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]],
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.named = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(t.data) for _, t in self.named]
        self.steps = 0

    def step(self, lr: float) -> None:
        for (name, p), v in zip(self.named, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainError(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay:
                g = g + p.data.dtype.type(self.weight_decay) * p.data
            v *= self.momentum
            v += g
            p.data = p.data - p.data.dtype.type(lr) * v
        self.steps += 1


def _param_norm(model) -> float:
    return float(np.sqrt(sum(float((p.data.astype(np.float64) ** 2).sum())
                             for p in model.parameters())))


def _stack_batch(samples: Sequence[Sample],
                 rng: Optional[np.random.Generator]) -> tuple[Tensor, np.ndarray]:
    images, labels = [], []
    for s in samples:
        img, lab = (augment(s.image, s.label, rng) if rng is not None
                    else (s.image, s.label))
        images.append(normalize_image(img))
        labels.append(lab.astype(np.int64))
    return Tensor(np.stack(images)), np.stack(labels)


def train_loop(model: DeepKanSeg, train_set: Sequence[Sample], cfg: TrainConfig,
               out_dir: Optional[str] = None,
               test_tiles: Optional[Sequence[Sample]] = None,
               eval_patch: Optional[int] = None, eval_stride: Optional[int] = None,
               echo: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Run the full schedule; returns per-epoch history dicts.

    Writes ``train_log.txt`` plus ``last.ckpt``/``best.ckpt`` under out_dir
    when given. Log lines carry only run-deterministic fields; wall-clock
    throughput goes to ``echo`` alone.
    """
    if not train_set:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(list(model.named_parameters()), momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    log_path = os.path.join(out_dir, "train_log.txt") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log_fh = open(log_path, "w", encoding="ascii") if log_path else None
    history: list[dict] = []
    best_miou = -1.0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            order = rng.permutation(len(train_set))
            model.train()
            loss_sum, pixels, started = 0.0, 0, time.perf_counter()
            for b0 in range(0, len(order), cfg.batch):
                batch = [train_set[i] for i in order[b0:b0 + cfg.batch]]
                x, y = _stack_batch(batch, rng if cfg.augment else None)
                try:
                    with Graph() as g:
                        loss, count = cross_entropy_loss(model(x), y,
                                                         cfg.ignore_index)
                    g.backward(loss)
                    opt.step(lr)
                except NonFiniteError as e:
                    raise TrainError(
                        f"diverged at epoch {epoch} batch {b0 // cfg.batch}: {e}; "
                        f"parameter norm {_param_norm(model):.4e}") from e
                model.zero_grad()
                loss_sum += loss.item() * count
                pixels += count
            elapsed = time.perf_counter() - started
            mean_loss = loss_sum / pixels
            entry = {"epoch": epoch, "lr": lr, "loss": mean_loss,
                     "samples": len(order)}
            line = f"epoch {epoch} lr {lr:.8g} loss {mean_loss:.6f} samples {len(order)}"
            if test_tiles:
                patch = eval_patch or min(min(t.label.shape) for t in test_tiles)
                stride = eval_stride or patch
                cm, _ = evaluate_tiles(model, test_tiles, patch, stride)
                # models may carry fewer classes than the standard palette
                fg = [n for n in FOREGROUND if n < model.config.num_classes]
                mf1, miou = mean_scores(cm, fg)
                entry.update(mf1=mf1, miou=miou)
                line += f" mF1 {mf1:.6f} mIoU {miou:.6f}"
                if out_dir and miou > best_miou:
                    best_miou = miou
                    save_checkpoint(model, os.path.join(out_dir, "best.ckpt"),
                                    meta={"epoch": str(epoch), "miou": f"{miou:.6f}"})
            if out_dir:
                save_checkpoint(model, os.path.join(out_dir, "last.ckpt"),
                                meta={"epoch": str(epoch)})
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
            if echo:
                echo(f"{line} ({len(order) / max(elapsed, 1e-9):.1f} samples/s)")
            history.append(entry)
    finally:
        if log_fh:
            log_fh.close()
    return history


def evaluate_tiles(model: DeepKanSeg, tiles: Sequence[Sample], patch: int,
                   stride: int, batch: int = 8
                   ) -> tuple[ConfusionMatrix, list[np.ndarray]]:
    """Sliding-window inference with per-pixel logit averaging.

    Returns the confusion matrix over all tiles plus each tile's stitched
    class-index prediction (ties in the final argmax go to the lowest class).
    """
    if stride > patch:
        raise ValueError(f"stride {stride} exceeds patch {patch}")
    num_classes = model.config.num_classes
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(num_classes)
    predictions = []
    try:
        for tile in tiles:
            ht, wt = tile.label.shape
            logit_sum = np.zeros((num_classes, ht, wt), dtype=np.float64)
            hits = np.zeros((ht, wt), dtype=np.int64)
            origins = sliding_window((ht, wt), patch, stride)
            for o0 in range(0, len(origins), batch):
                group = origins[o0:o0 + batch]
                crops = np.stack([normalize_image(
                    tile.image[:, y:y + patch, x:x + patch]) for y, x in group])
                logits = model(Tensor(crops)).numpy().astype(np.float64)
                for (y, x), win in zip(group, logits):
                    logit_sum[:, y:y + patch, x:x + patch] += win
                    hits[y:y + patch, x:x + patch] += 1
            pred = np.argmax(logit_sum / hits, axis=0).astype(np.uint8)
            cm.update(pred, tile.label)
            predictions.append(pred)
    finally:
        if was_training:
            model.train()
    return cm, predictions
