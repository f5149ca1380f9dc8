"""Full segmentation model: encoder, feature refinement, decoder, checkpoints."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .decoder import Decoder
from .deepkan import DeepKanRefiner
from .encoder import Encoder
from .module import Module
from .spline import SplineGrid
from .tensor import SerializationError, Tensor, read_tensor, write_tensor

_CKPT_MAGIC = b"DKCP"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    encoder_channels: tuple = (64, 128, 256, 512)
    deepkan_modules: int = 4
    grid_size: int = 5
    spline_order: int = 3
    spline_low: float = -1.0
    spline_high: float = 1.0
    window: int = 8
    heads: int = 4
    decoder_widths: tuple = (256, 128, 64)
    use_deepkan: bool = True
    use_glkan_ffn: bool = True
    deepkan_residual: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels must list 4 stages")
        if len(self.decoder_widths) != 3:
            raise ValueError("decoder_widths must list 3 stages")
        for width in self.decoder_widths:
            if width % self.heads:
                raise ValueError(
                    f"decoder width {width} not divisible by {self.heads} heads")

    def grid(self) -> SplineGrid:
        return SplineGrid(size=self.grid_size, order=self.spline_order,
                          low=self.spline_low, high=self.spline_high)

    def to_text(self) -> str:
        lines = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{field.name} {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key not in known:
                raise ValueError(f"unknown model config key {key!r}")
            values[key] = _parse_field(known[key], rest.strip())
        return cls(**values)


def _parse_field(field: dataclasses.Field, text: str):
    default = field.default
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise ValueError(f"{field.name}: expected true/false, got {text!r}")
        return text == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(","))
    raise ValueError(f"{field.name}: unsupported field type")


class DeepKanSeg(Module):
    """Encoder -> (optional) deep KAN refinement of F4 -> GLKAN decoder."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        grid = config.grid()
        self.encoder = Encoder(config.encoder_channels, rng=rng)
        if config.use_deepkan:
            self.refiner = DeepKanRefiner(
                config.encoder_channels[-1], n_modules=config.deepkan_modules,
                grid=grid, residual=config.deepkan_residual, rng=rng)
        else:
            self.refiner = None
        self.decoder = Decoder(
            config.num_classes, in_channels=config.encoder_channels,
            widths=config.decoder_widths, window=config.window,
            heads=config.heads, grid=grid, use_kan=config.use_glkan_ffn, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        f1, f2, f3, f4 = self.encoder(image)
        if self.refiner is not None:
            f4 = self.refiner(f4)
        return self.decoder(f1, f2, f3, f4)


def make_variant(config: ModelConfig, use_deepkan: Optional[bool] = None,
                 use_glkan_ffn: Optional[bool] = None, seed: int = 0) -> DeepKanSeg:
    """Build an ablation variant, overriding the two architecture flags."""
    updates = {}
    if use_deepkan is not None:
        updates["use_deepkan"] = use_deepkan
    if use_glkan_ffn is not None:
        updates["use_glkan_ffn"] = use_glkan_ffn
    return DeepKanSeg(dataclasses.replace(config, **updates), seed=seed)


def param_count(module: Module) -> int:
    return sum(p.size for p in module.parameters())


def save_checkpoint(model: DeepKanSeg, path: str,
                    meta: Optional[dict] = None) -> None:
    """Single-file checkpoint: config manifest plus named tensor records."""
    manifest = model.config.to_text()
    for key, value in sorted((meta or {}).items()):
        if any(ch in key for ch in " \n") or "\n" in str(value):
            raise ValueError(f"invalid meta entry {key!r}")
        manifest += f"meta.{key} {value}\n"
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _CKPT_MAGIC, _CKPT_VERSION))
        blob = manifest.encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, array in state.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, array)


def load_checkpoint(path: str) -> tuple[DeepKanSeg, dict]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != _CKPT_MAGIC:
            raise SerializationError(f"{path}: not a checkpoint file")
        version = struct.unpack("<I", head[4:])[0]
        if version != _CKPT_VERSION:
            raise SerializationError(f"{path}: unsupported checkpoint version {version}")
        (manifest_len,) = struct.unpack("<I", fh.read(4))
        manifest = fh.read(manifest_len).decode("utf-8")
        config_lines, meta = [], {}
        for line in manifest.splitlines():
            if line.startswith("meta."):
                key, _, value = line.partition(" ")
                meta[key[len("meta."):]] = value
            elif line.strip():
                config_lines.append(line)
        config = ModelConfig.from_text("\n".join(config_lines))
        (n_records,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            state[name] = read_tensor(fh)
    model = DeepKanSeg(config, seed=0)
    model.load_state_dict(state)
    return model, meta
