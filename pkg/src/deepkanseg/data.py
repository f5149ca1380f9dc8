"""Synthetic labeled rasters, sliding windows, augmentation, and file formats.

Scenes are painted class-by-class onto a clutter background: vegetation
blobs, road-like bands, building rectangles, speckled tree blobs, and small
car rectangles, each rendered as a class mean color plus seeded noise.
Images travel as binary PPM (P6), labels as binary PGM (P5, class indices,
255 = void).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import default_dtype

CLASS_NAMES = ("impervious", "building", "lowveg", "tree", "car", "clutter")
N_CLASSES = len(CLASS_NAMES)
CLUTTER = 5
VOID = 255

# Render colors for prediction rasters (ISPRS convention).
COLOR_MAP = {
    0: (255, 255, 255),   # impervious surface: white
    1: (0, 0, 255),       # building: blue
    2: (0, 255, 255),     # low vegetation: cyan
    3: (0, 255, 0),       # tree: green
    4: (255, 255, 0),     # car: yellow
    5: (255, 0, 0),       # clutter: red
    VOID: (0, 0, 0),
}


@dataclass(frozen=True)
class ClassSpec:
    """Scene appearance: per-class mean colors and painting constraints."""

    mean_colors: tuple = ((190, 190, 190), (160, 40, 40), (90, 200, 160),
                          (20, 120, 40), (230, 210, 40), (120, 80, 150))
    noise_sigma: float = 10.0
    min_coverage: float = 0.02
    max_retries: int = 20


DEFAULT_CLASS_SPEC = ClassSpec()


@dataclass
class Sample:
    image: np.ndarray   # (3, S, S) uint8
    label: np.ndarray   # (S, S) uint8

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(
                f"image {self.image.shape} and label {self.label.shape} extents differ")


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


# Class boundaries snap to this grid so a segmenter whose logits live at
# stride LABEL_CELL can represent the ground truth exactly; finer structure
# would put a hard ceiling on every downstream score.
LABEL_CELL = 4


def _paint_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    s = size // LABEL_CELL
    label = np.full((s, s), CLUTTER, dtype=np.uint8)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    q = (size / 256.0) ** 2

    for _ in range(int(rng.integers(3, 6))):                   # low vegetation
        cy, cx = rng.uniform(0, s, size=2)
        ry, rx = rng.uniform(s / 6, s / 3, size=2)
        label[_ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi))] = 2

    for _ in range(int(rng.integers(3, 7))):                   # tree: speckled blobs
        cy, cx = rng.uniform(0, s, size=2)
        ry, rx = rng.uniform(s / 10, s / 5, size=2)
        mask = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi))
        mask &= rng.random((s, s)) > 0.25
        label[mask] = 3

    for _ in range(int(rng.integers(2, 4))):                   # impervious bands
        thick = int(rng.integers(max(1, s // 20), max(2, s // 10)))
        pos = int(rng.integers(0, s - thick))
        if rng.random() < 0.5:
            label[pos:pos + thick, :] = 0
        else:
            label[:, pos:pos + thick] = 0

    for _ in range(max(4, int(round(6 * q)))):                 # buildings
        h = int(rng.integers(max(2, s // 10), max(3, s // 4)))
        w = int(rng.integers(max(2, s // 10), max(3, s // 4)))
        y = int(rng.integers(0, s - h))
        x = int(rng.integers(0, s - w))
        label[y:y + h, x:x + w] = 1

    for _ in range(max(10, int(round(22 * q)))):               # cars
        h = int(rng.integers(2, 4))
        w = int(rng.integers(3, 6))
        if rng.random() < 0.5:
            h, w = w, h
        y = int(rng.integers(0, s - h))
        x = int(rng.integers(0, s - w))
        label[y:y + h, x:x + w] = 4

    return np.kron(label, np.ones((LABEL_CELL, LABEL_CELL), dtype=np.uint8))


def _render(rng: np.random.Generator, label: np.ndarray,
            spec: ClassSpec) -> np.ndarray:
    palette = np.asarray(spec.mean_colors, dtype=np.float64)
    img = palette[label]
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def generate_tile(seed_key, size: int,
                  spec: ClassSpec = DEFAULT_CLASS_SPEC) -> Sample:
    """Deterministically paint one labeled tile; retry until every
    foreground class covers at least ``spec.min_coverage`` of the pixels."""
    if size < 32 or size % LABEL_CELL:
        raise ValueError(
            f"tile size {size} must be >= 32 and a multiple of {LABEL_CELL}")
    rng = np.random.default_rng(seed_key)
    need = spec.min_coverage * size * size
    for _ in range(spec.max_retries):
        label = _paint_scene(rng, size)
        counts = np.bincount(label.ravel(), minlength=N_CLASSES)
        if (counts[:CLUTTER] >= need).all():
            return Sample(_render(rng, label, spec), label)
    raise ValueError(
        f"could not satisfy {spec.min_coverage:.0%} coverage per class "
        f"after {spec.max_retries} attempts")


def synth_generate(seed: int, n_tiles: int, tile_size: int,
                   spec: ClassSpec = DEFAULT_CLASS_SPEC) -> list[Sample]:
    return [generate_tile([seed, i], tile_size, spec) for i in range(n_tiles)]


# --------------------------------------------------------------------------
# Sliding windows and augmentation
# --------------------------------------------------------------------------

def sliding_window(extent: tuple[int, int], patch: int,
                   stride: int) -> list[tuple[int, int]]:
    """Row-major origins of patch-sized windows covering the whole extent.

    Regular grid at multiples of ``stride`` plus edge-aligned windows on the
    far borders when the grid does not land exactly on them.
    """
    ht, wt = extent
    if patch < 1 or stride < 1:
        raise ValueError(f"patch {patch} and stride {stride} must be positive")
    if patch > ht or patch > wt:
        raise ValueError(f"patch {patch} exceeds tile extent {ht}x{wt}")

    def axis(n):
        stops = list(range(0, n - patch + 1, stride))
        if stops[-1] != n - patch:
            stops.append(n - patch)
        return stops

    return [(y, x) for y in axis(ht) for x in axis(wt)]


def augment(image: np.ndarray, label: np.ndarray,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random 90-degree rotation, then horizontal/vertical flips (p=0.5 each).

    The three draws always happen in that order so the consumed random
    stream is independent of the outcome.
    """
    if image.shape[1] != image.shape[2] or label.shape[0] != label.shape[1]:
        raise ValueError("augmentation requires square samples")
    k = int(rng.integers(0, 4))
    image = np.rot90(image, k, axes=(1, 2))
    label = np.rot90(label, k, axes=(0, 1))
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    if rng.random() < 0.5:
        image = image[:, ::-1, :]
        label = label[::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """uint8 image -> float in [-1, 1] (the model's expected input range)."""
    scaled = image.astype(default_dtype()) / default_dtype()(127.5)
    return scaled - default_dtype()(1.0)


# --------------------------------------------------------------------------
# PPM (P6) / PGM (P5) binary rasters
# --------------------------------------------------------------------------

def _read_header(fh, magic: bytes) -> tuple[int, int]:
    if fh.read(2) != magic:
        raise ValueError(f"expected {magic.decode()} raster")

    def token():
        out = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError("truncated raster header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
            elif ch.isspace():
                if out:
                    return out
            else:
                out += ch

    width, height, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise ValueError(f"only 8-bit rasters supported, maxval={maxval}")
    return width, height


def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (3, H, W) uint8 image, got {image.shape} {image.dtype}")
    h, w = image.shape[1], image.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        buf = fh.read(3 * w * h)
        if len(buf) != 3 * w * h:
            raise ValueError("truncated PPM data")
        return np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_pgm(path, label: np.ndarray) -> None:
    if label.ndim != 2 or label.dtype != np.uint8:
        raise ValueError(f"expected (H, W) uint8 label, got {label.shape} {label.dtype}")
    h, w = label.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(label).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        buf = fh.read(w * h)
        if len(buf) != w * h:
            raise ValueError("truncated PGM data")
        return np.frombuffer(buf, dtype=np.uint8).reshape(h, w).copy()


def colorize(label: np.ndarray) -> np.ndarray:
    """Class-index map -> (3, H, W) uint8 color raster."""
    lut = np.zeros((256, 3), dtype=np.uint8)
    for cls, color in COLOR_MAP.items():
        lut[cls] = color
    return lut[label].transpose(2, 0, 1).copy()


# --------------------------------------------------------------------------
# Dataset manifest
# --------------------------------------------------------------------------

@dataclass
class TileRecord:
    index: int
    image_path: str
    label_path: str
    height: int
    width: int
    split: str  # "train" | "test"


@dataclass
class DatasetManifest:
    patch: int
    train_stride: int
    test_stride: int
    seed: int
    tiles: list = field(default_factory=list)

    def split_tiles(self, split: str) -> list[TileRecord]:
        return [t for t in self.tiles if t.split == split]


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"patch {manifest.patch}",
             f"train_stride {manifest.train_stride}",
             f"test_stride {manifest.test_stride}",
             f"seed {manifest.seed}"]
    for t in manifest.tiles:
        lines.append(f"tile {t.index} {t.image_path} {t.label_path} "
                     f"{t.height} {t.width} {t.split}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    fields = {}
    tiles = []
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "tile":
                if len(parts) != 7 or parts[6] not in ("train", "test"):
                    raise ValueError(f"bad tile record: {line!r}")
                tiles.append(TileRecord(int(parts[1]), parts[2], parts[3],
                                        int(parts[4]), int(parts[5]), parts[6]))
            elif parts[0] in ("patch", "train_stride", "test_stride", "seed"):
                fields[parts[0]] = int(parts[1])
            else:
                raise ValueError(f"unknown manifest key {parts[0]!r}")
    missing = {"patch", "train_stride", "test_stride", "seed"} - set(fields)
    if missing:
        raise ValueError(f"manifest missing keys: {sorted(missing)}")
    return DatasetManifest(tiles=tiles, **fields)


def write_dataset(out_dir, samples: Sequence[Sample], n_test: int, seed: int,
                  patch: int, train_stride: int, test_stride: int) -> DatasetManifest:
    """Write tiles as PPM/PGM pairs plus a manifest; last n_test tiles = test."""
    if not 0 <= n_test < len(samples):
        raise ValueError(f"n_test {n_test} out of range for {len(samples)} tiles")
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(patch=patch, train_stride=train_stride,
                               test_stride=test_stride, seed=seed)
    n_train = len(samples) - n_test
    for i, sample in enumerate(samples):
        image_name = f"tile{i:04d}.ppm"
        label_name = f"tile{i:04d}.pgm"
        write_ppm(os.path.join(out_dir, image_name), sample.image)
        write_pgm(os.path.join(out_dir, label_name), sample.label)
        manifest.tiles.append(TileRecord(
            i, image_name, label_name, sample.label.shape[0],
            sample.label.shape[1], "train" if i < n_train else "test"))
    save_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    return manifest


def load_tiles(data_dir, manifest: DatasetManifest, split: str) -> list[Sample]:
    out = []
    for rec in manifest.split_tiles(split):
        image = read_ppm(os.path.join(data_dir, rec.image_path))
        label = read_pgm(os.path.join(data_dir, rec.label_path))
        if label.shape != (rec.height, rec.width):
            raise ValueError(
                f"tile {rec.index}: extent {label.shape} does not match manifest")
        out.append(Sample(image, label))
    return out


def extract_patches(tiles: Sequence[Sample], patch: int,
                    stride: int) -> list[Sample]:
    """Crop every sliding window of every tile into standalone samples."""
    out = []
    for tile in tiles:
        for y, x in sliding_window(tile.label.shape, patch, stride):
            out.append(Sample(tile.image[:, y:y + patch, x:x + patch].copy(),
                              tile.label[y:y + patch, x:x + patch].copy()))
    return out
