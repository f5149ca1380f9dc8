"""Synthetic data generation, windows, augmentation, and raster files."""

import numpy as np
import pytest

from deepkanseg.data import (CLUTTER, N_CLASSES, VOID, Sample, augment,
                             colorize, extract_patches, generate_tile,
                             load_manifest, load_tiles, normalize_image,
                             read_pgm, read_ppm, save_manifest, sliding_window,
                             synth_generate, write_dataset, write_pgm,
                             write_ppm)
from deepkanseg.tensor import default_dtype


def test_generation_is_seed_deterministic():
    a = generate_tile([7, 0], 64)
    b = generate_tile([7, 0], 64)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)
    c = generate_tile([8, 0], 64)
    assert not np.array_equal(a.label, c.label)


def test_tiles_cover_every_foreground_class():
    for sample in synth_generate(seed=3, n_tiles=4, tile_size=64):
        counts = np.bincount(sample.label.ravel(), minlength=N_CLASSES)
        assert counts[:CLUTTER].min() >= 0.02 * sample.label.size
        assert sample.label.max() < N_CLASSES
        assert sample.image.shape == (3, 64, 64)
        assert sample.image.dtype == np.uint8


def test_sample_extent_mismatch():
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 8, 8), dtype=np.uint8),
               np.zeros((8, 9), dtype=np.uint8))


def test_sliding_window_pinned_cases():
    grid = sliding_window((512, 512), 256, 128)
    assert len(grid) == 9
    assert grid == [(y, x) for y in (0, 128, 256) for x in (0, 128, 256)]

    # grid stops at 32, far edge forces an extra 44-offset window
    edge = sliding_window((300, 300), 256, 32)
    assert edge == [(y, x) for y in (0, 32, 44) for x in (0, 32, 44)]

    assert sliding_window((256, 256), 256, 256) == [(0, 0)]


def test_sliding_window_covers_every_pixel(rng):
    for _ in range(10):
        ht, wt = int(rng.integers(16, 60)), int(rng.integers(16, 60))
        patch = int(rng.integers(4, min(ht, wt) + 1))
        stride = int(rng.integers(1, patch + 1))
        hit = np.zeros((ht, wt), dtype=bool)
        for y, x in sliding_window((ht, wt), patch, stride):
            assert 0 <= y <= ht - patch and 0 <= x <= wt - patch
            hit[y:y + patch, x:x + patch] = True
        assert hit.all()


def test_sliding_window_validation():
    with pytest.raises(ValueError):
        sliding_window((100, 100), 128, 32)
    with pytest.raises(ValueError):
        sliding_window((100, 100), 0, 32)
    with pytest.raises(ValueError):
        sliding_window((100, 100), 32, 0)


def test_augment_moves_image_and_label_together(rng):
    label = rng.integers(0, 6, size=(16, 16)).astype(np.uint8)
    image = np.stack([label, label, label])
    out_img, out_lab = augment(image, label, np.random.default_rng(0))
    np.testing.assert_array_equal(out_img[0], out_lab)
    # relabeling only: the class histogram never changes
    np.testing.assert_array_equal(np.bincount(out_lab.ravel(), minlength=6),
                                  np.bincount(label.ravel(), minlength=6))


def test_augment_consumes_fixed_draw_count(rng):
    # downstream random state must not depend on which flips were taken
    img = rng.integers(0, 255, size=(3, 8, 8)).astype(np.uint8)
    lab = rng.integers(0, 6, size=(8, 8)).astype(np.uint8)
    streams = []
    for k in (0, 1):
        r = np.random.default_rng(99 + k)
        augment(np.rot90(img, k, axes=(1, 2)).copy(),
                np.rot90(lab, k, axes=(0, 1)).copy(), r)
        streams.append(r.random(4))
    r0, r1 = np.random.default_rng(99), np.random.default_rng(100)
    r0.integers(0, 4), r0.random(), r0.random()
    r1.integers(0, 4), r1.random(), r1.random()
    np.testing.assert_array_equal(streams[0], r0.random(4))
    np.testing.assert_array_equal(streams[1], r1.random(4))


def test_augment_requires_square():
    with pytest.raises(ValueError):
        augment(np.zeros((3, 4, 8), dtype=np.uint8),
                np.zeros((4, 8), dtype=np.uint8), np.random.default_rng(0))


def test_normalize_image_range_and_dtype():
    image = np.array([[[0, 255], [128, 51]]], dtype=np.uint8)
    out = normalize_image(image)
    assert out.dtype == default_dtype()
    assert out.min() >= -1.0 and out.max() <= 1.0
    assert out[0, 0, 0] == pytest.approx(-1.0)
    assert out[0, 0, 1] == pytest.approx(1.0)


def test_ppm_pgm_roundtrip(tmp_path, rng):
    image = rng.integers(0, 256, size=(3, 7, 11)).astype(np.uint8)
    label = rng.integers(0, 6, size=(7, 11)).astype(np.uint8)
    write_ppm(tmp_path / "t.ppm", image)
    write_pgm(tmp_path / "t.pgm", label)
    np.testing.assert_array_equal(read_ppm(tmp_path / "t.ppm"), image)
    np.testing.assert_array_equal(read_pgm(tmp_path / "t.pgm"), label)


def test_raster_header_with_comment(tmp_path):
    raw = b"P5\n# a comment\n2 3\n255\n" + bytes(range(6))
    (tmp_path / "c.pgm").write_bytes(raw)
    out = read_pgm(tmp_path / "c.pgm")
    np.testing.assert_array_equal(out, np.arange(6, dtype=np.uint8).reshape(3, 2))


def test_raster_errors(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P6\n2 2\n255\n" + bytes(4))
    with pytest.raises(ValueError, match="expected P5"):
        read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(tmp_path / "short.pgm")
    (tmp_path / "deep.pgm").write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ValueError, match="8-bit"):
        read_pgm(tmp_path / "deep.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2), dtype=np.int32))


def test_colorize_uses_render_palette():
    label = np.array([[0, 5], [VOID, 3]], dtype=np.uint8)
    out = colorize(label)
    assert out.shape == (3, 2, 2)
    assert tuple(out[:, 0, 0]) == (255, 255, 255)
    assert tuple(out[:, 0, 1]) == (255, 0, 0)
    assert tuple(out[:, 1, 0]) == (0, 0, 0)
    assert tuple(out[:, 1, 1]) == (0, 255, 0)


def test_dataset_write_and_reload(tmp_path):
    samples = synth_generate(seed=5, n_tiles=6, tile_size=64)
    manifest = write_dataset(tmp_path, samples, n_test=2, seed=5,
                             patch=32, train_stride=32, test_stride=16)
    assert len(manifest.split_tiles("train")) == 4
    assert len(manifest.split_tiles("test")) == 2
    assert [t.index for t in manifest.split_tiles("test")] == [4, 5]

    loaded = load_manifest(tmp_path / "manifest.txt")
    assert (loaded.patch, loaded.train_stride, loaded.test_stride) == (32, 32, 16)
    assert loaded.seed == 5
    back = load_tiles(tmp_path, loaded, "train")
    for orig, got in zip(samples[:4], back):
        np.testing.assert_array_equal(orig.image, got.image)
        np.testing.assert_array_equal(orig.label, got.label)


def test_manifest_rejects_garbage(tmp_path):
    (tmp_path / "m1.txt").write_text("patch 32\nbogus 1\n")
    with pytest.raises(ValueError, match="unknown manifest key"):
        load_manifest(tmp_path / "m1.txt")
    (tmp_path / "m2.txt").write_text("patch 32\nseed 0\n")
    with pytest.raises(ValueError, match="missing keys"):
        load_manifest(tmp_path / "m2.txt")
    (tmp_path / "m3.txt").write_text(
        "patch 32\ntrain_stride 32\ntest_stride 32\nseed 0\ntile 0 a b 4 4 dev\n")
    with pytest.raises(ValueError, match="bad tile record"):
        load_manifest(tmp_path / "m3.txt")


def test_extract_patches_matches_manual_crops():
    tile = generate_tile([1, 1], 64)
    patches = extract_patches([tile], patch=32, stride=32)
    assert len(patches) == 4
    np.testing.assert_array_equal(patches[3].image, tile.image[:, 32:, 32:])
    np.testing.assert_array_equal(patches[1].label, tile.label[:32, 32:])
