"""Decoder blocks: residual unrolling, skip fusion, pyramid plumbing."""

import numpy as np
import pytest

from deepkanseg import ops
from deepkanseg.decoder import FUSION_EPS, Decoder, GlkanBlock
from deepkanseg.kan import KanBlock, PlainBlock, map_to_tokens, tokens_to_map
from deepkanseg.tensor import ShapeError, Tensor


def _reset_bn(module):
    for name, buf in module.named_buffers():
        if name.endswith("running_mean"):
            buf[:] = 0.0
        elif name.endswith("running_var"):
            buf[:] = 1.0
        elif name.endswith("batches_tracked"):
            buf[...] = 0.0


def test_glkan_block_equals_unrolled_residuals(f64, rng):
    block = GlkanBlock(4, window=2, heads=2, rng=rng)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)))
    out = block(x).numpy()
    _reset_bn(block)
    h, w = 4, 4
    normed = tokens_to_map(block.norm1(map_to_tokens(x)), h, w)
    y = ops.add(block.attn(normed), x)
    z = block.norm2(map_to_tokens(y))
    z = block.ffn1(block.ffn0(z, (h, w)), (h, w))
    want = ops.add(tokens_to_map(z, h, w), y)
    np.testing.assert_array_equal(out, want.numpy())


def test_glkan_block_ffn_flavor_follows_flag(rng):
    kan = GlkanBlock(4, window=2, heads=2, use_kan=True, rng=rng)
    plain = GlkanBlock(4, window=2, heads=2, use_kan=False, rng=rng)
    assert isinstance(kan.ffn0, KanBlock) and isinstance(kan.ffn1, KanBlock)
    assert isinstance(plain.ffn0, PlainBlock) and isinstance(plain.ffn1, PlainBlock)
    n_kan = sum(p.size for p in kan.parameters())
    n_plain = sum(p.size for p in plain.parameters())
    assert n_plain < n_kan


def test_glkan_block_zeroed_paths_are_identity(f64, rng):
    # With attention and FFN parameters zeroed only the residuals remain.
    block = GlkanBlock(4, window=2, heads=2, use_kan=False, rng=rng)
    for p in block.parameters():
        p.data = np.zeros_like(p.data)
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    np.testing.assert_allclose(block(x).numpy(), x.numpy(), atol=1e-12)


def _micro_decoder(rng, use_kan=True):
    return Decoder(num_classes=3, in_channels=(4, 6, 8, 12), widths=(8, 6, 4),
                   window=2, heads=2, use_kan=use_kan, rng=rng)


def _pyramid(rng, b=1, h4=2, w4=2):
    return tuple(Tensor(rng.normal(size=(b, c, h4 * f, w4 * f)))
                 for c, f in zip((4, 6, 8, 12), (8, 4, 2, 1)))


def test_decoder_output_shape(f64, rng):
    dec = _micro_decoder(rng)
    f1, f2, f3, f4 = _pyramid(rng, b=2)
    out = dec(f1, f2, f3, f4)
    assert out.shape == (2, 3, 64, 64)  # 4x the stride-4 skip resolution


def test_decoder_equals_unrolled_stages(f64, rng):
    dec = _micro_decoder(rng)
    f1, f2, f3, f4 = _pyramid(rng)
    out = dec(f1, f2, f3, f4).numpy()
    _reset_bn(dec)
    x = dec.proj_in(f4)
    x = ops.upsample2d(dec.block4(x), 2, "bilinear")
    x = dec._fuse(dec.reduce4(x), dec.skip3(f3), dec.fuse4_main, dec.fuse4_skip)
    x = ops.upsample2d(dec.block3(x), 2, "bilinear")
    x = dec._fuse(dec.reduce3(x), dec.skip2(f2), dec.fuse3_main, dec.fuse3_skip)
    x = ops.upsample2d(dec.block2(x), 2, "bilinear")
    x = dec._fuse(dec.reduce2(x), dec.skip1(f1), dec.fuse2_main, dec.fuse2_skip)
    want = ops.upsample2d(dec.classifier(x), 4, "bilinear")
    np.testing.assert_array_equal(out, want.numpy())


def test_fusion_is_normalized_weighted_sum(f64, rng):
    dec = _micro_decoder(rng)
    x = Tensor(rng.normal(size=(1, 4, 2, 2)))
    s = Tensor(rng.normal(size=(1, 4, 2, 2)))
    one = Tensor(np.ones(()))
    fused = dec._fuse(x, s, one, one).numpy()
    np.testing.assert_allclose(fused, (x.numpy() + s.numpy()) / (2 + FUSION_EPS),
                               atol=1e-12)


def test_fusion_negative_weight_drops_branch(f64, rng):
    dec = _micro_decoder(rng)
    x = Tensor(rng.normal(size=(1, 4, 2, 2)))
    s = Tensor(rng.normal(size=(1, 4, 2, 2)))
    fused = dec._fuse(x, s, Tensor(np.array(-3.0)), Tensor(np.ones(()))).numpy()
    np.testing.assert_allclose(fused, s.numpy() / (1 + FUSION_EPS), atol=1e-12)


def test_fusion_weights_start_balanced(rng):
    dec = _micro_decoder(rng)
    for name in ("fuse4_main", "fuse4_skip", "fuse3_main", "fuse3_skip",
                 "fuse2_main", "fuse2_skip"):
        p = getattr(dec, name)
        assert p.shape == () and float(p.numpy()) == 1.0


def test_decoder_rejects_inconsistent_pyramid(f64, rng):
    dec = _micro_decoder(rng)
    f1, f2, f3, f4 = _pyramid(rng)
    bad = Tensor(np.zeros((1, 6, 3, 3)))
    with pytest.raises(ShapeError, match="expected"):
        dec(f1, bad, f3, f4)
