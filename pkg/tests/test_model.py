"""Whole-model assembly, variants, parameter accounting, checkpoints."""

import numpy as np
import pytest

from deepkanseg.model import (DeepKanSeg, ModelConfig, load_checkpoint,
                              make_variant, param_count, save_checkpoint)
from deepkanseg.module import BatchNorm2d
from deepkanseg.tensor import (AutodiffError, Graph, SerializationError,
                               ShapeError, Tensor)
from deepkanseg.train import cross_entropy_loss


MICRO = ModelConfig(num_classes=4, encoder_channels=(8, 16, 32, 64),
                    deepkan_modules=1, window=4, heads=2,
                    decoder_widths=(16, 8, 8))


def test_logits_shape_matches_input(rng):
    model = DeepKanSeg(MICRO, seed=0)
    x = Tensor(rng.uniform(-1, 1, size=(2, 3, 64, 64)).astype(np.float32))
    assert model(x).shape == (2, 4, 64, 64)


def test_same_seed_same_model(rng):
    a = DeepKanSeg(MICRO, seed=3)
    b = DeepKanSeg(MICRO, seed=3)
    x = Tensor(rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32))
    np.testing.assert_array_equal(a(x).numpy(), b(x).numpy())


def test_eval_forward_is_deterministic(rng):
    model = DeepKanSeg(MICRO, seed=0)
    x = Tensor(rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32))
    model(x)  # train-mode pass populates batch-norm statistics
    model.eval()
    np.testing.assert_array_equal(model(x).numpy(), model(x).numpy())


def test_batch_norm_eval_without_stats_raises():
    bn = BatchNorm2d(3)
    bn.eval()
    with pytest.raises(AutodiffError):
        bn(Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32)))


def test_variants_toggle_structure():
    base = make_variant(MICRO, use_deepkan=False, use_glkan_ffn=False)
    deep = make_variant(MICRO, use_deepkan=True, use_glkan_ffn=False)
    glkan = make_variant(MICRO, use_deepkan=False, use_glkan_ffn=True)
    full = make_variant(MICRO, use_deepkan=True, use_glkan_ffn=True)
    assert base.refiner is None and glkan.refiner is None
    assert deep.refiner is not None and full.refiner is not None
    counts = [param_count(m) for m in (base, deep, glkan, full)]
    assert counts[1] > counts[0] and counts[2] > counts[0]
    assert counts[3] > max(counts[1], counts[2])


def test_deepkan_parameter_delta_is_closed_form():
    # Turning the refiner on adds N modules of layer-norm (2C) plus three
    # blocks of C*C*(nb+2) spline/base weights, 9C depthwise taps, and 2C
    # batch-norm affine terms, nb = grid_size + order.
    for cfg in (MICRO, ModelConfig()):
        on = make_variant(cfg, use_deepkan=True, use_glkan_ffn=False)
        off = make_variant(cfg, use_deepkan=False, use_glkan_ffn=False)
        c = cfg.encoder_channels[-1]
        nb = cfg.grid_size + cfg.spline_order
        per_block = c * c * (nb + 2) + 9 * c + 2 * c
        want = cfg.deepkan_modules * (2 * c + 3 * per_block)
        assert param_count(on) - param_count(off) == want


def test_all_parameters_receive_gradients(rng):
    model = DeepKanSeg(MICRO, seed=1)
    x = Tensor(rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32))
    y = rng.integers(0, 4, size=(1, 32, 32))
    with Graph() as g:
        loss, _ = cross_entropy_loss(model(x), y)
    g.backward(loss)
    dead = [name for name, p in model.named_parameters() if p.grad is None]
    assert dead == []


def test_checkpoint_roundtrip(tmp_path, rng):
    model = DeepKanSeg(MICRO, seed=2)
    x = Tensor(rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32))
    model(x)  # give running stats non-initial values
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, str(path), meta={"epoch": "7"})
    back, meta = load_checkpoint(str(path))
    assert meta == {"epoch": "7"}
    assert back.config == model.config
    ours, theirs = model.state_dict(), back.state_dict()
    assert sorted(ours) == sorted(theirs)
    for name in ours:
        np.testing.assert_array_equal(ours[name], theirs[name], err_msg=name)


def test_checkpoint_preserves_predictions(tmp_path, rng):
    model = DeepKanSeg(MICRO, seed=2)
    x = Tensor(rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32))
    model(x)
    model.eval()
    want = model(x).numpy()
    save_checkpoint(model, str(tmp_path / "m.ckpt"))
    back, _ = load_checkpoint(str(tmp_path / "m.ckpt"))
    back.eval()
    np.testing.assert_array_equal(back(x).numpy(), want)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(SerializationError):
        load_checkpoint(str(path))


def test_load_state_dict_validates(rng):
    model = DeepKanSeg(MICRO, seed=0)
    state = model.state_dict()
    state.pop(sorted(state)[0])
    with pytest.raises(ShapeError):
        model.load_state_dict(state)


def test_model_config_text_roundtrip():
    cfg = ModelConfig(num_classes=5, encoder_channels=(8, 16, 32, 64),
                      use_deepkan=False, spline_low=-2.0)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_model_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        ModelConfig.from_text("bogus_field 3\n")


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(decoder_widths=(256, 130, 64))  # 130 % 4 heads != 0
    with pytest.raises(ValueError):
        ModelConfig(encoder_channels=(8, 16, 32))
