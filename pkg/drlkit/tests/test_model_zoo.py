"""
Tests for model construction, forward passes and checkpoint persistence.
"""

import numpy as np
import pytest

from drlkit.models.schemas import ArchKind, ArchSpec
from drlkit.services.model_zoo import (
    CHECKPOINT_MAGIC,
    alternate_arch,
    forward_logits,
    forward_softmax,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from drlkit.utils.errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    MissingArtifactError,
    ShapeError,
)


def _same_params(a, b):
    assert list(a.params) == list(b.params)
    for name in a.params:
        assert a.params[name].dtype == b.params[name].dtype
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


class TestInit:
    def test_same_seed_same_bits(self, conv_arch):
        _same_params(init_model(conv_arch, seed=5), init_model(conv_arch, seed=5))

    def test_different_seeds_differ(self, mlp_arch):
        a = init_model(mlp_arch, seed=1).params["fc0.weight"].data
        b = init_model(mlp_arch, seed=2).params["fc0.weight"].data
        assert not np.array_equal(a, b)

    def test_biases_start_at_zero(self, mlp_model):
        assert not mlp_model.params["fc0.bias"].data.any()

    def test_invalid_arch_dict(self):
        with pytest.raises(ConfigError):
            init_model({"kind": "small-conv", "input_shape": [36], "num_classes": 3}, seed=0)

    def test_float32_storage(self, linear_arch):
        model = init_model(linear_arch, seed=0, dtype=np.float32)
        assert {p.dtype for p in model.params.values()} == {np.dtype(np.float32)}


class TestForward:
    @pytest.mark.parametrize("fixture", ["linear_model", "mlp_model", "conv_model"])
    def test_output_shapes(self, fixture, request, rng):
        model = request.getfixturevalue(fixture)
        x = rng.uniform(size=(5, *model.arch.input_shape))
        assert forward_logits(model, x).shape == (5, 3)
        probs = forward_softmax(model, x).data
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(5), atol=1e-12)
        assert model.predict(x, batch_size=2).shape == (5,)

    def test_wrong_input_shape(self, conv_model):
        with pytest.raises(ShapeError):
            forward_logits(conv_model, np.zeros((2, 1, 5, 5)))

    def test_clone_is_independent(self, mlp_model):
        copy = mlp_model.clone()
        copy.params["fc0.weight"].data[0, 0] += 1.0
        assert copy.params["fc0.weight"].data[0, 0] != mlp_model.params["fc0.weight"].data[0, 0]
        assert copy.parameter_count() == mlp_model.parameter_count()


def test_alternate_arch():
    conv = ArchSpec(kind=ArchKind.SMALL_CONV, input_shape=(1, 8, 8), num_classes=4)
    assert alternate_arch(conv).kind == ArchKind.MLP
    mlp = ArchSpec(kind=ArchKind.MLP, input_shape=(1, 8, 8), num_classes=4)
    assert alternate_arch(mlp).kind == ArchKind.SMALL_CONV
    flat = ArchSpec(kind=ArchKind.LINEAR, input_shape=(6,), num_classes=2)
    assert alternate_arch(flat).kind == ArchKind.MLP
    assert alternate_arch(conv).input_shape == conv.input_shape


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_round_trip_is_bit_exact(self, tmp_path, conv_arch, dtype):
        model = init_model(conv_arch, seed=3, dtype=dtype)
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt"))
        assert loaded.arch == model.arch and loaded.seed == model.seed
        _same_params(loaded, model)

    def test_storage_width_follows_model_precision(self, tmp_path, conv_arch):
        wide = save_checkpoint(init_model(conv_arch, seed=3), tmp_path / "f8.ckpt").read_bytes()
        narrow = save_checkpoint(init_model(conv_arch, seed=3, dtype=np.float32),
                                 tmp_path / "f4.ckpt").read_bytes()
        count = init_model(conv_arch, seed=3).parameter_count()
        assert len(wide) - len(narrow) == 4 * count
        assert b'"dtype": "float32"' in narrow and b'"dtype": "float64"' in wide

    def test_same_model_same_bytes(self, tmp_path, mlp_model):
        a = save_checkpoint(mlp_model, tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(mlp_model, tmp_path / "b.ckpt").read_bytes()
        assert a == b
        assert a.startswith(CHECKPOINT_MAGIC)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_flipped_payload_byte(self, tmp_path, mlp_model):
        path = save_checkpoint(mlp_model, tmp_path / "m.ckpt")
        raw = bytearray(path.read_bytes())
        raw[-40] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path, mlp_model):
        path = save_checkpoint(mlp_model, tmp_path / "m.ckpt")
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path, mlp_model):
        path = save_checkpoint(mlp_model, tmp_path / "m.ckpt")
        raw = bytearray(path.read_bytes())
        raw[len(CHECKPOINT_MAGIC)] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_fuzzed_corruptions_are_rejected(self, tmp_path, conv_model):
        path = save_checkpoint(conv_model, tmp_path / "m.ckpt")
        pristine = path.read_bytes()
        rng = np.random.default_rng(21)
        for case in range(50):
            raw = bytearray(pristine)
            if case % 2:
                raw = raw[: int(rng.integers(0, len(raw)))]
            else:
                pos = int(rng.integers(0, len(raw)))
                raw[pos] ^= int(rng.integers(1, 256))
            path.write_bytes(bytes(raw))
            with pytest.raises(CheckpointError):
                load_checkpoint(path)
