"""
Tests for the checkpoint module.
"""

import msgpack
import numpy as np
import pytest

from mifcn.checkpoint import CHECKPOINT_FORMAT, decode_array, encode_array, load_checkpoint, save_checkpoint
from mifcn.errors import CheckpointError, DataError
from mifcn.model import ModelConfig, identity_init, random_init


class TestArrayEncoding:
    """Test the tensor byte layout."""

    def test_little_endian_float64(self):
        """Test that data is raw little-endian float64."""
        entry = encode_array(np.array([[1.0, -2.5]]))
        assert entry["shape"] == [1, 2]
        assert entry["data"] == np.array([1.0, -2.5], dtype="<f8").tobytes()

    def test_size_mismatch(self):
        """Test that a payload too short for its shape is rejected."""
        with pytest.raises(ValueError):
            decode_array({"shape": [3, 3], "data": np.zeros(4).tobytes()})


class TestCheckpointRoundTrip:
    """Test saving and loading parameters."""

    def test_bit_exact(self, small_config, temp_dir):
        """Test that every value survives save and load unchanged."""
        params = random_init(small_config, seed=3)
        path = save_checkpoint(params, small_config, temp_dir / "model.ckpt")
        loaded, config = load_checkpoint(path)

        assert config == small_config
        original = params.arrays()
        for name, value in loaded.arrays().items():
            assert value.tobytes() == original[name].tobytes()

    def test_loaded_tensors_are_trainable(self, small_config, temp_dir):
        """Test that loaded parameters are gradient leaves."""
        path = save_checkpoint(identity_init(small_config, seed=0), small_config, temp_dir / "m.ckpt")
        loaded, _ = load_checkpoint(path)
        assert all(t.requires_grad for t in loaded.named_tensors().values())

    def test_identical_bytes(self, small_config, temp_dir):
        """Test that saving the same parameters twice writes the same file."""
        params = identity_init(small_config, seed=1)
        a = save_checkpoint(params, small_config, temp_dir / "a.ckpt").read_bytes()
        b = save_checkpoint(params, small_config, temp_dir / "b.ckpt").read_bytes()
        assert a == b

    def test_header(self, small_config, temp_dir):
        """Test the self-describing header fields."""
        path = save_checkpoint(identity_init(small_config, seed=0), small_config, temp_dir / "m.ckpt")
        payload = msgpack.unpackb(path.read_bytes(), raw=False)
        assert payload["format"] == CHECKPOINT_FORMAT
        assert payload["version"] == 1
        assert payload["config"]["T"] == 3
        assert payload["config"]["dilations"] == [1, 2, 1]
        assert payload["tensors"][0]["name"] == "branch1.hidden1.weight"

    def test_expected_config_may_change_h(self, small_config, temp_dir):
        """Test that h and alpha are not part of the architecture match."""
        path = save_checkpoint(identity_init(small_config, seed=0), small_config, temp_dir / "m.ckpt")
        _, config = load_checkpoint(path, expected=ModelConfig(T=3, C=4, A=3, B=1, h=50.0))
        assert config.h == small_config.h


class TestCheckpointErrors:
    """Test that damaged or foreign files raise CheckpointError."""

    @pytest.fixture
    def saved(self, small_config, temp_dir):
        return save_checkpoint(identity_init(small_config, seed=0), small_config, temp_dir / "m.ckpt")

    def test_missing_file(self, temp_dir):
        """Test a path that does not exist."""
        with pytest.raises(CheckpointError, match="Cannot read"):
            load_checkpoint(temp_dir / "absent.ckpt")

    def test_truncated(self, saved):
        """Test a file cut in half."""
        raw = saved.read_bytes()
        saved.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(saved)

    def test_not_a_checkpoint(self, temp_dir):
        """Test a valid MessagePack map of another format."""
        path = temp_dir / "other.ckpt"
        path.write_bytes(msgpack.packb({"format": "something-else"}))
        with pytest.raises(CheckpointError, match="not a MIFCN checkpoint"):
            load_checkpoint(path)

    def test_version_mismatch(self, saved):
        """Test a checkpoint from a different format version."""
        payload = msgpack.unpackb(saved.read_bytes(), raw=False)
        payload["version"] = 99
        saved.write_bytes(msgpack.packb(payload, use_bin_type=True))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(saved)

    def test_missing_tensor(self, saved):
        """Test a checkpoint with a tensor removed."""
        payload = msgpack.unpackb(saved.read_bytes(), raw=False)
        payload["tensors"].pop()
        saved.write_bytes(msgpack.packb(payload, use_bin_type=True))
        with pytest.raises(CheckpointError, match="Malformed"):
            load_checkpoint(saved)

    def test_architecture_mismatch(self, saved):
        """Test loading a T=3 checkpoint into a T=5 configuration."""
        with pytest.raises(CheckpointError, match="T: checkpoint=3 configured=5"):
            load_checkpoint(saved, expected=ModelConfig(T=5, C=4))

    def test_is_a_data_error(self, temp_dir):
        """Test that checkpoint failures map to the data exit code."""
        with pytest.raises(DataError) as info:
            load_checkpoint(temp_dir / "absent.ckpt")
        assert info.value.exit_code == 2
