"""Checkpoint format: round trips and malformed-file handling."""

import numpy as np
import numpy.testing as npt
import pytest

from multiformer.autodiff import Tensor
from multiformer.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from multiformer.exceptions import FormatError


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "head.fc.weight": Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True),
        "head.fc.bias": Tensor(np.zeros(3, np.float32), requires_grad=True),
        "scaf.3.w": Tensor(np.array([[0.0, 1.0]], np.float32), requires_grad=True),
    }


def test_round_trip_bit_exact(tmp_path):
    params = sample_params()
    path = tmp_path / "model.mftc"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name, tensor in params.items():
        npt.assert_array_equal(loaded[name], tensor.data)
        assert loaded[name].dtype == np.float32


def test_file_layout(tmp_path):
    path = tmp_path / "model.mftc"
    save_checkpoint(path, sample_params())
    blob = path.read_bytes()
    assert blob.startswith(MAGIC)
    manifest, payload = blob[len(MAGIC) :].split(b"\n\n", 1)
    lines = manifest.decode().splitlines()
    assert lines[0].split() == ["head.fc.weight", "f32", "4,3", "0"]
    assert lines[1].split() == ["head.fc.bias", "f32", "3", "48"]
    assert len(payload) == (12 + 3 + 2) * 4


def test_save_twice_identical_bytes(tmp_path):
    a, b = tmp_path / "a.mftc", tmp_path / "b.mftc"
    save_checkpoint(a, sample_params(5))
    save_checkpoint(b, sample_params(5))
    assert a.read_bytes() == b.read_bytes()


def test_missing_magic(tmp_path):
    path = tmp_path / "bad.mftc"
    path.write_bytes(b"NOPE\n")
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_unknown_dtype(tmp_path):
    path = tmp_path / "bad.mftc"
    path.write_bytes(MAGIC + b"w f64 2 0\n\n" + b"\x00" * 16)
    with pytest.raises(FormatError, match="dtype"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "bad.mftc"
    save_checkpoint(path, sample_params())
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="payload"):
        load_checkpoint(path)


def test_malformed_manifest_line(tmp_path):
    path = tmp_path / "bad.mftc"
    path.write_bytes(MAGIC + b"w f32 2\n\n" + b"\x00" * 8)
    with pytest.raises(FormatError, match="name dtype shape offset"):
        load_checkpoint(path)
