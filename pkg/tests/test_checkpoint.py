import struct

import numpy as np
import pytest

from deep_pursuit.checkpoint import checkpoint_bytes, checkpoint_load, checkpoint_save, parse_checkpoint
from deep_pursuit.exceptions import CheckpointError
from deep_pursuit.model import init_model
from deep_pursuit.network import conv_pyramid_spec, dense_spec


@pytest.fixture(params=["pure", "bn"])
def model(request):
    spec = conv_pyramid_spec(3, 1, residual=True, input_shape=(3, 4, 4))
    params = init_model(spec, 11, request.param)
    rng = np.random.default_rng(0)
    for name in params.names:
        params.arrays[name] = params.arrays[name] + rng.normal(size=params.arrays[name].shape) * 1e-3
    return params


def test_round_trip_is_bit_exact(tmp_path, model):
    path = checkpoint_save(model, tmp_path / "m.dpck")
    loaded = checkpoint_load(path, model.spec)
    assert loaded.names == model.names and loaded.norm == model.norm and loaded.seed == 11
    for name in model.names:
        assert loaded[name].tobytes() == np.asarray(model[name], dtype="<f8").tobytes()
        assert loaded[name].shape == model[name].shape
    assert checkpoint_bytes(loaded) == path.read_bytes()
    assert not (tmp_path / "m.dpck.tmp").exists()


def test_header_layout(model):
    blob = checkpoint_bytes(model)
    magic, version, digest, seed, count = struct.unpack_from("<4sI32sQI", blob)
    assert magic == b"DPCK" and version == 1 and digest == model.spec.hash()
    assert seed == 11 and count == len(model.names)


def test_corrupt_magic(model):
    blob = bytearray(checkpoint_bytes(model))
    blob[0:4] = b"XXXX"
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(bytes(blob), model.spec)


def test_wrong_version(model):
    blob = bytearray(checkpoint_bytes(model))
    blob[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(bytes(blob), model.spec)


def test_wrong_spec(model):
    with pytest.raises(CheckpointError, match="hash"):
        parse_checkpoint(checkpoint_bytes(model), conv_pyramid_spec(3, 1, input_shape=(3, 4, 4)))


def test_truncated_and_trailing(model):
    blob = checkpoint_bytes(model)
    with pytest.raises(CheckpointError, match="truncated"):
        parse_checkpoint(blob[:-5], model.spec)
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(blob + b"\0", model.spec)


def test_layout_mismatch():
    spec = dense_spec([3, 4])
    params = init_model(spec, 0)
    params.arrays["B1"] = np.zeros((4, 3))
    with pytest.raises(CheckpointError, match="layout"):
        parse_checkpoint(checkpoint_bytes(params), spec)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "nope.dpck", dense_spec([2, 2]))
