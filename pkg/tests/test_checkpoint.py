import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prognet import network as net
from prognet.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_into,
    save_checkpoint,
)


def sample_checkpoint(seed=0):
    rng = np.random.default_rng(seed)
    params = {
        "head1.w": rng.normal(size=(4, 3)).astype(np.float32),
        "head1.b": rng.normal(size=(3,)).astype(np.float32),
        "stem.w": rng.normal(size=(8, 3, 3, 3)).astype(np.float32),
    }
    return Checkpoint(
        kind="model", config_digest="abc123", params=params, epoch=7, metric=0.91
    )


def test_roundtrip_preserves_every_bit(tmp_path):
    path = str(tmp_path / "m.ckpt")
    ck = sample_checkpoint()
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    assert loaded.kind == "model"
    assert loaded.config_digest == "abc123"
    assert loaded.epoch == 7 and loaded.metric == pytest.approx(0.91)
    assert set(loaded.params) == set(ck.params)
    for k in ck.params:
        np.testing.assert_array_equal(loaded.params[k], ck.params[k])


def test_save_load_save_is_byte_identical(tmp_path):
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    ck = sample_checkpoint(1)
    save_checkpoint(ck, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


@settings(max_examples=30)
@given(offset=st.integers(0, 10_000), flip=st.integers(1, 255))
def test_any_corrupted_byte_is_rejected(tmp_path_factory, offset, flip):
    path = str(tmp_path_factory.mktemp("ck") / "m.ckpt")
    save_checkpoint(sample_checkpoint(2), path)
    with open(path, "rb") as fh:
        blob = bytearray(fh.read())
    offset %= len(blob)
    blob[offset] ^= flip
    with open(path, "wb") as fh:
        fh.write(blob)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(sample_checkpoint(3), path)
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(path, "wb") as fh:
        fh.write(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path):
    import hashlib
    import struct

    path = str(tmp_path / "m.ckpt")
    save_checkpoint(sample_checkpoint(4), path)
    with open(path, "rb") as fh:
        blob = bytearray(fh.read())
    body = blob[:-32]
    body[4:8] = struct.pack("<I", 99)
    body = bytes(body)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_load_into_model_restores_forward_outputs(tmp_path):
    path = str(tmp_path / "m.ckpt")
    model = net.build(net.desk_mlp(), init_seed=11)
    probe = np.random.default_rng(0).normal(size=(4, 3, 8, 8)).astype(np.float32)
    ref = [o.data.copy() for o in model.forward(probe).logits]
    save_checkpoint(
        Checkpoint("model", "digest-x", model.state_dict(), epoch=1, metric=None), path
    )
    fresh = net.build(net.desk_mlp(), init_seed=99)  # different init
    load_into(fresh, path, "model", expected_digest="digest-x")
    got = [o.data for o in fresh.forward(probe).logits]
    for a, b in zip(ref, got):
        np.testing.assert_array_equal(a, b)


def test_load_into_rejects_kind_digest_and_name_mismatches(tmp_path):
    path = str(tmp_path / "m.ckpt")
    model = net.build(net.desk_mlp(), init_seed=0)
    save_checkpoint(Checkpoint("model", "d1", model.state_dict()), path)
    with pytest.raises(CheckpointError, match="controller"):
        load_into(model, path, "controller")
    with pytest.raises(CheckpointError, match="digest"):
        load_into(model, path, "model", expected_digest="other")
    other = net.build(net.desk_mlp(num_stages=3, multipliers=(1, 1, 2)), init_seed=0)
    with pytest.raises(CheckpointError, match="missing|unknown"):
        load_into(other, path, "model")


def test_scalar_and_empty_metric_roundtrip(tmp_path):
    path = str(tmp_path / "s.ckpt")
    ck = Checkpoint(
        kind="controller",
        config_digest="",
        params={"x": np.float32(3.5) * np.ones((), dtype=np.float32)},
        metric=None,
        extra={"note": "probe"},
    )
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    assert loaded.metric is None
    assert loaded.extra == {"note": "probe"}
    assert loaded.params["x"].shape == ()
    assert float(loaded.params["x"]) == 3.5
