import os

import numpy as np
import pytest

from wavmtl import checkpoint as ck


def _sample():
    rng = np.random.default_rng(0)
    return ck.Checkpoint({"kind": "sre", "note": "ü"},
                         {"a.weight": rng.standard_normal((3, 4)),
                          "a.bias": rng.standard_normal(4),
                          "scalar": np.array(2.5),
                          "empty": np.zeros((0, 3))})


def test_round_trip_values_and_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    src = _sample()
    ck.save(path, src)
    raw = path.read_bytes()
    assert raw[:8] == b"SREMTL01"
    back = ck.load(path)
    assert back.config == src.config and back.config_hash == src.config_hash
    for name, value in src.tensors.items():
        np.testing.assert_array_equal(back.tensors[name], value.astype(np.float32))
        assert back.tensors[name].shape == value.shape


def test_save_load_save_is_byte_identical(tmp_path):
    ck.save(tmp_path / "a", _sample())
    ck.save(tmp_path / "b", ck.load(tmp_path / "a"))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("offset", [8, 20, 60, -10, -1])
def test_any_flipped_byte_is_detected(offset):
    data = bytearray(ck.encode(_sample()))
    data[offset] ^= 0x40
    with pytest.raises(ck.CheckpointError):
        ck.decode(bytes(data))


def test_truncation_and_garbage():
    data = ck.encode(_sample())
    for cut in (3, 12, len(data) // 2, len(data) - 1):
        with pytest.raises(ck.CheckpointError):
            ck.decode(data[:cut])
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode(b"PK\x03\x04" + data[4:])


def test_failed_write_leaves_nothing_behind(tmp_path, monkeypatch):
    target = tmp_path / "x.ckpt"

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        ck.save(target, _sample())
    assert list(tmp_path.iterdir()) == []


def test_unwritable_directory(tmp_path):
    with pytest.raises(OSError):
        ck.save(tmp_path / "no" / "such" / "dir.ckpt", _sample())


def test_subset_strips_prefix():
    c = ck.Checkpoint({}, {"sre.w": np.ones(1), "sre.b": np.zeros(1), "heads.kws.w": np.ones(2)})
    assert sorted(c.subset("sre")) == ["b", "w"]
    assert list(c.subset("heads.kws")) == ["w"]
