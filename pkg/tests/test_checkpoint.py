import struct

import numpy as np
import pytest

from dcac.checkpoint import (FORMAT_VERSION, Checkpoint, from_bytes, load_checkpoint,
                             save_checkpoint, to_bytes)
from dcac.errors import CheckpointError


def sample():
    rng = np.random.default_rng(0)
    return Checkpoint(
        meta={"cursor": {"phase": 2, "epoch": 3}, "note": "x"},
        arrays={"param:w": rng.normal(size=(2, 3, 1, 1)), "param:scalar": np.array(1.5),
                "buffer:running_var": np.ones(3), "opt.m:w": rng.normal(size=(2, 3, 1, 1))},
    )


def test_save_load_save_byte_identical(tmp_path):
    save_checkpoint(tmp_path / "a.dcac", sample())
    loaded = load_checkpoint(tmp_path / "a.dcac")
    assert loaded == sample()
    save_checkpoint(tmp_path / "b.dcac", loaded)
    assert (tmp_path / "a.dcac").read_bytes() == (tmp_path / "b.dcac").read_bytes()


def test_array_order_and_header():
    buf = to_bytes(sample())
    assert buf[:4] == b"DCAC"
    assert struct.unpack("<I", buf[4:8])[0] == FORMAT_VERSION
    assert list(from_bytes(buf).arrays) == list(sample().arrays)


def test_float32_export_keeps_optimizer_and_buffers_double():
    back = from_bytes(to_bytes(sample(), dtype="f4"))
    assert back.arrays["param:w"].dtype == np.float32
    assert back.arrays["opt.m:w"].dtype == np.float64
    assert back.arrays["buffer:running_var"].dtype == np.float64
    assert to_bytes(back, dtype="f4") == to_bytes(sample(), dtype="f4")


@pytest.mark.parametrize("cut", [1, 10, 100])
def test_truncated_rejected(cut):
    buf = to_bytes(sample())
    with pytest.raises(CheckpointError):
        from_bytes(buf[:-cut])


def test_flipped_bit_rejected():
    buf = bytearray(to_bytes(sample()))
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        from_bytes(bytes(buf))


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOPE" + to_bytes(sample())[4:])


def test_version_mismatch_refused():
    with pytest.raises(CheckpointError, match="format_version"):
        from_bytes(to_bytes(Checkpoint(meta={}, format_version=FORMAT_VERSION + 1)))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.dcac")


def test_group_strips_prefix():
    assert set(sample().group("param")) == {"w", "scalar"}
