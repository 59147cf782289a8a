"""Round-trip and corruption tests for the RVID and checkpoint formats."""

import numpy as np
import pytest

from vidflow.autodiff import Rng
from vidflow.checkpoint import (FormatError, read_checkpoint, read_rvid,
                                write_checkpoint, write_rvid)


def test_rvid_round_trip_bit_exact(tmp_path):
    rng = Rng(7)
    clip = rng.normal((5, 8, 6, 3))
    path = tmp_path / "clip.rvid"
    write_rvid(path, clip, fps=12.5)
    back, fps = read_rvid(path)
    assert fps == np.float32(12.5)
    assert back.dtype == np.float32
    assert np.array_equal(back.view(np.uint32), clip.view(np.uint32))


def test_rvid_rejects_non_rank4(tmp_path):
    with pytest.raises(ValueError):
        write_rvid(tmp_path / "x.rvid", np.zeros((4, 4, 3), np.float32), 8.0)


def test_rvid_corrupt_magic(tmp_path):
    path = tmp_path / "clip.rvid"
    write_rvid(path, np.zeros((1, 2, 2, 3), np.float32), 8.0)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"JUNK"
    path.write_bytes(raw)
    with pytest.raises(FormatError, match="byte 0"):
        read_rvid(path)


def test_rvid_truncation_reports_offset(tmp_path):
    path = tmp_path / "clip.rvid"
    write_rvid(path, np.ones((2, 3, 3, 3), np.float32), 8.0)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 5])
    with pytest.raises(FormatError, match="byte"):
        read_rvid(path)


def test_rvid_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "clip.rvid"
    write_rvid(path, np.ones((1, 2, 2, 3), np.float32), 8.0)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_rvid(path)


def test_rvid_version_mismatch(tmp_path):
    path = tmp_path / "clip.rvid"
    write_rvid(path, np.ones((1, 2, 2, 3), np.float32), 8.0)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(raw)
    with pytest.raises(FormatError, match="version"):
        read_rvid(path)


def _sample_params():
    rng = Rng(3)
    return {
        "enc.w": rng.normal((3, 3, 3, 2, 4)),
        "enc.b": rng.normal((4,)),
        "head.scale": np.float32(0.5),
        "step": np.array(1200, dtype=np.float32),
    }


def test_checkpoint_round_trip_bit_exact(tmp_path):
    named = _sample_params()
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, named)
    back = read_checkpoint(path)
    assert list(back) == list(named)
    for name, arr in named.items():
        got = back[name]
        want = np.asarray(arr, dtype=np.float32)
        assert got.shape == want.shape
        assert np.array_equal(
            np.asarray(got).view(np.uint32), want.view(np.uint32)), name


def test_checkpoint_preserves_insertion_order(tmp_path):
    named = {"z.last": np.zeros(2, np.float32),
             "a.first": np.ones(3, np.float32),
             "m.middle": np.full(1, 2.0, np.float32)}
    path = tmp_path / "ordered.ckpt"
    write_checkpoint(path, named)
    assert list(read_checkpoint(path)) == ["z.last", "a.first", "m.middle"]


def test_checkpoint_unicode_names(tmp_path):
    named = {"слой.w": np.ones(2, np.float32)}
    path = tmp_path / "u.ckpt"
    write_checkpoint(path, named)
    assert "слой.w" in read_checkpoint(path)


def test_checkpoint_corrupt_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, _sample_params())
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"NOPE"
    path.write_bytes(raw)
    with pytest.raises(FormatError, match="byte 0"):
        read_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path):
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, _sample_params())
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 3])
    with pytest.raises(FormatError, match="byte"):
        read_checkpoint(path)


def test_checkpoint_truncated_header(tmp_path):
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, _sample_params())
    path.write_bytes(path.read_bytes()[:6])
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_checkpoint_duplicate_names_rejected_on_read(tmp_path):
    path = tmp_path / "model.ckpt"
    # Two tensors with the same name, spliced together by hand.
    import struct
    name = "dup".encode()
    rec = struct.pack("<H", len(name)) + name + struct.pack("<BI", 1, 1)
    rec += struct.pack("<f", 1.0)
    blob = b"LTXK" + struct.pack("<II", 1, 2) + rec + rec
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="dup"):
        read_checkpoint(path)


def test_checkpoint_write_rejects_non_finite_name_types(tmp_path):
    with pytest.raises(ValueError):
        write_checkpoint(tmp_path / "x.ckpt", {123: np.zeros(1, np.float32)})


def test_checkpoint_scalar_rank_zero(tmp_path):
    path = tmp_path / "s.ckpt"
    write_checkpoint(path, {"t": np.float32(3.25)})
    back = read_checkpoint(path)
    assert back["t"].shape == ()
    assert float(back["t"]) == 3.25
