"""Checkpoint container: bit-exact round trips and format validation."""

import numpy as np
import pytest

from styleroute.checkpoint import CheckpointError, FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "w1": rng.standard_normal((5, 7)),
        "b": rng.standard_normal(7),
        "counts": np.arange(4, dtype=np.int64),
        "half": rng.standard_normal(3).astype(np.float32),
    }
    meta = {"seed": 3, "iteration": 17, "config": {"lr": 1e-4}}
    path = tmp_path / "x.sxpt"
    save_checkpoint(path, arrays, meta)
    loaded, got_meta = load_checkpoint(path)
    assert got_meta == meta
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert (loaded[name] == arrays[name]).all()


def test_save_load_save_is_byte_identical(tmp_path):
    arrays = {"a": np.linspace(0, 1, 10)}
    p1, p2 = tmp_path / "a.sxpt", tmp_path / "b.sxpt"
    save_checkpoint(p1, arrays, {"seed": 0})
    loaded, meta = load_checkpoint(p1)
    save_checkpoint(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_and_version():
    assert MAGIC == b"SXPT"
    assert FORMAT_VERSION == 1


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.sxpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_version_rejected(tmp_path):
    path = tmp_path / "v9.sxpt"
    save_checkpoint(path, {"a": np.zeros(2)}, {})
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert "version" in str(err.value)


def test_overlapping_offsets_rejected(tmp_path):
    import json

    path = tmp_path / "overlap.sxpt"
    save_checkpoint(path, {"a": np.zeros(4), "b": np.ones(4)}, {})
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12 : 12 + header_len])
    header["arrays"][1]["offset"] = 8  # overlaps array a's 32 bytes
    new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    patched = raw[:8] + len(new_header).to_bytes(4, "little") + new_header + raw[12 + header_len :]
    path.write_bytes(patched)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "c.sxpt", {"a": np.zeros(2, dtype=np.int16)}, {})
