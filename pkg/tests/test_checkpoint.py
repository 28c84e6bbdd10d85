"""Binary checkpoint format: round-trips and corruption detection."""

import hashlib
import struct

import numpy as np
import pytest

from dmvi.checkpoint import (
    MAGIC,
    VERSION,
    apply_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from dmvi.errors import ParseError, ShapeError
from dmvi.models import TrainConfig, build_bundle
from dmvi.rng import RngStream


def _sample_tensors():
    rng = RngStream(0)
    return {
        "enc.fc0.W": rng.normal((4, 8)),
        "enc.fc0.b": np.zeros(8),
        "scalar": np.array(3.5),
        "empty_name_ok": rng.normal((2, 2, 2)),
    }


def test_roundtrip_bitwise(tmp_path):
    p = str(tmp_path / "model.ckpt")
    tensors = _sample_tensors()
    save_checkpoint(p, tensors, b"confighash")
    loaded, h = load_checkpoint(p)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float64
        assert np.array_equal(loaded[name],
                              np.asarray(tensors[name], dtype=np.float64))
    assert h == b"confighash".ljust(32, b"\0")


def test_roundtrip_preserves_exact_bits(tmp_path):
    p = str(tmp_path / "bits.ckpt")
    vals = np.array([0.1, -0.0, np.pi, 1e-300, 1e300])
    save_checkpoint(p, {"v": vals})
    loaded, _ = load_checkpoint(p)
    assert loaded["v"].tobytes() == vals.tobytes()


def test_header_layout(tmp_path):
    p = tmp_path / "hdr.ckpt"
    save_checkpoint(str(p), {"a": np.zeros(3)}, b"\xab" * 32)
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == VERSION
    assert raw[8:40] == b"\xab" * 32
    assert struct.unpack("<I", raw[40:44])[0] == 1
    # Trailing 32 bytes are the digest of everything before them.
    assert raw[-32:] == hashlib.sha256(raw[:-32]).digest()


def test_flipped_byte_detected(tmp_path):
    p = tmp_path / "flip.ckpt"
    save_checkpoint(str(p), _sample_tensors())
    raw = bytearray(p.read_bytes())
    raw[60] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="digest mismatch"):
        load_checkpoint(str(p))


def test_truncated_file_detected(tmp_path):
    p = tmp_path / "trunc.ckpt"
    save_checkpoint(str(p), _sample_tensors())
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ParseError):
        load_checkpoint(str(p))


def test_tiny_file_rejected(tmp_path):
    p = tmp_path / "tiny.ckpt"
    p.write_bytes(b"DMVI")
    with pytest.raises(ParseError, match="too short"):
        load_checkpoint(str(p))


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "magic.ckpt"
    body = b"XXXX" + struct.pack("<I", VERSION) + b"\0" * 32 + struct.pack("<I", 0)
    p.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(ParseError, match="bad magic"):
        load_checkpoint(str(p))


def test_unknown_version_rejected(tmp_path):
    p = tmp_path / "v2.ckpt"
    body = MAGIC + struct.pack("<I", 99) + b"\0" * 32 + struct.pack("<I", 0)
    p.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(ParseError, match="version 99"):
        load_checkpoint(str(p))


def test_error_messages_carry_offsets(tmp_path):
    # Declare one tensor but stop before its payload; the reader should say
    # where it ran out.
    p = tmp_path / "short.ckpt"
    body = (MAGIC + struct.pack("<I", VERSION) + b"\0" * 32
            + struct.pack("<I", 1)
            + struct.pack("<H", 1) + b"w"
            + struct.pack("<I", 1) + struct.pack("<Q", 10))
    p.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(ParseError, match="offset"):
        load_checkpoint(str(p))


def test_apply_checkpoint_restores_parameters(tmp_path):
    cfg = TrainConfig(latent=3, hidden=8, batch=4, seed=5)
    bundle = build_bundle(cfg, data_dim=6, rng=RngStream(5))
    saved = {k: v.data.copy() for k, v in bundle.named_parameters().items()}
    p = str(tmp_path / "b.ckpt")
    save_checkpoint(p, saved)
    # Perturb, then restore.
    for t in bundle.named_parameters().values():
        t.data += 1.0
    tensors, _ = load_checkpoint(p)
    apply_checkpoint(bundle, tensors)
    for k, v in bundle.named_parameters().items():
        assert np.array_equal(v.data, saved[k])


def test_apply_checkpoint_shape_mismatch(tmp_path):
    cfg = TrainConfig(latent=3, hidden=8, batch=4, seed=5)
    bundle = build_bundle(cfg, data_dim=6, rng=RngStream(5))
    tensors = {k: np.zeros((1, 1)) for k in bundle.named_parameters()}
    with pytest.raises(ShapeError, match="does not match"):
        apply_checkpoint(bundle, tensors)


def test_apply_checkpoint_missing_tensor():
    cfg = TrainConfig(latent=3, hidden=8, batch=4, seed=5)
    bundle = build_bundle(cfg, data_dim=6, rng=RngStream(5))
    with pytest.raises(ShapeError, match="missing"):
        apply_checkpoint(bundle, {})
