import struct

import numpy as np
import pytest

from tacda import nn
from tacda.checkpoint import MAGIC, Checkpoint, CheckpointError, checkpoint_load, checkpoint_save, dumps, loads
from tacda.pipeline import predict


@pytest.fixture
def ckpt():
    arch = nn.Architecture(2, 6, hidden=4, head_hidden=(3,))
    bundle = nn.ModelBundle.initialize(arch, np.random.default_rng(0))
    opt = nn.Adam(1e-3)
    grads = {k: np.ones_like(v) for k, v in bundle["predictor"].items()}
    opt.step(bundle["predictor"], grads)
    return Checkpoint(bundle, {"predictor": opt.state}, {"lam": 0.1}, "abc123", {"stage": "pretrain"})


def test_round_trip_is_bit_identical(ckpt, tmp_path):
    back = checkpoint_load(checkpoint_save(ckpt, tmp_path / "m.ckpt"))
    assert back.bundle.arch == ckpt.bundle.arch
    for g in ckpt.bundle.groups:
        for k, v in ckpt.bundle[g].items():
            np.testing.assert_array_equal(back.bundle[g][k], v)
    st = back.optimizers["predictor"]
    assert st.step == 1 and st.lr == 1e-3
    for k, v in ckpt.optimizers["predictor"].m.items():
        np.testing.assert_array_equal(st.m[k], v)
    assert back.config == {"lam": 0.1} and back.config_hash == "abc123" and back.meta["stage"] == "pretrain"


def test_predictions_identical_after_reload(ckpt, tmp_path):
    x = np.random.default_rng(1).normal(size=(5, 2, 6))
    back = checkpoint_load(checkpoint_save(ckpt, tmp_path / "m.ckpt"))
    for enc in ("source", "target"):
        np.testing.assert_array_equal(predict(back.bundle, x, enc), predict(ckpt.bundle, x, enc))


def test_truncation_detected(ckpt):
    raw = dumps(ckpt)
    for cut in (4, 30, len(raw) - 8):
        with pytest.raises(CheckpointError, match="truncated"):
            loads(raw[:cut])


def test_corrupt_payload_detected(ckpt):
    raw = bytearray(dumps(ckpt))
    raw[-3] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        loads(bytes(raw))


def test_bad_magic_detected(ckpt):
    raw = b"XXXXXXXX" + dumps(ckpt)[8:]
    with pytest.raises(CheckpointError, match="bad magic"):
        loads(raw)


def test_version_mismatch_detected(ckpt):
    raw = dumps(ckpt)
    raw = MAGIC + struct.pack("<I", 99) + raw[12:]
    with pytest.raises(CheckpointError, match="version mismatch"):
        loads(raw)


def test_config_hash_mismatch_refused(ckpt):
    raw = dumps(ckpt)
    assert loads(raw, expected_config_hash="abc123").config_hash == "abc123"
    with pytest.raises(CheckpointError, match="config hash mismatch"):
        loads(raw, expected_config_hash="other")
