import struct

import numpy as np
import pytest
import torch

from ts2tc.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointVersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from ts2tc.errors import CheckpointError
from ts2tc.models import MlpClassifier, Nbtsf, SpecDecoder, SpecEncoder, SpecModelSpec, TemporalEncoderSpec, build_temporal
from ts2tc.nn import ParamStore


def _store(seed=0):
    t = build_temporal(TemporalEncoderSpec(filters=2), anchor_len=10, hidden=(8, 8, 8), seed=seed)
    spec = SpecModelSpec(n_patches=6, embed_dim=8)
    nb = Nbtsf(16, 24, l=4, seed=seed)
    return ParamStore({
        "theta": t.encoder, "delta": t.decoder,
        "theta_E": SpecEncoder(spec, seed), "theta_2": SpecDecoder(spec, seed),
        "nbtsf": nb, "mu": MlpClassifier(nb.k * nb.l, 8, 2, seed),
    })


def test_roundtrip_bit_identical(tmp_path):
    store = _store(1)
    path = save_checkpoint(store, tmp_path / "a.ckpt", config={"gamma": 0.4}, seed=7)
    fresh = _store(2)
    ckpt = load_checkpoint(path, fresh)
    assert ckpt.seed == 7 and ckpt.config == {"gamma": 0.4} and ckpt.version == VERSION
    a, b = store.state_dict(), fresh.state_dict()
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_layout_header(tmp_path):
    blob = encode_checkpoint({"w": torch.arange(3.0)})
    assert blob[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", blob[8:20])
    assert version == VERSION
    payload = blob[20 + hlen : -32]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f8"), [0, 1, 2])


def test_bumped_version_rejected():
    blob = bytearray(encode_checkpoint({"w": torch.ones(2)}))
    blob[8:12] = struct.pack("<I", VERSION + 1)
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(blob))


@pytest.mark.parametrize("cut", [5, 40, -1, -33])
def test_truncated_file_leaves_store_untouched(tmp_path, cut):
    path = save_checkpoint(_store(1), tmp_path / "b.ckpt")
    blob = path.read_bytes()
    path.write_bytes(blob[:cut])
    target = _store(3)
    before = target.state_dict()
    with pytest.raises(CheckpointError):
        load_checkpoint(path, target)
    after = target.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_corrupted_byte_detected(tmp_path):
    blob = bytearray(encode_checkpoint({"w": torch.ones(4)}))
    blob[-40] ^= 0xFF
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(blob))


def test_bad_magic():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTACKPT" + bytes(60))


def test_mismatched_model_rejected(tmp_path):
    path = save_checkpoint({"theta.x": torch.ones(2)}, tmp_path / "c.ckpt")
    target = _store()
    before = target.state_dict()
    with pytest.raises(CheckpointError):
        load_checkpoint(path, target)
    assert all(torch.equal(before[k], v) for k, v in target.state_dict().items())


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")
