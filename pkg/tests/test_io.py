import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgevlm import checkpoint, datasets
from edgevlm.config import ModelConfig
from edgevlm.errors import (BadMagicError, CheckpointError, DatasetError, TensorSetError,
                            TruncatedCheckpointError, UnsupportedVersionError)
from edgevlm.model import expected_shapes, init_weights

from conftest import tiny_config
from oracles import roundtrip_is_exact


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_bit_exact(tmp_path_factory, seed):
    assert roundtrip_is_exact(seed, tmp_path_factory.mktemp("ckpt"))


def test_header_layout(tmp_path):
    cfg = tiny_config()
    w = init_weights(cfg, 0)
    buf = checkpoint.encode(w, cfg)
    assert buf[:4] == b"OVLM"
    version, clen = struct.unpack("<II", buf[4:12])
    assert version == 1
    assert ModelConfig.from_json(buf[12:12 + clen].decode()) == cfg
    (count,) = struct.unpack("<I", buf[12 + clen:16 + clen])
    assert count == len(expected_shapes(cfg))
    pos = 16 + clen
    (nlen,) = struct.unpack("<H", buf[pos:pos + 2])
    name = buf[pos + 2:pos + 2 + nlen].decode()
    assert name == next(iter(expected_shapes(cfg)))
    pos += 2 + nlen
    ndim = buf[pos]
    dims = struct.unpack(f"<{ndim}I", buf[pos + 1:pos + 1 + 4 * ndim])
    assert dims == w[name].shape and buf[pos + 1 + 4 * ndim] == 0
    start = pos + 2 + 4 * ndim
    np.testing.assert_array_equal(np.frombuffer(buf[start:start + 4 * w[name].size], "<f4"), w[name].data.ravel())


def test_truncation_by_one_byte(tmp_path):
    cfg = tiny_config()
    buf = checkpoint.encode(init_weights(cfg, 0), cfg)
    path = tmp_path / "t.ovlm"
    path.write_bytes(buf[:-1])
    with pytest.raises(TruncatedCheckpointError, match="lm.head"):
        checkpoint.load(path)


def test_every_truncation_is_a_typed_error():
    cfg = tiny_config()
    buf = checkpoint.encode(init_weights(cfg, 0), cfg)
    for cut in list(range(0, 64)) + list(range(64, len(buf), 97)):
        with pytest.raises(CheckpointError):
            checkpoint.decode(buf[:cut])


def test_magic_version_and_trailing_bytes():
    cfg = tiny_config()
    buf = checkpoint.encode(init_weights(cfg, 0), cfg)
    with pytest.raises(BadMagicError):
        checkpoint.decode(b"GGUF" + buf[4:])
    with pytest.raises(UnsupportedVersionError):
        checkpoint.decode(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.decode(buf + b"\0")


def test_corrupt_headers_never_overallocate():
    """Huge declared sizes must fail on the bounds check, before any allocation."""
    cfg = tiny_config()
    buf = bytearray(checkpoint.encode(init_weights(cfg, 0), cfg))
    clen = struct.unpack("<I", buf[8:12])[0]
    huge_cfg = bytes(buf[:8]) + struct.pack("<I", 2**32 - 1) + bytes(buf[12:])
    with pytest.raises(TruncatedCheckpointError):
        checkpoint.decode(huge_cfg)
    pos = 16 + clen
    nlen = struct.unpack("<H", buf[pos:pos + 2])[0]
    dims_at = pos + 2 + nlen + 1
    bad = bytearray(buf)
    bad[dims_at:dims_at + 4] = struct.pack("<I", 2**31)
    with pytest.raises(TruncatedCheckpointError):
        checkpoint.decode(bytes(bad))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_fuzzed_bytes_raise_typed_errors(data):
    cfg = tiny_config()
    buf = bytearray(checkpoint.encode(init_weights(cfg, 0), cfg))
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(buf) - 1))
        buf[i] = data.draw(st.integers(0, 255))
    try:
        checkpoint.decode(bytes(buf))
    except CheckpointError:
        pass


def test_strategy_mismatch_lists_missing_conv_weight(tmp_path):
    cfg = ModelConfig()
    path = tmp_path / "r9.ovlm"
    checkpoint.save(init_weights(cfg, 0), cfg, path)
    with pytest.raises(TensorSetError, match=r"missing \['projector.conv.weight'\]"):
        checkpoint.load(path, expect=cfg.with_strategy("conv1d", 9))
    with pytest.raises(TensorSetError):
        checkpoint.encode(init_weights(cfg, 0), cfg.with_strategy("conv1d", 9))


def test_expected_tensor_sets_per_strategy():
    base = ModelConfig()
    sets = {k: set(expected_shapes(base.with_strategy(k, 9))) for k in ("reshape", "conv1d", "conv2d")}
    assert sets["conv1d"] - sets["reshape"] == {"projector.conv.weight"}
    assert sets["conv1d"] == sets["conv2d"]
    assert expected_shapes(base.with_strategy("conv2d", 9))["projector.conv.weight"] == (64, 64, 9, 1)
    assert expected_shapes(base)["projector.fc1.weight"] == (9 * 64, 128)


def test_header_summary(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "m.ovlm"
    w = init_weights(cfg, 0)
    checkpoint.save(w, cfg, path)
    head = checkpoint.header(path)
    assert [t["name"] for t in head["tensors"]] == list(expected_shapes(cfg))
    assert head["parameters"] == sum(t.size for t in w.values())


# -- JSONL datasets -----------------------------------------------------------
def test_empty_dataset_is_an_error(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(DatasetError):
        datasets.read_jsonl_dataset(tmp_path / "e.jsonl", "caption")
    with pytest.raises(DatasetError):
        datasets.read_jsonl_dataset(tmp_path / "missing.jsonl", "caption")


def test_bad_lines_are_skipped_with_line_numbers(tmp_path):
    good = json.dumps({"image": "a.ppm", "prompt": "", "response": "x"})
    (tmp_path / "d.jsonl").write_text(f"{good}\n{{not json\n{good}\n")
    ds = datasets.read_jsonl_dataset(tmp_path / "d.jsonl", "sft")
    assert len(ds) == 2 and len(ds.warnings) == 1 and ":2:" in ds.warnings[0]


def test_dpo_schema_requires_all_fields(tmp_path):
    full = {"image": "a.ppm", "prompt": "p", "original": "o", "edited": "e"}
    partial = {k: v for k, v in full.items() if k != "edited"}
    (tmp_path / "d.jsonl").write_text(json.dumps(full) + "\n" + json.dumps(partial) + "\n")
    ds = datasets.read_jsonl_dataset(tmp_path / "d.jsonl", "dpo")
    assert ds.records == [full] and "edited" in ds.warnings[0]


def test_synthetic_dpo_files(tmp_path):
    path = datasets.write_synthetic_dpo(tmp_path, 3, 24, seed=2)
    ds = datasets.read_jsonl_dataset(path, "dpo")
    assert len(ds) == 3
    images = datasets.load_images(ds)
    assert len(images) == 3
    for rec in ds.records:
        assert rec["original"] != rec["edited"]
        assert rec["original"].split()[2:] == rec["edited"].split()[2:]
