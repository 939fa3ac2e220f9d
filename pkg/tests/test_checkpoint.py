"""Binary checkpoint container."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from envfield import checkpoint
from envfield.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


class TestRoundTrip:
    def test_mixed_dtypes(self, tmp_path, rng):
        tensors = {
            "a": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(7),
            "c": np.arange(6, dtype=np.int32).reshape(2, 3),
            "scalar": np.array(2.5),
        }
        save_checkpoint(tmp_path / "x.ckpt", {"kind": "test", "n": 3}, tensors)
        header, out = load_checkpoint(tmp_path / "x.ckpt")
        assert header == {"kind": "test", "n": "3"}
        assert list(out) == list(tensors)
        for k, v in tensors.items():
            np.testing.assert_array_equal(out[k], v)
        assert out["a"].dtype == np.float32 and out["b"].dtype == np.float64 and out["c"].dtype == np.int64

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
    @settings(max_examples=30, deadline=None)
    def test_any_float64_array(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("ck") / "x.ckpt"
        save_checkpoint(path, {}, {"t": arr})
        np.testing.assert_array_equal(load_checkpoint(path)[1]["t"], arr)

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {"k": "v"}, {"t": np.array([1.0], dtype=np.float32)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        assert raw[:8] == b"ENVFLD\x00\x01"
        assert int.from_bytes(raw[8:12], "little") == len(b"k = v")
        assert raw[-4:] == np.array([1.0], dtype="<f4").tobytes()

    def test_append(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": 1}, {"t": np.zeros(2)})
        checkpoint.append_tensors(path, {"u": np.ones(3)}, {"b": 2})
        header, tensors = load_checkpoint(path)
        assert header == {"a": "1", "b": "2"} and set(tensors) == {"t", "u"}


class TestHeader:
    def test_parse_skips_comments_and_blanks(self):
        assert checkpoint.parse_header("# note\n\n a = 1 \nb=x = y\n") == {"a": "1", "b": "x = y"}

    def test_parse_rejects_bare_line(self):
        with pytest.raises(CheckpointError, match="line 2"):
            checkpoint.parse_header("a = 1\nbroken\n")

    def test_multiline_value_rejected(self):
        with pytest.raises(CheckpointError):
            checkpoint.format_header({"a": "x\ny"})


class TestErrors:
    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="not an envfield checkpoint"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_unsupported_version(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"ENVFLD\x00\x09" + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="version 9"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {}, {"t": np.zeros(10)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        (tmp_path / "y.ckpt").write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "y.ckpt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError, match="unsupported dtype"):
            save_checkpoint(tmp_path / "x.ckpt", {}, {"t": np.zeros(2, dtype=np.complex64)})
