from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from da3 import io
from da3.errors import ConfigError


class TestContainer:
    def test_header_layout(self):
        blob = io.encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert blob[:4] == b"DA3T"
        assert blob[4] == 0 and blob[5] == 2
        assert struct.unpack("<2I", blob[6:14]) == (2, 3)
        assert np.frombuffer(blob[14:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    @pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.float64, 1), (np.uint32, 2)])
    def test_dtype_codes(self, dtype, code):
        assert io.encode_tensor(np.zeros(1, dtype))[4] == code

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint32]),
                      hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
    def test_round_trip_bitwise(self, arr):
        back = io.decode_tensor(io.encode_tensor(arr))
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == np.ascontiguousarray(arr).tobytes()

    def test_big_endian_input_is_normalized(self):
        arr = np.arange(4, dtype=">f8")
        back = io.decode_tensor(io.encode_tensor(arr))
        np.testing.assert_array_equal(back, arr)

    @pytest.mark.parametrize("blob", [b"XXXX\x00\x00", b"DA3T\x07\x00", b"DA3T\x00\x01\x02\x00\x00\x00"])
    def test_malformed(self, blob):
        with pytest.raises(ConfigError):
            io.decode_tensor(blob)

    def test_unsupported_dtype(self):
        with pytest.raises(ConfigError):
            io.encode_tensor(np.zeros(2, np.int64))


class TestFiles:
    def test_checkpoint_round_trip(self, tmp_path, rng):
        params = {"a.weight": rng.normal(size=(3, 2)).astype(np.float32),
                  "b.bias": np.arange(4, dtype=np.float64)}
        io.save_checkpoint(tmp_path / "ck", params)
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert set(manifest["params"]) == set(params)
        back = io.load_checkpoint(tmp_path / "ck")
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()

    def test_checkpoint_checksum(self, tmp_path):
        io.save_checkpoint(tmp_path, {"w": np.ones(3, np.float32)})
        f = tmp_path / "p0000.da3t"
        blob = bytearray(f.read_bytes())
        blob[-1] ^= 0xFF
        f.write_bytes(bytes(blob))
        with pytest.raises(ConfigError):
            io.load_checkpoint(tmp_path)

    def test_atomic_write_leaves_original_on_failure(self, tmp_path):
        target = tmp_path / "out.csv"
        target.write_text("old\n")
        with pytest.raises(RuntimeError):
            with io.atomic_open(target, "w") as fh:
                fh.write("partial")
                raise RuntimeError("interrupted")
        assert target.read_text() == "old\n"
        assert [p.name for p in tmp_path.iterdir()] == ["out.csv"]

    def test_csv(self, tmp_path):
        io.write_csv(tmp_path / "x.csv", ["a", "b"], [[1, "x,y"]])
        assert (tmp_path / "x.csv").read_text() == 'a,b\n1,"x,y"\n'

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{nope")
        with pytest.raises(ConfigError):
            io.read_json(tmp_path / "c.json")
