import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gfss import io


@given(arrays(st.sampled_from([np.float32, np.float64]),
              st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple)))
def test_gfst_roundtrip(a):
    b = io.decode_tensor(io.encode_tensor(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    np.testing.assert_array_equal(b, a)


def test_gfst_header_layout():
    buf = io.encode_tensor(np.array([1.0], dtype=np.float32))
    assert buf[:4] == b"GFST"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert buf[8] == 0 and buf[9] == 1
    assert int.from_bytes(buf[10:18], "little") == 1
    assert len(buf) == 18 + 4


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:8] + b"\x07" + b[9:],
    lambda b: b[:-1],
])
def test_gfst_rejects_corruption(mangle):
    buf = io.encode_tensor(np.zeros((2, 2)))
    with pytest.raises(io.FormatError):
        io.decode_tensor(mangle(buf))


def test_integer_labels_are_stored_as_float32():
    out = io.decode_tensor(io.encode_tensor(np.array([0, 5, 7], dtype=np.int64)))
    assert out.dtype == np.float32
    assert out.tolist() == [0, 5, 7]


def test_fresh_dir(tmp_path):
    d = tmp_path / "out"
    io.fresh_dir(d)
    io.fresh_dir(d)  # empty is fine
    (d / "x").write_text("1")
    with pytest.raises(FileExistsError):
        io.fresh_dir(d)


def test_manifest_is_sorted(tmp_path):
    p = tmp_path / "m.json"
    io.save_manifest(p, {"b": 1, "a": 2})
    assert p.read_text().index('"a"') < p.read_text().index('"b"')
    assert io.load_manifest(p) == {"a": 2, "b": 1}
