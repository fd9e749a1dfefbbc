import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scod.errors import DataError
from scod.tensor_io import (
    BadCell, BadHeader, BadMagic, DatasetBundle, DimOverflow, NonFinite, RaggedRow,
    TrailingBytes, Truncated, decode_tensor, encode_tensor, load_bundle, load_csv_matrix,
    load_tensor, save_bundle, save_tensor,
)


def header(rank, dims, dtype=1):
    return b"SCT1" + struct.pack("<BBxx", dtype, rank) + struct.pack(f"<{len(dims)}Q", *dims)


def test_identity_round_trip(tmp_path):
    p = tmp_path / "t.sct"
    p.write_bytes(header(2, [2, 3]) + np.arange(1, 7, dtype="<f4").tobytes())
    t = load_tensor(p)
    assert t.shape == (2, 3)
    assert t.ravel().tolist() == [1, 2, 3, 4, 5, 6]


@pytest.mark.parametrize("dims,size", [([1], 20), ([2, 2], 40), ([3, 1, 2], 8 + 24 + 24)])
def test_file_size_follows_layout(tmp_path, dims, size):
    # 8-byte header (magic, dtype, rank, pad) + 8 per dim + 4 per value
    p = tmp_path / "t.sct"
    save_tensor(np.zeros(dims, dtype=np.float32), p)
    assert p.stat().st_size == size == 8 + 8 * len(dims) + 4 * int(np.prod(dims))


def test_exact_bytes():
    buf = encode_tensor(np.array([1.5], dtype=np.float32))
    assert buf == b"SCT1\x01\x01\x00\x00" + (1).to_bytes(8, "little") + struct.pack("<f", 1.5)


def test_bad_magic(tmp_path):
    p = tmp_path / "t.sct"
    p.write_bytes(b"XXXX" + header(1, [1])[4:] + b"\0" * 4)
    with pytest.raises(BadMagic) as e:
        load_tensor(p)
    assert e.value.offset == 0


def test_truncated_payload():
    buf = header(1, [8]) + np.zeros(7, dtype="<f4").tobytes()
    with pytest.raises(Truncated) as e:
        decode_tensor(buf)
    assert e.value.offset == len(buf)


def test_truncated_header_and_dims():
    with pytest.raises(Truncated):
        decode_tensor(b"SCT1\x01")
    with pytest.raises(Truncated):
        decode_tensor(header(2, [2]))


def test_trailing_bytes():
    buf = header(1, [2]) + np.zeros(2, dtype="<f4").tobytes()
    with pytest.raises(TrailingBytes) as e:
        decode_tensor(buf + b"\0")
    assert e.value.offset == len(buf)


@pytest.mark.parametrize("rank", [0, 5])
def test_bad_rank(rank):
    with pytest.raises(BadHeader):
        decode_tensor(header(rank, [1] * rank))


def test_bad_dtype_and_padding():
    with pytest.raises(BadHeader):
        decode_tensor(header(1, [1], dtype=2) + b"\0" * 4)
    buf = bytearray(header(1, [1]) + b"\0" * 4)
    buf[6] = 1
    with pytest.raises(BadHeader):
        decode_tensor(bytes(buf))


def test_dim_overflow_is_rejected_before_reading():
    with pytest.raises(DimOverflow):
        decode_tensor(header(2, [2 ** 40, 2 ** 40]))


def test_zero_dim_rejected():
    with pytest.raises(BadHeader):
        decode_tensor(header(2, [2, 0]))


def test_nonfinite_strict_and_tolerated():
    buf = encode_tensor(np.array([1.0, np.nan, 2.0], dtype=np.float32))
    with pytest.raises(NonFinite) as e:
        decode_tensor(buf)
    assert e.value.offset == 16 + 4
    t = decode_tensor(buf, allow_nonfinite=True)
    assert np.isnan(t[1])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_round_trip_bit_exact(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_round_trip_million_floats(tmp_path, rng):
    arr = rng.standard_normal(10 ** 6).astype(np.float32)
    p = tmp_path / "big.sct"
    save_tensor(arr, p)
    assert load_tensor(p).tobytes() == arr.tobytes()


def test_negative_zero_survives():
    arr = np.array([-0.0, 0.0], dtype=np.float32)
    assert decode_tensor(encode_tensor(arr)).tobytes() == arr.tobytes()


def test_csv(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2\n3,4\n")
    assert load_csv_matrix(p).tolist() == [[1, 2], [3, 4]]
    p.write_text("1,2\n3\n")
    with pytest.raises(RaggedRow) as e:
        load_csv_matrix(p)
    assert e.value.row == 1
    p.write_text("1,a\n")
    with pytest.raises(BadCell) as e:
        load_csv_matrix(p)
    assert (e.value.row, e.value.col) == (0, 1)


def test_csv_expected_cols(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2,3\n")
    with pytest.raises(RaggedRow):
        load_csv_matrix(p, expected_cols=2)


def test_bundle_validation():
    with pytest.raises(DataError):
        DatasetBundle("x", np.zeros((3, 2)), np.zeros((4, 5)))
    with pytest.raises(DataError):
        DatasetBundle("x", np.zeros((3, 2)), np.zeros((3, 5)), labels=[0, 1])
    with pytest.raises(DataError):
        DatasetBundle("x", np.zeros((3, 2)), np.zeros((3, 5)), labels=[0, 1, 2])


def test_bundle_round_trip(tmp_path, rng):
    b = DatasetBundle("id", rng.standard_normal((5, 3)).astype(np.float32),
                      rng.standard_normal((5, 4)).astype(np.float32), [0, 1, 2, 0, 1])
    paths = save_bundle(b, tmp_path)
    back = load_bundle("id", paths)
    assert back.logits.tobytes() == b.logits.tobytes()
    assert back.features.tobytes() == b.features.tobytes()
    assert back.labels.tolist() == [0, 1, 2, 0, 1]
