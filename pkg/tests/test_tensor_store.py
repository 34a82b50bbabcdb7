import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_spec
from oracles import bf16_bits, half_bits

from fusekit.errors import CheckpointFormatError, ValidationError
from fusekit.synth import generate_synthetic_checkpoint
from fusekit.tensor_store import (
    Dtype,
    TensorMap,
    TensorRecord,
    encode_header,
    from_f32,
    read_checkpoint,
    read_header,
    to_f32,
    validate_compat,
    write_checkpoint,
)


def _raw_file(path, header: dict, data: bytes = b"") -> None:
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + data)


def f32_record(name, values, shape=None):
    values = np.asarray(values, dtype=np.float32)
    return TensorRecord(name, Dtype.F32, shape or values.shape, from_f32(values, Dtype.F32))


def test_dtype_widths():
    assert [d.byte_width for d in (Dtype.F32, Dtype.F16, Dtype.BF16, Dtype.F64)] == [4, 2, 2, 8]


def test_single_tensor_round_trip(tmp_path):
    path = tmp_path / "w.safetensors"
    rec = f32_record("w", [1.0, 0.0, 0.0, 1.0], (2, 2))
    write_checkpoint(TensorMap([rec]), path)
    back = read_checkpoint(path)
    assert list(back) == ["w"]
    assert back["w"].shape == (2, 2)
    assert back["w"].data.tobytes() == struct.pack("<4f", 1.0, 0.0, 0.0, 1.0)


def test_empty_map_round_trip(tmp_path):
    path = tmp_path / "empty.safetensors"
    write_checkpoint(TensorMap(), path)
    back = read_checkpoint(path)
    assert len(back) == 0 and back.metadata == {}
    assert read_header(path).entries == {}


def test_synthetic_round_trip_is_byte_exact(tmp_path):
    tmap = generate_synthetic_checkpoint(small_spec(7))
    before = {n: r.data.tobytes() for n, r in tmap.items()}
    path = tmp_path / "s.safetensors"
    write_checkpoint(tmap, path)
    back = read_checkpoint(path)
    assert {n: r.data.tobytes() for n, r in back.items()} == before
    assert back == tmap


def test_lazy_read_equals_eager(tmp_path):
    tmap = generate_synthetic_checkpoint(small_spec(3))
    path = tmp_path / "s.safetensors"
    write_checkpoint(tmap, path)
    lazy = read_checkpoint(path, lazy=True)
    assert all(r.is_lazy for r in lazy.values())
    assert lazy == read_checkpoint(path)


def test_writes_are_deterministic(tmp_path):
    tmap = generate_synthetic_checkpoint(small_spec(5))
    a, b = tmp_path / "a", tmp_path / "b"
    write_checkpoint(tmap, a)
    write_checkpoint(TensorMap(list(tmap.values())[::-1], tmap.metadata), b)
    assert a.read_bytes() == b.read_bytes()


def test_header_is_sorted_and_aligned():
    raw = encode_header([("b", Dtype.F32, (2,)), ("a", Dtype.F16, (3,))], {"z": "1"})
    (n,) = struct.unpack("<Q", raw[:8])
    assert (8 + n) % 8 == 0
    text = raw[8:].decode().rstrip()
    assert text.index('"__metadata__"') < text.index('"a"') < text.index('"b"')
    assert json.loads(text)["b"]["data_offsets"] == [6, 14]


def test_metadata_round_trip(tmp_path):
    tmap = TensorMap([f32_record("x", [1.0])], {"format": "pt", "note": "hi"})
    write_checkpoint(tmap, tmp_path / "m")
    assert read_checkpoint(tmp_path / "m").metadata == {"format": "pt", "note": "hi"}


def test_zero_element_tensors(tmp_path):
    tmap = TensorMap(
        [TensorRecord("e", Dtype.F16, (0, 4), b""), f32_record("x", [2.0]), TensorRecord("z", Dtype.F64, (0,), b"")]
    )
    write_checkpoint(tmap, tmp_path / "z")
    assert read_checkpoint(tmp_path / "z") == tmap


def test_map_orders_names_and_rejects_duplicates():
    tmap = TensorMap([f32_record("b", [1.0]), f32_record("a", [2.0])])
    assert list(tmap) == ["a", "b"]
    assert tmap.numel == 2
    with pytest.raises(ValidationError, match="duplicate"):
        TensorMap([f32_record("a", [1.0]), f32_record("a", [2.0])])


def test_record_checks_buffer_length():
    with pytest.raises(ValidationError, match="needs 8"):
        TensorRecord("w", Dtype.F32, (2,), b"\0" * 4)
    with pytest.raises(ValidationError):
        TensorRecord("", Dtype.F32, (0,), b"")


# malformed files -------------------------------------------------------------


def test_too_short(tmp_path):
    (tmp_path / "f").write_bytes(b"\x01\x02")
    with pytest.raises(CheckpointFormatError, match="too short"):
        read_checkpoint(tmp_path / "f")


def test_header_length_beyond_file(tmp_path):
    (tmp_path / "f").write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(CheckpointFormatError, match="exceeds file size"):
        read_checkpoint(tmp_path / "f")


def test_header_not_json(tmp_path):
    raw = b"{not json"
    (tmp_path / "f").write_bytes(struct.pack("<Q", len(raw)) + raw)
    with pytest.raises(CheckpointFormatError, match="not valid JSON"):
        read_checkpoint(tmp_path / "f")


def test_unknown_dtype_names_tensor(tmp_path):
    _raw_file(tmp_path / "f", {"w": {"dtype": "I8", "shape": [1], "data_offsets": [0, 1]}}, b"\0")
    with pytest.raises(CheckpointFormatError, match="'w'.*unknown dtype"):
        read_checkpoint(tmp_path / "f")


def test_overlapping_offsets(tmp_path):
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    _raw_file(tmp_path / "f", header, b"\0" * 12)
    with pytest.raises(CheckpointFormatError, match="'b'.*offset 4 overlaps"):
        read_checkpoint(tmp_path / "f")


def test_out_of_bounds_offsets(tmp_path):
    _raw_file(tmp_path / "f", {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 4)
    with pytest.raises(CheckpointFormatError, match="'a'.*beyond data section"):
        read_checkpoint(tmp_path / "f")


def test_gap_and_trailing_bytes(tmp_path):
    _raw_file(tmp_path / "g", {"a": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, b"\0" * 8)
    with pytest.raises(CheckpointFormatError, match="gap"):
        read_checkpoint(tmp_path / "g")
    _raw_file(tmp_path / "t", {"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, b"\0" * 6)
    with pytest.raises(CheckpointFormatError, match="trailing"):
        read_checkpoint(tmp_path / "t")


def test_offsets_must_match_shape(tmp_path):
    _raw_file(tmp_path / "f", {"a": {"dtype": "F16", "shape": [3], "data_offsets": [0, 4]}}, b"\0" * 4)
    with pytest.raises(CheckpointFormatError, match="'a'.*needs 6"):
        read_checkpoint(tmp_path / "f")


def test_duplicate_names_in_header(tmp_path):
    entry = '{"dtype":"F32","shape":[1],"data_offsets":[0,4]}'
    raw = ('{"a":' + entry + ',"a":' + entry + "}").encode()
    (tmp_path / "f").write_bytes(struct.pack("<Q", len(raw)) + raw + b"\0" * 4)
    with pytest.raises(CheckpointFormatError, match="duplicate tensor name 'a'"):
        read_checkpoint(tmp_path / "f")


def test_truncated_data(tmp_path):
    tmap = generate_synthetic_checkpoint(small_spec(1))
    write_checkpoint(tmap, tmp_path / "f")
    raw = (tmp_path / "f").read_bytes()
    (tmp_path / "f").write_bytes(raw[:-3])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(tmp_path / "f")


# conversions -----------------------------------------------------------------


def _bits_record(dtype, bits):
    arr = np.asarray(bits, dtype=dtype.bits_dtype)
    return TensorRecord("t", dtype, arr.shape, arr)


def test_conversion_examples():
    assert list(to_f32(f32_record("t", [1.5, -2.0]))) == [1.5, -2.0]
    assert to_f32(_bits_record(Dtype.BF16, [0x3F80]))[0] == 1.0
    assert to_f32(_bits_record(Dtype.F16, [0x3C00]))[0] == 1.0
    assert from_f32([1.0], Dtype.BF16).tobytes() == struct.pack("<H", 0x3F80)


def test_f64_narrowing_rounds_to_nearest_even():
    x = 1.0 + 2.0**-24  # halfway between two float32 neighbours, ties to even (1.0)
    y = 1.0 + 3 * 2.0**-24  # ties to 1 + 2**-22
    rec = TensorRecord("t", Dtype.F64, (2,), np.array([x, y], dtype="<f8"))
    assert list(to_f32(rec)) == [1.0, np.float32(1.0 + 2.0**-22)]


def test_overflow_saturates_to_infinity():
    big = np.float32(1e6)
    assert np.isinf(decode_one(from_f32([big], Dtype.F16), Dtype.F16))
    assert np.isinf(decode_one(from_f32([np.float32(3.4e38)], Dtype.BF16), Dtype.BF16))


def decode_one(buf, dtype):
    return to_f32(TensorRecord("t", dtype, (1,), buf))[0]


finite_f32_bits = st.integers(0, 2**32 - 1).filter(lambda b: (b >> 23) & 0xFF != 0xFF)


@settings(max_examples=500, deadline=None)
@given(st.lists(finite_f32_bits, min_size=1, max_size=32))
def test_bf16_narrowing_matches_integer_oracle(bits):
    values = np.array(bits, dtype=np.uint32).view(np.float32)
    got = from_f32(values, Dtype.BF16).view(np.uint16).tolist()
    assert got == [bf16_bits(b) for b in bits]


@settings(max_examples=500, deadline=None)
@given(st.lists(finite_f32_bits, min_size=1, max_size=32))
def test_f16_narrowing_matches_struct_oracle(bits):
    values = np.array(bits, dtype=np.uint32).view(np.float32)
    got = from_f32(values, Dtype.F16).view(np.uint16).tolist()
    assert got == [half_bits(float(v)) for v in values]


@pytest.mark.parametrize("dtype", [Dtype.F16, Dtype.BF16])
def test_all_narrow_values_round_trip(dtype):
    bits = np.arange(2**16, dtype=np.uint16)
    rec = _bits_record(dtype, bits)
    wide = to_f32(rec)
    back = from_f32(wide, dtype).view(np.uint16)
    finite = np.isfinite(wide)
    assert np.array_equal(back[finite], bits[finite])
    # widening is injective on non-NaN patterns
    assert len(set(wide[~np.isnan(wide)].view(np.uint32).tolist())) == int((~np.isnan(wide)).sum())
    # NaN patterns stay NaN
    assert np.isnan(to_f32(TensorRecord("t", dtype, back.shape, back))[~finite & np.isnan(wide)]).all()


def test_bf16_nan_payload_preserved():
    bits = np.array([0x7FC1, 0xFF81, 0x7F81], dtype=np.uint16)
    back = from_f32(to_f32(_bits_record(Dtype.BF16, bits)), Dtype.BF16).view(np.uint16)
    assert back.tolist() == bits.tolist()


def test_f32_identity_on_random_values():
    rng = np.random.default_rng(1234)
    values = rng.standard_normal(10_000).astype(np.float32) * np.float32(1e3)
    rec = TensorRecord("t", Dtype.F32, values.shape, from_f32(values, Dtype.F32))
    assert np.array_equal(to_f32(rec).view(np.uint32), values.view(np.uint32))


# compatibility -----------------------------------------------------------------


def test_validate_compat_self(small_base):
    assert validate_compat(small_base, small_base).ok


def test_validate_compat_shape_mismatch():
    a = TensorMap([f32_record("w", [1.0, 2.0]), f32_record("b", [0.0])])
    b = TensorMap([f32_record("w", [1.0, 2.0, 3.0]), f32_record("b", [0.0])])
    report = validate_compat(a, b)
    assert not report.ok
    assert report.mismatched_names() == ["w"]
    assert "w" in report.render()


def test_validate_compat_disjoint_and_dtype():
    a = TensorMap([f32_record("x", [1.0]), f32_record("y", [1.0])])
    b = TensorMap([f32_record("z", [1.0]), TensorRecord("y", Dtype.F64, (1,), np.zeros(1))])
    report = validate_compat(a, b)
    assert report.missing_left == ["z"]
    assert report.missing_right == ["x"]
    assert report.dtype_mismatch == [("y", "F32", "F64")]
