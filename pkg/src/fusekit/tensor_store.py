"""Checkpoint storage: a safetensors-compatible single-file codec.

File layout::

    [u64 little-endian header length H][H bytes of UTF-8 JSON][tensor bytes]

The JSON object maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
and may carry a ``"__metadata__"`` string map. Offsets are relative to the
start of the data section and must tile it exactly.

Records can be *lazy*: their data is a zero-argument callable that produces
the bytes on access. Lazy records let big checkpoints stream through the
merge engine one tensor at a time.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .errors import CheckpointFormatError, ValidationError

Buffer = Union[bytes, bytearray, memoryview, np.ndarray]
DataSource = Union[Buffer, Callable[[], Buffer]]

METADATA_KEY = "__metadata__"
_HEADER_ALIGN = 8
_MAX_HEADER = 100 * 1024 * 1024


class Dtype(enum.Enum):
    F32 = ("F32", 4, "<f4", "<u4")
    F16 = ("F16", 2, "<f2", "<u2")
    BF16 = ("BF16", 2, None, "<u2")
    F64 = ("F64", 8, "<f8", "<u8")

    def __init__(self, label: str, byte_width: int, float_dtype, bits_dtype):
        self.label = label
        self.byte_width = byte_width
        self.float_dtype = None if float_dtype is None else np.dtype(float_dtype)
        self.bits_dtype = np.dtype(bits_dtype)

    @classmethod
    def parse(cls, label: str) -> "Dtype":
        try:
            return cls[label.upper()]
        except (KeyError, AttributeError):
            raise ValueError(f"unknown dtype {label!r}") from None

    def __str__(self) -> str:
        return self.label


def _as_bytes_view(buf: Buffer) -> memoryview:
    if isinstance(buf, np.ndarray):
        buf = np.ascontiguousarray(buf)
    view = memoryview(buf)
    if view.format != "B" or view.ndim != 1:
        view = view.cast("B")
    return view


class TensorRecord:
    """A named tensor with a little-endian element buffer."""

    __slots__ = ("name", "dtype", "shape", "_data")

    def __init__(self, name: str, dtype: Dtype, shape: Iterable[int], data: DataSource):
        if not isinstance(name, str) or not name:
            raise ValidationError("tensor name must be a non-empty string")
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ValidationError(f"tensor {name!r}: negative dimension in shape {list(shape)}")
        self.name = name
        self.dtype = dtype
        self.shape = shape
        if not callable(data):
            data = _as_bytes_view(data)
            if data.nbytes != self.nbytes:
                raise ValidationError(
                    f"tensor {name!r}: buffer holds {data.nbytes} bytes, "
                    f"shape {list(shape)} x {dtype} needs {self.nbytes}"
                )
        self._data = data

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.byte_width

    @property
    def is_lazy(self) -> bool:
        return callable(self._data)

    @property
    def data(self) -> memoryview:
        if not callable(self._data):
            return self._data
        view = _as_bytes_view(self._data())
        if view.nbytes != self.nbytes:
            raise CheckpointFormatError(
                f"tensor {self.name!r}: loader produced {view.nbytes} bytes, expected {self.nbytes}"
            )
        return view

    def bits(self) -> np.ndarray:
        """Flat unsigned-integer view of the raw element bits."""
        return np.frombuffer(self.data, dtype=self.dtype.bits_dtype)

    def materialize(self) -> "TensorRecord":
        if not self.is_lazy:
            return self
        return TensorRecord(self.name, self.dtype, self.shape, self.data)

    def with_data(self, data: DataSource, dtype: Dtype | None = None) -> "TensorRecord":
        return TensorRecord(self.name, dtype or self.dtype, self.shape, data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorRecord):
            return NotImplemented
        return (
            self.name == other.name
            and self.dtype is other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None

    def __repr__(self) -> str:
        lazy = ", lazy" if self.is_lazy else ""
        return f"TensorRecord({self.name!r}, {self.dtype}, {list(self.shape)}{lazy})"


class TensorMap(Mapping):
    """Name-ordered collection of tensor records plus string metadata."""

    def __init__(self, records: Iterable[TensorRecord] = (), metadata: Mapping[str, str] | None = None):
        if isinstance(records, Mapping):
            records = records.values()
        entries: dict[str, TensorRecord] = {}
        for rec in records:
            if rec.name in entries:
                raise ValidationError(f"duplicate tensor name {rec.name!r}")
            entries[rec.name] = rec
        self._records = {name: entries[name] for name in sorted(entries)}
        metadata = dict(metadata or {})
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValidationError("metadata must map strings to strings")
        self.metadata = metadata

    def __getitem__(self, name: str) -> TensorRecord:
        return self._records[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._records)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def numel(self) -> int:
        return sum(r.numel for r in self._records.values())

    def materialize(self) -> "TensorMap":
        return TensorMap([r.materialize() for r in self._records.values()], self.metadata)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and list(self) == list(other)
            and all(self[n] == other[n] for n in self)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"TensorMap({len(self)} tensors, {self.numel} elements)"


# ---------------------------------------------------------------------------
# dtype conversion
# ---------------------------------------------------------------------------


def _bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32)


def _f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    lsb = (bits >> 16) & 1
    rounded = ((bits + np.uint32(0x7FFF) + lsb) >> 16).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        # truncate NaNs instead of rounding; keep them NaN if the payload lived in the low half
        trunc = (bits[nan] >> 16).astype(np.uint16)
        trunc[(trunc & 0x7F) == 0] |= 0x40
        rounded[nan] = trunc
    return rounded


def decode(buf: Buffer, dtype: Dtype) -> np.ndarray:
    """Interpret a raw buffer as float32 working values."""
    view = _as_bytes_view(buf)
    if dtype is Dtype.BF16:
        return _bf16_bits_to_f32(np.frombuffer(view, dtype="<u2"))
    arr = np.frombuffer(view, dtype=dtype.float_dtype)
    if dtype is Dtype.F32:
        return arr
    return arr.astype(np.float32)


def to_f32(record: TensorRecord) -> np.ndarray:
    """Flat float32 copy (or read-only view, for F32) of a record's elements.

    F16 and BF16 widen exactly; F64 rounds to nearest even.
    """
    return decode(record.data, record.dtype)


def to_f64(record: TensorRecord) -> np.ndarray:
    """Flat float64 values; exact for every supported dtype."""
    if record.dtype is Dtype.F64:
        return np.frombuffer(record.data, dtype="<f8")
    return to_f32(record).astype(np.float64)


def from_f32(values, dtype: Dtype) -> np.ndarray:
    """Encode float32 values as a little-endian buffer of ``dtype``.

    Narrowing rounds to nearest even and saturates to infinity on overflow.
    """
    values = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
    if dtype is Dtype.F32:
        return values.astype("<f4", copy=False)
    if dtype is Dtype.BF16:
        return _f32_to_bf16_bits(values).astype("<u2", copy=False)
    with np.errstate(over="ignore"):
        return values.astype(dtype.float_dtype)


# ---------------------------------------------------------------------------
# compatibility
# ---------------------------------------------------------------------------


@dataclass
class CompatReport:
    missing_left: list[str] = field(default_factory=list)
    missing_right: list[str] = field(default_factory=list)
    shape_mismatch: list[tuple[str, tuple, tuple]] = field(default_factory=list)
    dtype_mismatch: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing_left or self.missing_right or self.shape_mismatch or self.dtype_mismatch)

    def mismatched_names(self) -> list[str]:
        names = set(self.missing_left) | set(self.missing_right)
        names |= {n for n, *_ in self.shape_mismatch} | {n for n, *_ in self.dtype_mismatch}
        return sorted(names)

    def render(self) -> str:
        if self.ok:
            return "compatible"
        lines = ["incompatible checkpoints:"]
        for name in self.missing_left:
            lines.append(f"  missing in left:  {name}")
        for name in self.missing_right:
            lines.append(f"  missing in right: {name}")
        for name, a, b in self.shape_mismatch:
            lines.append(f"  shape mismatch:   {name} {list(a)} vs {list(b)}")
        for name, a, b in self.dtype_mismatch:
            lines.append(f"  dtype mismatch:   {name} {a} vs {b}")
        return "\n".join(lines)


def validate_compat(left: TensorMap, right: TensorMap) -> CompatReport:
    report = CompatReport()
    report.missing_left = sorted(set(right) - set(left))
    report.missing_right = sorted(set(left) - set(right))
    for name in sorted(set(left) & set(right)):
        a, b = left[name], right[name]
        if a.shape != b.shape:
            report.shape_mismatch.append((name, a.shape, b.shape))
        if a.dtype is not b.dtype:
            report.dtype_mismatch.append((name, str(a.dtype), str(b.dtype)))
    return report


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeaderEntry:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Header:
    entries: dict[str, HeaderEntry]
    metadata: dict[str, str]
    header_len: int

    @property
    def data_start(self) -> int:
        return 8 + self.header_len


def _reject_duplicates(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise CheckpointFormatError(f"duplicate tensor name {key!r} in header")
        obj[key] = value
    return obj


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def parse_header(raw: bytes, data_len: int) -> tuple[dict[str, HeaderEntry], dict[str, str]]:
    """Validate a JSON header against a data section of ``data_len`` bytes."""
    try:
        obj = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"header is not valid UTF-8: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise CheckpointFormatError("header must be a JSON object")

    metadata = obj.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointFormatError("__metadata__ must map strings to strings")

    entries: dict[str, HeaderEntry] = {}
    for name, info in obj.items():
        if not name:
            raise CheckpointFormatError("empty tensor name in header")
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise CheckpointFormatError(
                f"tensor {name!r}: entry must have exactly dtype, shape, data_offsets"
            )
        try:
            dtype = Dtype.parse(info["dtype"]) if isinstance(info["dtype"], str) else None
        except ValueError:
            dtype = None
        if dtype is None or info["dtype"] != dtype.label:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype {info['dtype']!r}")
        shape = info["shape"]
        if not isinstance(shape, list) or not all(_is_int(s) and s >= 0 for s in shape):
            raise CheckpointFormatError(f"tensor {name!r}: invalid shape {shape!r}")
        offsets = info["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(_is_int(o) and o >= 0 for o in offsets)
            or offsets[0] > offsets[1]
        ):
            raise CheckpointFormatError(f"tensor {name!r}: invalid data_offsets {offsets!r}")
        entry = HeaderEntry(name, dtype, tuple(shape), offsets[0], offsets[1])
        if entry.end - entry.begin != entry.numel * dtype.byte_width:
            raise CheckpointFormatError(
                f"tensor {name!r}: data_offsets span {entry.end - entry.begin} bytes, "
                f"shape {shape} x {dtype} needs {entry.numel * dtype.byte_width}"
            )
        entries[name] = entry

    cursor = 0
    for entry in sorted(entries.values(), key=lambda e: (e.begin, e.end)):
        if entry.begin < cursor:
            raise CheckpointFormatError(
                f"tensor {entry.name!r}: data at byte offset {entry.begin} overlaps previous tensor"
            )
        if entry.begin > cursor:
            raise CheckpointFormatError(
                f"tensor {entry.name!r}: gap in data section at byte offset {cursor}"
            )
        cursor = entry.end
        if cursor > data_len:
            raise CheckpointFormatError(
                f"tensor {entry.name!r}: data_offsets end {cursor} beyond data section of {data_len} bytes"
            )
    if cursor != data_len:
        raise CheckpointFormatError(
            f"data section has {data_len - cursor} trailing bytes after byte offset {cursor}"
        )
    return {name: entries[name] for name in sorted(entries)}, metadata


def read_header(path: str | os.PathLike) -> Header:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise CheckpointFormatError(f"{path}: file too short ({size} bytes) for header length")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > size - 8 or header_len > _MAX_HEADER:
            raise CheckpointFormatError(
                f"{path}: header length {header_len} exceeds file size {size}"
            )
        raw = fh.read(header_len)
    entries, metadata = parse_header(raw, size - 8 - header_len)
    return Header(entries, metadata, header_len)


def _pread_loader(path: Path, offset: int, nbytes: int) -> Callable[[], bytearray]:
    def load() -> bytearray:
        buf = bytearray(nbytes)
        with open(path, "rb") as fh:
            fh.seek(offset)
            got = fh.readinto(buf)
        if got != nbytes:
            raise CheckpointFormatError(f"{path}: short read at byte offset {offset}")
        return buf

    return load


def read_checkpoint(path: str | os.PathLike, lazy: bool = False) -> TensorMap:
    """Read a checkpoint file.

    With ``lazy=True`` only the header is parsed; each tensor's bytes are read
    from disk whenever the record's ``data`` is accessed.
    """
    path = Path(path)
    header = read_header(path)
    records = []
    for entry in header.entries.values():
        loader = _pread_loader(path, header.data_start + entry.begin, entry.end - entry.begin)
        records.append(TensorRecord(entry.name, entry.dtype, entry.shape, loader if lazy else loader()))
    return TensorMap(records, header.metadata)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def encode_header(layout: Iterable[tuple[str, Dtype, tuple[int, ...]]], metadata: Mapping[str, str]) -> bytes:
    """Serialized, padded header for tensors laid out in name order."""
    header: dict[str, object] = {}
    if metadata:
        header[METADATA_KEY] = dict(metadata)
    offset = 0
    for name, dtype, shape in sorted(layout, key=lambda t: t[0]):
        nbytes = math.prod(shape) * dtype.byte_width
        header[name] = {"dtype": dtype.label, "shape": list(shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    if offset >= 2**64:
        raise ValidationError("checkpoint exceeds the format's addressable size")
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    raw += b" " * (-(8 + len(raw)) % _HEADER_ALIGN)
    return struct.pack("<Q", len(raw)) + raw


class CheckpointWriter:
    """Streams tensors into a checkpoint file in name order.

    The header is written up front from the layout, so tensors can be handed
    over one at a time as they are produced. The file appears at ``path``
    only after a successful :meth:`close`.
    """

    def __init__(self, path: str | os.PathLike, layout, metadata: Mapping[str, str] | None = None):
        self.path = Path(path)
        self._layout = sorted(((n, d, tuple(s)) for n, d, s in layout), key=lambda t: t[0])
        self._next = 0
        self._tmp = self.path.with_name(f".{self.path.name}.{os.getpid()}.tmp")
        self._fh = open(self._tmp, "wb")
        self._fh.write(encode_header(self._layout, metadata or {}))

    def write(self, name: str, data: Buffer) -> None:
        if self._next >= len(self._layout):
            raise ValidationError(f"unexpected tensor {name!r}: layout already complete")
        expected, dtype, shape = self._layout[self._next]
        if name != expected:
            raise ValidationError(f"tensors must be written in name order: got {name!r}, expected {expected!r}")
        view = _as_bytes_view(data)
        if view.nbytes != math.prod(shape) * dtype.byte_width:
            raise ValidationError(f"tensor {name!r}: wrong buffer size {view.nbytes}")
        self._fh.write(view)
        self._next += 1

    def close(self) -> None:
        if self._next != len(self._layout):
            self.abort()
            raise ValidationError(
                f"checkpoint incomplete: {len(self._layout) - self._next} tensors never written"
            )
        self._fh.close()
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        self._fh.close()
        self._tmp.unlink(missing_ok=True)

    def __enter__(self) -> "CheckpointWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.abort()
        else:
            self.close()


def write_checkpoint(tmap: TensorMap, path: str | os.PathLike) -> None:
    layout = [(r.name, r.dtype, r.shape) for r in tmap.values()]
    with CheckpointWriter(path, layout, tmap.metadata) as writer:
        for rec in tmap.values():
            writer.write(rec.name, rec.data)
