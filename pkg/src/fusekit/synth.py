"""Deterministic synthetic checkpoints and "domain expert" perturbations.

Random numbers come from a counter-based generator: element ``i`` of a
stream is ``mix64(key + (i + 1) * GAMMA)``, where ``mix64`` is the SplitMix64
output finalizer and ``key`` is a BLAKE2b digest of (seed, stream, tensor
name). Any element can be produced independently of the others, so output
never depends on chunking or thread count.

* uniform in [0, 1): top 53 bits of a draw times 2**-53
* standard normal: Box-Muller on the draws at counters 2i and 2i+1,
  ``sqrt(-2 ln u1) * cos(2 pi u2)`` with ``u1`` shifted into (0, 1]
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ValidationError
from .tensor_store import Dtype, TensorMap, TensorRecord, from_f32, to_f64

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0**-53
_CHUNK = 1 << 20


def stream_key(seed: int, stream: str, name: str) -> np.uint64:
    h = hashlib.blake2b(digest_size=8, person=b"fusekit-rng")
    h.update((seed % 2**64).to_bytes(8, "little"))
    h.update(stream.encode() + b"\0" + name.encode("utf-8"))
    return np.uint64(int.from_bytes(h.digest(), "little"))


def random_bits(key: np.uint64, counters: np.ndarray) -> np.ndarray:
    """64 random bits for each counter value."""
    z = counters.astype(np.uint64) + np.uint64(1)
    z *= GAMMA
    z += key
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def uniform(key: np.uint64, start: int, count: int) -> np.ndarray:
    bits = random_bits(key, np.arange(start, start + count, dtype=np.uint64))
    return (bits >> np.uint64(11)).astype(np.float64) * _TWO_M53


def standard_normal(key: np.uint64, start: int, count: int) -> np.ndarray:
    return normal_at(key, np.arange(start, start + count, dtype=np.uint64))


def normal_at(key: np.uint64, index: np.ndarray) -> np.ndarray:
    """Standard normal draws for arbitrary element indices."""
    index = index.astype(np.uint64)
    b1 = random_bits(key, index * np.uint64(2))
    b2 = random_bits(key, index * np.uint64(2) + np.uint64(1))
    u1 = ((b1 >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_M53
    u2 = (b2 >> np.uint64(11)).astype(np.float64) * _TWO_M53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    stddev: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.stddev)) or self.stddev < 0:
            raise ValidationError(f"invalid Normal(mean={self.mean}, stddev={self.stddev})")

    def sample(self, key, start: int, count: int) -> np.ndarray:
        return self.mean + self.stddev * standard_normal(key, start, count)


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo > self.hi:
            raise ValidationError(f"invalid Uniform(lo={self.lo}, hi={self.hi})")

    def sample(self, key, start: int, count: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * uniform(key, start, count)


Distribution = Union[Normal, Uniform]


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    dtype: Dtype = Dtype.F32
    distribution: Distribution = field(default_factory=Normal)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    tensors: tuple[TensorSpec, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SynthSpec":
        return _parse_spec(doc)


def _require_keys(obj, allowed: set, required: set, path: str) -> None:
    if not isinstance(obj, Mapping):
        raise ValidationError(f"{path}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValidationError(f"{path}: unknown field(s) {', '.join(unknown)}")
    missing = sorted(required - set(obj))
    if missing:
        raise ValidationError(f"{path}: missing field(s) {', '.join(missing)}")


def _parse_distribution(doc, path: str) -> Distribution:
    if not isinstance(doc, Mapping):
        raise ValidationError(f"{path}: expected an object")
    kind = doc.get("kind")
    if kind == "normal":
        _require_keys(doc, {"kind", "mean", "stddev"}, {"kind"}, path)
        return Normal(float(doc.get("mean", 0.0)), float(doc.get("stddev", 1.0)))
    if kind == "uniform":
        _require_keys(doc, {"kind", "lo", "hi"}, {"kind"}, path)
        return Uniform(float(doc.get("lo", 0.0)), float(doc.get("hi", 1.0)))
    raise ValidationError(f"{path}.kind: expected 'normal' or 'uniform', got {kind!r}")


def _parse_spec(doc) -> SynthSpec:
    _require_keys(doc, {"seed", "tensors", "metadata"}, {"seed", "tensors"}, "spec")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not -(2**63) <= seed < 2**64:
        raise ValidationError(f"spec.seed: expected a 64-bit integer, got {seed!r}")
    if not isinstance(doc["tensors"], list):
        raise ValidationError("spec.tensors: expected a list")
    tensors = []
    for i, t in enumerate(doc["tensors"]):
        path = f"spec.tensors[{i}]"
        _require_keys(t, {"name", "shape", "dtype", "distribution"}, {"name", "shape"}, path)
        shape = t["shape"]
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ValidationError(f"{path}.shape: expected a list of non-negative integers")
        try:
            dtype = Dtype.parse(t.get("dtype", "F32"))
        except ValueError as exc:
            raise ValidationError(f"{path}.dtype: {exc}") from None
        dist = _parse_distribution(t.get("distribution", {"kind": "normal"}), f"{path}.distribution")
        tensors.append(TensorSpec(str(t["name"]), tuple(shape), dtype, dist))
    names = [t.name for t in tensors]
    if len(set(names)) != len(names):
        raise ValidationError("spec.tensors: duplicate tensor names")
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, Mapping) or not all(isinstance(v, str) for v in metadata.values()):
        raise ValidationError("spec.metadata: expected a string-to-string object")
    return SynthSpec(seed, tuple(tensors), dict(metadata))


def parse_synth_spec(text: str) -> SynthSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"synth spec is not valid JSON: {exc}") from None
    return _parse_spec(doc)


def _encode(values: np.ndarray, dtype: Dtype) -> np.ndarray:
    if dtype is Dtype.F64:
        return values.astype("<f8")
    return from_f32(values.astype(np.float32), dtype)


def _generate(seed: int, tspec: TensorSpec) -> np.ndarray:
    key = stream_key(seed, "values", tspec.name)
    n = tspec.numel
    out = np.empty(n * tspec.dtype.byte_width, dtype=np.uint8)
    width = tspec.dtype.byte_width
    for start in range(0, n, _CHUNK):
        count = min(_CHUNK, n - start)
        chunk = _encode(tspec.distribution.sample(key, start, count), tspec.dtype)
        out[start * width : (start + count) * width] = chunk.view(np.uint8)
    return out


def generate_synthetic_checkpoint(spec: SynthSpec, lazy: bool = False) -> TensorMap:
    """Build the checkpoint described by ``spec``; a pure function of it.

    ``lazy=True`` defers generation until each record's data is read.
    """
    records = []
    for tspec in spec.tensors:
        make = lambda t=tspec: _generate(spec.seed, t)  # noqa: E731
        records.append(TensorRecord(tspec.name, tspec.dtype, tspec.shape, make if lazy else make()))
    return TensorMap(records, spec.metadata)


def perturbation_positions(seed: int, name: str, numel: int, fraction: float) -> np.ndarray:
    """Sorted indices of the ``ceil(fraction * numel)`` elements to perturb.

    They are the positions holding the smallest draws of the tensor's mask
    stream.
    """
    if numel == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(numel, math.ceil(fraction * numel))
    if k == numel:
        return np.arange(numel, dtype=np.int64)
    draws = random_bits(stream_key(seed, "mask", name), np.arange(numel, dtype=np.uint64))
    picked = np.argpartition(draws, k - 1)[:k]
    return np.sort(picked)


def _perturb_record(rec: TensorRecord, seed: int, fraction: float, magnitude: float) -> np.ndarray:
    idx = perturbation_positions(seed, rec.name, rec.numel, fraction)
    bits = rec.bits().copy()
    if idx.size:
        noise = magnitude * normal_at(stream_key(seed, "noise", rec.name), idx)
        values = to_f64(rec)[idx] + noise
        bits[idx] = _encode(values, rec.dtype).view(rec.dtype.bits_dtype)
    return bits


def perturb_expert(base: TensorMap, seed: int, fraction: float, magnitude: float, lazy: bool = False) -> TensorMap:
    """Add Normal(0, magnitude) noise to ``ceil(fraction * N)`` elements of each tensor.

    All other elements stay bit-identical to ``base``.
    """
    if not (0 < fraction <= 1):
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    if not (math.isfinite(magnitude) and magnitude > 0):
        raise ValidationError(f"magnitude must be finite and > 0, got {magnitude}")
    records = []
    for rec in base.values():
        make = lambda r=rec: _perturb_record(r.materialize(), seed, fraction, magnitude)  # noqa: E731
        records.append(rec.with_data(make if lazy else make()))
    return TensorMap(records, base.metadata)
