"""Importance-scored selective fusion of two models.

For a pair of element-aligned parameter vectors ``left`` and ``right``:

1. both are softmax-normalized (max-shifted, float64 sums) and ``epsilon``
   is added to every entry;
2. the per-element KL contribution ``d_i = p_i * ln(p_i / q_i)`` is
   multiplied by the parameter delta ``left_i - right_i`` to give the
   importance score;
3. elements whose score is strictly above ``median + lam * IQR`` of the
   scores take the right model's value, everything else keeps the left one.

Selection is binary and done on the raw stored bits, so every output element
is bit-identical to one of the two inputs.
"""

from __future__ import annotations

import enum
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import quantiles
from .errors import CompatibilityError, ValidationError
from .quantiles import ImportanceStats
from .tensor_store import TensorMap, TensorRecord, to_f32, validate_compat

DEFAULT_LAMBDA = 1.5
DEFAULT_EPSILON = 1e-8


class Granularity(enum.Enum):
    PER_TENSOR = "tensor"
    GLOBAL = "global"

    @classmethod
    def parse(cls, value) -> "Granularity":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name, member.name.lower()):
                return member
        raise ValidationError(f"unknown granularity {value!r} (expected 'tensor' or 'global')")


@dataclass(frozen=True)
class FusionParams:
    lam: float = DEFAULT_LAMBDA
    epsilon: float = DEFAULT_EPSILON
    granularity: Granularity = Granularity.PER_TENSOR
    fixed_threshold: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"lambda must be finite and >= 0, got {self.lam}")
        if not np.isfinite(self.epsilon) or self.epsilon <= 0:
            raise ValidationError(f"epsilon must be finite and > 0, got {self.epsilon}")
        if self.fixed_threshold is not None and not np.isfinite(self.fixed_threshold):
            raise ValidationError(f"fixed threshold must be finite, got {self.fixed_threshold}")
        object.__setattr__(self, "granularity", Granularity.parse(self.granularity))


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"{what}: non-finite value {values[idx]} at index {idx}")


def _softmax_into(values: np.ndarray, epsilon: float) -> np.ndarray:
    out = values.astype(np.float64)
    out -= out.max()
    np.exp(out, out=out)
    out /= out.sum(dtype=np.float64)
    out += epsilon
    return out


def softmax_normalize(values, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Max-shifted softmax of ``values`` plus ``epsilon`` on every entry (float64)."""
    values = np.asarray(values).reshape(-1)
    if values.size == 0:
        raise ValidationError("softmax of an empty vector")
    _check_finite(values, "softmax input")
    return _softmax_into(values, epsilon)


def elementwise_kl(p, q) -> np.ndarray:
    """Per-element KL contributions ``p_i * ln(p_i / q_i)``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.size} vs {q.size}")
    for name, v in (("p", p), ("q", q)):
        bad = ~(v > 0)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"{name}[{idx}] = {v[idx]} is not positive")
    return p * np.log(p / q)


def _importance(left: np.ndarray, right: np.ndarray, epsilon: float) -> np.ndarray:
    # in-place throughout: this runs over every parameter of the model
    p = _softmax_into(left, epsilon)
    d = _softmax_into(right, epsilon)
    np.divide(p, d, out=d)
    np.log(d, out=d)
    d *= p
    del p
    delta = left.astype(np.float64)
    delta -= right
    d *= delta
    return d


def importance_scores(left, right, params: FusionParams | None = None) -> np.ndarray:
    """Importance score of every element: KL contribution times (left - right)."""
    params = params or FusionParams()
    left = np.asarray(left).reshape(-1)
    right = np.asarray(right).reshape(-1)
    if left.shape != right.shape:
        raise ValidationError(f"length mismatch: {left.size} vs {right.size}")
    if left.size == 0:
        return np.zeros(0, dtype=np.float64)
    _check_finite(left, "left")
    _check_finite(right, "right")
    return _importance(left, right, params.epsilon)


def selective_merge(left, right, importance, threshold: float) -> np.ndarray:
    """Take ``right`` where ``importance > threshold``, else ``left``."""
    left = np.asarray(left).reshape(-1)
    right = np.asarray(right).reshape(-1)
    importance = np.asarray(importance).reshape(-1)
    if not (left.shape == right.shape == importance.shape):
        raise ValidationError(
            f"length mismatch: left {left.size}, right {right.size}, importance {importance.size}"
        )
    return np.where(importance > threshold, right, left)


def _check_pair(left: TensorRecord, right: TensorRecord) -> None:
    if left.name != right.name or left.shape != right.shape or left.dtype is not right.dtype:
        raise CompatibilityError(
            f"cannot fuse {left.name!r} {list(left.shape)} {left.dtype} with "
            f"{right.name!r} {list(right.shape)} {right.dtype}"
        )


def _empty_stats(name: str) -> ImportanceStats:
    return ImportanceStats(name, None, None, None, None, None, 0, 0)


def _select(
    left: TensorRecord,
    right: TensorRecord,
    importance: np.ndarray,
    params: FusionParams,
    threshold: Optional[float],
) -> tuple[TensorRecord, ImportanceStats]:
    quartiles_ = quantiles.exact_quartiles(importance)
    if params.fixed_threshold is not None:
        threshold = params.fixed_threshold
    elif threshold is None:
        median, q1, q3 = quartiles_
        threshold = median + params.lam * (q3 - q1)
    mask = importance > threshold
    updated = int(np.count_nonzero(mask))
    median, q1, q3 = quartiles_
    stats = ImportanceStats(left.name, median, q1, q3, q3 - q1, float(threshold), updated, left.numel)
    if updated == 0:
        return left.materialize(), stats
    out = np.where(mask, right.bits(), left.bits())
    return left.with_data(out), stats


def tensor_importance(left: TensorRecord, right: TensorRecord, params: FusionParams) -> np.ndarray:
    _check_pair(left, right)
    if left.numel == 0:
        return np.zeros(0, dtype=np.float64)
    l32, r32 = to_f32(left), to_f32(right)
    _check_finite(l32, f"tensor {left.name!r} (left)")
    _check_finite(r32, f"tensor {right.name!r} (right)")
    return _importance(l32, r32, params.epsilon)


def fuse_tensors(
    left: TensorRecord,
    right: TensorRecord,
    params: FusionParams | None = None,
    external_threshold: Optional[float] = None,
) -> tuple[TensorRecord, ImportanceStats]:
    """Fuse one pair of tensors.

    In per-tensor granularity the threshold comes from this tensor's own
    score quartiles; in global granularity the caller supplies it.
    The output keeps the input dtype.
    """
    params = params or FusionParams()
    _check_pair(left, right)
    left, right = left.materialize(), right.materialize()
    if params.granularity is Granularity.GLOBAL and external_threshold is None and params.fixed_threshold is None:
        raise ValidationError("global granularity needs an externally computed threshold")
    if params.granularity is Granularity.PER_TENSOR and external_threshold is not None:
        raise ValidationError("per-tensor granularity computes its own threshold")
    if left.numel == 0:
        return left.materialize(), _empty_stats(left.name)
    importance = tensor_importance(left, right, params)
    return _select(left, right, importance, params, external_threshold)


# ---------------------------------------------------------------------------
# whole-model fusion
# ---------------------------------------------------------------------------


def ordered_map(fn: Callable, items, threads: int) -> Iterator:
    """``map(fn, items)`` on a thread pool, yielding results in input order.

    At most ``2 * threads`` results are in flight so memory stays bounded
    when the consumer streams results to disk.
    """
    if threads <= 1:
        yield from map(fn, items)
        return
    window: list = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for item in items:
            window.append(pool.submit(fn, item))
            if len(window) >= 2 * threads:
                yield window.pop(0).result()
        for fut in window:
            yield fut.result()


@dataclass
class FusionOutcome:
    tensors: Optional[TensorMap]
    stats: list[ImportanceStats] = field(default_factory=list)
    global_stats: Optional[ImportanceStats] = None

    @property
    def total(self) -> int:
        return sum(s.total for s in self.stats)

    @property
    def updated(self) -> int:
        return sum(s.updated for s in self.stats)

    @property
    def update_ratio(self) -> float:
        return self.updated / self.total if self.total else 0.0


def fuse_models(
    left: TensorMap,
    right: TensorMap,
    params: FusionParams | None = None,
    threads: int = 1,
    sink: Optional[Callable[[TensorRecord], None]] = None,
) -> FusionOutcome:
    """Fuse two whole models tensor by tensor.

    Tensors are processed concurrently on ``threads`` workers; results are
    independent of the worker count. With ``sink`` each fused record is
    handed over in name order and not retained.
    """
    params = params or FusionParams()
    report = validate_compat(left, right)
    if not report.ok:
        raise CompatibilityError(report.render(), report)
    names = list(left)
    outcome = FusionOutcome(tensors=None)
    records: list[TensorRecord] = []

    threshold = None
    importances: dict[str, np.ndarray] = {}
    if params.granularity is Granularity.GLOBAL:
        scores = ordered_map(lambda n: tensor_importance(left[n], right[n], params), names, threads)
        importances = dict(zip(names, scores))
        if left.numel:
            median, q1, q3 = quantiles.global_quartiles(list(importances.values()))
            threshold = median + params.lam * (q3 - q1)
            if params.fixed_threshold is not None:
                threshold = params.fixed_threshold

    def work(name: str):
        lrec, rrec = left[name].materialize(), right[name].materialize()
        if lrec.numel == 0:
            return lrec.materialize(), _empty_stats(name)
        if threshold is None:
            return fuse_tensors(lrec, rrec, params)
        return _select(lrec, rrec, importances.pop(name), params, threshold)

    for rec, stats in ordered_map(work, names, threads):
        outcome.stats.append(stats)
        if sink is not None:
            sink(rec)
        else:
            records.append(rec)

    if threshold is not None:
        outcome.global_stats = ImportanceStats(
            quantiles.GLOBAL_SCOPE, median, q1, q3, q3 - q1, float(threshold), outcome.updated, outcome.total
        )
    if sink is None:
        outcome.tensors = TensorMap(records, left.metadata)
    return outcome
