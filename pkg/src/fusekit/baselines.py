"""Reference merge methods: weighted linear averaging and task arithmetic."""

from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CompatibilityError, ValidationError
from .fusion import ordered_map
from .tensor_store import Dtype, TensorMap, TensorRecord, from_f32, to_f64, validate_compat


class BaselineMethod(enum.Enum):
    LINEAR = "linear"
    TASK_ARITHMETIC = "task_arithmetic"


@dataclass(frozen=True)
class BaselineParams:
    method: BaselineMethod
    weights: tuple[float, ...]
    base: Optional[str] = None

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        if not all(np.isfinite(weights)):
            raise ValidationError("weights must be finite")
        if self.method is BaselineMethod.LINEAR:
            check_linear_weights(weights)
        elif self.base is None:
            raise ValidationError("task arithmetic needs a base model")


def check_linear_weights(weights: Sequence[float]) -> None:
    if any(w < 0 for w in weights):
        raise ValidationError(f"linear weights must be non-negative, got {list(weights)}")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValidationError(f"linear weights must sum to 1, got sum {sum(weights)!r}")


def _check_models(models: Sequence[TensorMap]) -> None:
    first = models[0]
    for i, other in enumerate(models[1:], start=1):
        report = validate_compat(first, other)
        if not report.ok:
            raise CompatibilityError(f"model 0 vs model {i}: {report.render()}", report)


def _encode(values: np.ndarray, dtype: Dtype) -> np.ndarray:
    if dtype is Dtype.F64:
        return values.astype("<f8", copy=False)
    return from_f32(values.astype(np.float32), dtype)


def _weighted_sum(terms) -> np.ndarray:
    """Sum ``coef * values`` in float64, skipping zero coefficients entirely."""
    acc = None
    for values, coef in terms:
        if coef == 0:
            continue
        term = coef * values
        acc = term if acc is None else acc + term
    return acc


def linear_merge(models: Sequence[TensorMap], weights: Sequence[float], threads: int = 1) -> TensorMap:
    """Convex combination ``sum_k w_k * model_k`` of compatible models."""
    if len(models) < 2:
        raise ValidationError("linear merge needs at least two models")
    if len(weights) != len(models):
        raise ValidationError(f"{len(models)} models but {len(weights)} weights")
    check_linear_weights(weights)
    _check_models(models)

    def work(name: str) -> TensorRecord:
        recs = [m[name].materialize() for m in models]
        proto = recs[0]
        if proto.numel == 0:
            return proto
        acc = _weighted_sum(((to_f64(r), w) for r, w in zip(recs, weights)))
        return proto.with_data(_encode(acc, proto.dtype))

    return TensorMap(ordered_map(work, list(models[0]), threads), models[0].metadata)


def task_arithmetic_merge(
    base: TensorMap, experts: Sequence[TensorMap], scales: Sequence[float], threads: int = 1
) -> TensorMap:
    """``base + sum_k s_k * (expert_k - base)``."""
    if not experts:
        raise ValidationError("task arithmetic needs at least one expert")
    if len(scales) != len(experts):
        raise ValidationError(f"{len(experts)} experts but {len(scales)} scales")
    if not all(np.isfinite(scales)):
        raise ValidationError("scales must be finite")
    _check_models([base, *experts])

    def work(name: str) -> TensorRecord:
        brec = base[name].materialize()
        if brec.numel == 0 or all(s == 0 for s in scales):
            return brec
        b = to_f64(brec)
        delta = _weighted_sum(((to_f64(e[name]) - b, s) for e, s in zip(experts, scales)))
        return brec.with_data(_encode(b + delta, brec.dtype))

    return TensorMap(ordered_map(work, list(base), threads), base.metadata)
