"""Exact median / quartile statistics and the dynamic selection threshold.

Quartiles follow the Moore-McCabe convention: the lower and upper halves
exclude the overall median element when the count is odd, and each quartile
is the median of its half. A single value is its own median and quartiles.

Only the handful of order statistics we need are located, using
``np.partition`` (introselect, expected linear time), so results are
bit-identical to reading them off a fully sorted copy.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError

GLOBAL_SCOPE = "GLOBAL"
GLOBAL_CAP = 2**31


@dataclass(frozen=True)
class ImportanceStats:
    scope: str
    median: Optional[float]
    q1: Optional[float]
    q3: Optional[float]
    iqr: Optional[float]
    threshold: Optional[float]
    updated: int
    total: int

    @property
    def update_ratio(self) -> float:
        return self.updated / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _median_positions(start: int, count: int) -> tuple[int, int]:
    # both indices coincide for odd counts
    return start + (count - 1) // 2, start + count // 2


def _quartile_positions(n: int) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    med = _median_positions(0, n)
    if n == 1:
        return med, med, med
    half = n // 2
    lower = _median_positions(0, half)
    upper = _median_positions((n + 1) // 2, half)
    return med, lower, upper


def _mid(values: np.ndarray, pos: tuple[int, int]) -> float:
    a, b = values[pos[0]], values[pos[1]]
    if pos[0] == pos[1]:
        return float(a)
    return float((a + b) / 2)


def exact_quartiles(values) -> tuple[float, float, float]:
    """(median, q1, q3) of ``values`` computed in float64."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    n = arr.size
    if n == 0:
        raise ValidationError("quartiles of an empty vector are undefined")
    med, lower, upper = _quartile_positions(n)
    kth = sorted(set(med + lower + upper))
    part = np.partition(arr, kth)
    return _mid(part, med), _mid(part, lower), _mid(part, upper)


def dynamic_threshold(values, lam: float, scope: str = "", updated: int = 0) -> ImportanceStats:
    """Median + ``lam`` x IQR over ``values``, packaged with its quartiles."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    median, q1, q3 = exact_quartiles(arr)
    return stats_from_quartiles(scope, (median, q1, q3), lam, updated=updated, total=arr.size)


def stats_from_quartiles(scope: str, quartiles, lam: float, updated: int, total: int) -> ImportanceStats:
    median, q1, q3 = quartiles
    iqr = q3 - q1
    return ImportanceStats(scope, median, q1, q3, iqr, median + lam * iqr, updated, total)


def global_quartiles(per_tensor: Sequence, cap: int = GLOBAL_CAP) -> tuple[float, float, float]:
    """Quartiles of the concatenation of several vectors."""
    parts = [np.asarray(v, dtype=np.float64).reshape(-1) for v in per_tensor]
    total = sum(p.size for p in parts)
    if total > cap:
        raise ValidationError(
            f"global statistics need {total} elements but the exact-computation cap is {cap}"
        )
    if total == 0:
        raise ValidationError("quartiles of an empty vector are undefined")
    return exact_quartiles(np.concatenate(parts))
