"""Per-candidate reward components and their format-gated sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

from .errors import InvalidInput
from .protocol import FormatVerdict, Judgment


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: int
    r_self: float
    r_external: Optional[float]
    r_all: float
    judge_parse_ok: bool

    def to_json(self) -> dict:
        return asdict(self)


def compute_format_reward(verdict: FormatVerdict) -> int:
    return 1 if verdict.ok else 0


def compute_self_reward(judgment: Optional[Judgment]) -> float:
    """Judge score rescaled to [0, 1]; an unparseable or missing judgment earns 0."""
    if judgment is None or not judgment.parse_ok:
        return 0.0
    return judgment.score / 100.0


def _check_unit(name, value):
    if not isinstance(value, (int, float)) or math.isnan(value) or not 0.0 <= value <= 1.0:
        raise InvalidInput(f"{name} must lie in [0, 1], got {value!r}")


def combine(r_format: int, r_self: float, r_external: Optional[float] = None) -> float:
    """``1 + r_self (+ r_external)`` when the format gate passes, else exactly 0."""
    if r_format not in (0, 1):
        raise InvalidInput(f"r_format must be 0 or 1, got {r_format!r}")
    _check_unit("r_self", r_self)
    if r_external is not None:
        _check_unit("r_external", r_external)
    if r_format == 0:
        return 0.0
    total = 1.0 + r_self
    if r_external is not None:
        total += r_external
    return total


def breakdown(
    verdict: FormatVerdict,
    judgment: Optional[Judgment],
    r_external: Optional[float] = None,
) -> RewardBreakdown:
    r_format = compute_format_reward(verdict)
    r_self = compute_self_reward(judgment)
    return RewardBreakdown(
        r_format=r_format,
        r_self=r_self,
        r_external=r_external,
        r_all=combine(r_format, r_self, r_external),
        judge_parse_ok=bool(judgment is not None and judgment.parse_ok),
    )
