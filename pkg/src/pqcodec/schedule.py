"""Stage schedules: partitioning the token grid for multi-stage coding.

Four policies are supported.  `quincunx` is a static recursive lattice
halving whose stage sizes roughly double; the confidence policies fix only
per-stage cardinalities and pick positions at runtime from model
confidence; `raster` is the fully sequential one-token-per-stage order.
Grid positions are addressed by flat raster index (y * w + x).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

CONFIDENCE_FRACTION_BITS = 16


class Policy(IntEnum):
    """Wire values used in the bitstream header."""

    QUINCUNX = 0
    CONFIDENCE_LINEAR = 1
    CONFIDENCE_DOUBLING = 2
    RASTER = 3

    @classmethod
    def from_name(cls, name: str) -> "Policy":
        try:
            return cls[name.upper()]
        except KeyError:
            raise InvalidConfigError(f"unknown policy {name!r}") from None

    @property
    def is_dynamic(self) -> bool:
        return self in (Policy.CONFIDENCE_LINEAR, Policy.CONFIDENCE_DOUBLING)


@dataclass(frozen=True)
class StageSchedule:
    """Ordered partition of the grid into coding stages.

    For static policies `stages` holds one raster-sorted flat-index array
    per stage.  For confidence policies only `cardinalities` is fixed and
    `stages` is None; positions are selected at runtime.
    """

    policy: Policy
    grid_w: int
    grid_h: int
    num_stages: int
    cardinalities: tuple[int, ...]
    stages: tuple[np.ndarray, ...] | None

    @property
    def is_dynamic(self) -> bool:
        return self.policy.is_dynamic


def quincunx_stage(x: int, y: int, num_stages: int) -> int:
    """Stage index in [1, num_stages] of grid cell (x, y) = (column, row).

    Walking s from the last stage down to 2: a cell with odd coordinate sum
    belongs to stage s; otherwise the lattice is halved by the exact map
    (x, y) <- ((x+y)/2, (x-y)/2) and the walk continues.  Cells surviving
    every halving land in stage 1.
    """
    for s in range(num_stages, 1, -1):
        if (x + y) % 2 != 0:
            return s
        x, y = (x + y) // 2, (x - y) // 2
    return 1


def quincunx_stage_map(grid_w: int, grid_h: int, num_stages: int) -> np.ndarray:
    """Vectorized quincunx_stage over a full grid; returns (h, w) int32."""
    ys, xs = np.mgrid[0:grid_h, 0:grid_w]
    xs = xs.astype(np.int64)
    ys = ys.astype(np.int64)
    out = np.ones((grid_h, grid_w), dtype=np.int32)
    active = np.ones((grid_h, grid_w), dtype=bool)
    for s in range(num_stages, 1, -1):
        odd = active & ((xs + ys) % 2 != 0)
        out[odd] = s
        active &= ~odd
        nx = (xs + ys) // 2
        ny = (xs - ys) // 2
        xs = np.where(active, nx, xs)
        ys = np.where(active, ny, ys)
    return out


def build_schedule(grid_w: int, grid_h: int, num_stages: int, policy: Policy) -> StageSchedule:
    """Construct the stage schedule for a grid of grid_w x grid_h tokens.

    Doubling policies (quincunx, confidence_doubling) require
    num_stages <= 1 + ceil(log2(T)); confidence_linear requires
    num_stages <= T.  The raster policy always uses T singleton stages and
    ignores `num_stages`.
    """
    if grid_w < 1 or grid_h < 1:
        raise InvalidConfigError("grid must be at least 1x1")
    total = grid_w * grid_h
    policy = Policy(policy)

    if policy is Policy.RASTER:
        stages = tuple(np.array([i], dtype=np.int64) for i in range(total))
        return StageSchedule(policy, grid_w, grid_h, total, (1,) * total, stages)

    if num_stages < 1:
        raise InvalidConfigError("need at least one stage")
    max_doubling = 1 + int(np.ceil(np.log2(total))) if total > 1 else 1
    if policy in (Policy.QUINCUNX, Policy.CONFIDENCE_DOUBLING) and num_stages > max_doubling:
        raise InvalidConfigError(
            f"{policy.name.lower()} with S={num_stages} infeasible for {total} tokens"
        )
    if policy is Policy.CONFIDENCE_LINEAR and num_stages > total:
        raise InvalidConfigError(f"linear schedule with S={num_stages} > T={total}")

    if policy is Policy.QUINCUNX:
        stage_map = quincunx_stage_map(grid_w, grid_h, num_stages).ravel()
        stages = tuple(
            np.flatnonzero(stage_map == s + 1).astype(np.int64) for s in range(num_stages)
        )
        cards = tuple(int(st.size) for st in stages)
        return StageSchedule(policy, grid_w, grid_h, num_stages, cards, stages)

    if policy is Policy.CONFIDENCE_DOUBLING:
        tail = [total // (1 << (num_stages - s + 1)) for s in range(2, num_stages + 1)]
    else:
        tail = [total // num_stages] * (num_stages - 1)
    first = total - sum(tail)
    return StageSchedule(policy, grid_w, grid_h, num_stages, (first, *tail), None)


def confidence_select(
    probabilities: np.ndarray, remaining: np.ndarray, count: int
) -> np.ndarray:
    """Pick the `count` most confidently predicted positions.

    A position's confidence is the maximum over the vocabulary of the
    geometric mean of the M per-head probabilities, truncated to 16
    fractional bits before ranking so encoder and decoder agree bit-exactly.
    Ties break toward the lower raster index; the result is ordered by
    descending confidence then raster index.

    Args:
        probabilities: (R, M, V_s) distributions aligned with `remaining`.
        remaining: (R,) flat raster indices of not-yet-coded positions.
        count: Number of positions to select (<= R).
    """
    remaining = np.asarray(remaining, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] != remaining.size:
        raise InvalidInputError("probabilities must be (R, M, V_s) aligned with remaining")
    if count > remaining.size:
        raise InvalidInputError(f"cannot select {count} of {remaining.size} positions")
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    geo = np.exp(np.log(np.maximum(probs, 1e-300)).mean(axis=1))
    conf = geo.max(axis=1)
    quantized = np.floor(conf * (1 << CONFIDENCE_FRACTION_BITS)).astype(np.int64)
    order = np.lexsort((remaining, -quantized))
    return remaining[order[:count]]
