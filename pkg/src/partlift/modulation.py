"""Attention-score modulation from rendered part affinities.

Cross-attention columns belonging to a part's tokens gain the log of that
part's affinity vector; self-attention gains the log of the rank-1 kernel
m m^T per part, computed as a broadcast sum of logs so the hw x hw kernel
is never materialized. Scores accumulate over all parts (label-sorted, for
bit-reproducibility) and softmax is applied once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .extraction import PartSpec

DEFAULT_ALPHA_CROSS = 0.8
DEFAULT_ALPHA_SELF = 0.9
DEFAULT_EPS_FLOOR = 1e-4


class ModulationError(ValueError):
    """Bad modulation inputs: shapes, ranges, or ambiguous part columns."""


@dataclass(frozen=True)
class AttentionScores:
    """Pre-softmax attention scores: cross is (hw, n), self is (hw, hw)."""

    kind: str
    scores: np.ndarray

    def __post_init__(self):
        if self.kind not in ("cross", "self"):
            raise ModulationError(f"kind must be 'cross' or 'self', got {self.kind!r}")
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ModulationError(f"scores must be a 2-D matrix, got shape {arr.shape}")
        if self.kind == "self" and arr.shape[0] != arr.shape[1]:
            raise ModulationError(f"self scores must be square, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ModulationError("scores must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)

    @property
    def hw(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class ModulationConfig:
    alpha_cross: float = DEFAULT_ALPHA_CROSS
    alpha_self: float = DEFAULT_ALPHA_SELF
    eps_floor: float = DEFAULT_EPS_FLOOR
    resample_mode: str = "bilinear"

    def __post_init__(self):
        if self.alpha_cross < 0 or self.alpha_self < 0:
            raise ValueError("alphas must be non-negative")
        if not 0.0 < self.eps_floor < 1.0:
            raise ValueError(f"eps_floor must lie in (0, 1), got {self.eps_floor}")
        if self.resample_mode != "bilinear":
            raise ValueError(f"unsupported resample mode {self.resample_mode!r}")


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-stabilized softmax over the last axis (plain numpy)."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def resample_affinity(
    grid: np.ndarray,
    hw: int,
    config: ModulationConfig = ModulationConfig(),
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Bilinearly resample an (R, R) affinity grid to a flat hw vector.

    Target shape defaults to the square root factorization of hw; pass
    ``shape=(h, w)`` for non-square targets. Output entries are clamped to
    [eps_floor, 1] so a downstream log is always finite.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ModulationError(f"affinity grid must be 2-D, got shape {grid.shape}")
    if not np.isfinite(grid).all():
        raise ModulationError("affinity grid must be finite")
    if shape is None:
        side = int(round(np.sqrt(hw)))
        if side * side != hw:
            raise ModulationError(f"hw={hw} is not a perfect square; pass shape=(h, w)")
        h = w = side
    else:
        h, w = int(shape[0]), int(shape[1])
        if h * w != hw:
            raise ModulationError(f"shape {shape} does not factor hw={hw}")
    src_h, src_w = grid.shape
    # Half-pixel-center mapping, edge-clamped.
    ys = np.clip((np.arange(h) + 0.5) * src_h / h - 0.5, 0.0, src_h - 1.0)
    xs = np.clip((np.arange(w) + 0.5) * src_w / w - 0.5, 0.0, src_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = (
        grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + grid[np.ix_(y0, x1)] * (1 - fy) * fx
        + grid[np.ix_(y1, x0)] * fy * (1 - fx)
        + grid[np.ix_(y1, x1)] * fy * fx
    )
    return np.clip(out.reshape(-1), config.eps_floor, 1.0)


def _validate_affinities(
    parts: Sequence[tuple[PartSpec, np.ndarray]], hw: int
) -> list[tuple[PartSpec, np.ndarray]]:
    ordered = sorted(parts, key=lambda pm: pm[0].label)
    for spec, m in ordered:
        m = np.asarray(m)
        if m.shape != (hw,):
            raise ModulationError(
                f"part {spec.label!r}: affinity length {m.shape} != scores rows ({hw},)"
            )
        if not np.isfinite(m).all():
            raise ModulationError(f"part {spec.label!r}: affinity must be finite")
        if (m <= 0).any():
            raise ModulationError(
                f"part {spec.label!r}: affinity entries must be positive; "
                "clamp to the floor before modulating"
            )
    return [(spec, np.asarray(m, dtype=np.float64)) for spec, m in ordered]


def modulate_cross(
    scores: np.ndarray,
    parts: Sequence[tuple[PartSpec, np.ndarray]],
    alpha_cross: float = DEFAULT_ALPHA_CROSS,
) -> tuple[np.ndarray, np.ndarray]:
    """Add alpha * log(m_p) to each part's token columns, then one softmax.

    Returns (modulated pre-softmax scores, post-softmax attention). Parts
    are processed in label order; token index sets must be pairwise
    disjoint and affinity entries strictly positive (clamp zeros to the
    floor first). alpha_cross = 0 returns the scores object unchanged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ModulationError(f"cross scores must be (hw, n), got {scores.shape}")
    if not np.isfinite(scores).all():
        raise ModulationError("scores must be finite")
    hw, n = scores.shape
    ordered = _validate_affinities(parts, hw)
    seen: dict[int, str] = {}
    for spec, _ in ordered:
        for i in spec.indices:
            if i >= n:
                raise ModulationError(f"part {spec.label!r}: token index {i} >= n={n}")
            if i in seen:
                raise ModulationError(
                    f"ambiguous part assignment: column {i} claimed by both "
                    f"{seen[i]!r} and {spec.label!r}"
                )
            seen[i] = spec.label
    if alpha_cross == 0.0:
        return scores, softmax_rows(scores)
    out = scores.copy()
    changed = False
    for spec, m in ordered:
        delta = alpha_cross * np.log(m)
        if not delta.any():
            continue  # all-ones affinity: adding zeros would be a no-op
        changed = True
        for i in spec.indices:
            out[:, i] += delta
    if not changed:
        return scores, softmax_rows(scores)
    return out, softmax_rows(out)


def self_log_kernel(m: np.ndarray) -> np.ndarray:
    """log of the rank-1 kernel m m^T, as the broadcast sum log m + log m^T.

    Pure arithmetic on any positive vector; modulate_self accumulates the
    equivalent of this term for every part without materializing it.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 1:
        raise ModulationError(f"kernel input must be a vector, got shape {m.shape}")
    if not np.isfinite(m).all() or (m <= 0).any():
        raise ModulationError("kernel input must be finite and positive")
    lg = np.log(m)
    return lg[:, None] + lg[None, :]


def modulate_self(
    scores: np.ndarray,
    parts: Sequence[tuple[PartSpec, np.ndarray]],
    alpha_self: float = DEFAULT_ALPHA_SELF,
) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate alpha * log(m_p m_p^T) for every part, then one softmax.

    log(m m^T) decomposes as log m broadcast over rows plus columns, so the
    accumulation is O(parts * hw) followed by a single rank-1-style add.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ModulationError(f"self scores must be square (hw, hw), got {scores.shape}")
    if not np.isfinite(scores).all():
        raise ModulationError("scores must be finite")
    hw = scores.shape[0]
    ordered = _validate_affinities(parts, hw)
    if alpha_self == 0.0:
        return scores, softmax_rows(scores)
    total_log = np.zeros(hw)
    for _, m in ordered:
        total_log += np.log(m)
    if not total_log.any():
        return scores, softmax_rows(scores)
    out = scores + alpha_self * (total_log[:, None] + total_log[None, :])
    return out, softmax_rows(out)
