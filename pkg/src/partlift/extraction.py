"""Part-token resolution and attention-to-affinity aggregation.

A prompt carries part phrases ("kangaroo head"); each resolves to a
contiguous token index set I_p. Captured attention tensors are filtered to
a timestep/layer window and averaged over (timestep, layer, part token)
into one affinity map per (part, camera). Summation follows a fixed
canonical order so results are bit-reproducible regardless of input order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_T_START = 450
DEFAULT_T_END = 100
DEFAULT_LAYERS = (11,)


class NotASubsequence(ValueError):
    """Part phrase does not appear as a contiguous token run in the prompt."""


class AggregationError(ValueError):
    """Record set cannot be aggregated: empty window, shape or index trouble."""


def whitespace_tokenize(text: str) -> list[str]:
    """Default tokenizer: plain whitespace split."""
    return text.split()


@dataclass(frozen=True)
class PartSpec:
    """A named part and its token index set I_p (sorted, contiguous or not)."""

    label: str
    indices: tuple[int, ...]

    def __post_init__(self):
        if not self.indices:
            raise ValueError(f"part {self.label!r} has no token indices")
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"part {self.label!r} indices must be strictly increasing, got {idx}")
        if idx[0] < 0:
            raise ValueError(f"part {self.label!r} has a negative token index")
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class PromptSpec:
    """Tokenized prompt plus its parts; index sets must fit the token count."""

    tokens: tuple[str, ...]
    parts: tuple[PartSpec, ...]

    def __post_init__(self):
        tokens = tuple(self.tokens)
        parts = tuple(self.parts)
        if len(tokens) < 1:
            raise ValueError("prompt must contain at least one token")
        labels = [p.label for p in parts]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate part labels: {labels}")
        for p in parts:
            if p.indices[-1] >= len(tokens):
                raise ValueError(
                    f"part {p.label!r} references token {p.indices[-1]} "
                    f"but prompt has {len(tokens)} tokens"
                )
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "parts", parts)

    @property
    def n(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ExtractionWindow:
    """Timestep window [t_end, t_start] and the layer set to aggregate over.

    t_start is the noisier end (larger t). Defaults follow the canonical
    configuration: 450 down to 100, layer 11 only.
    """

    t_start: int = DEFAULT_T_START
    t_end: int = DEFAULT_T_END
    layers: tuple[int, ...] = DEFAULT_LAYERS

    def __post_init__(self):
        if not self.t_start > self.t_end >= 0:
            raise ValueError(f"need t_start > t_end >= 0, got ({self.t_start}, {self.t_end})")
        layers = tuple(sorted(set(int(l) for l in self.layers)))
        if not layers:
            raise ValueError("layer set must be non-empty")
        object.__setattr__(self, "layers", layers)

    def contains(self, t: int, l: int) -> bool:
        return self.t_end <= t <= self.t_start and l in self.layers


class AttentionRecord:
    """One captured attention tensor: camera c, timestep t, layer l.

    ``values`` has shape (H, W, n), spatial-major with the token axis
    fastest; entries are finite and non-negative. Stored widened to float64;
    the on-disk form is 32-bit.
    """

    __slots__ = ("t", "l", "camera_id", "values")

    def __init__(self, t: int, l: int, camera_id: int, values):
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 3:
            raise ValueError(f"attention values must be (H, W, n), got shape {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("attention values must be finite")
        if (vals < 0).any():
            raise ValueError("attention values must be non-negative")
        vals = vals.copy()
        vals.flags.writeable = False
        self.t = int(t)
        self.l = int(l)
        self.camera_id = int(camera_id)
        self.values = vals

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # (H, W, n)

    def token_slice(self, i: int) -> np.ndarray:
        """The (H, W) map for token i, contiguous thanks to token-minor layout."""
        return self.values[:, :, i]

    def __repr__(self) -> str:
        h, w, n = self.shape
        return f"AttentionRecord(t={self.t}, l={self.l}, cam={self.camera_id}, {h}x{w}x{n})"


@dataclass(frozen=True)
class PartAffinityMap:
    """Per-part, per-camera affinity grid. Normalized maps peak at exactly 1."""

    part_label: str
    camera_id: int
    values: np.ndarray  # (H, W) float64

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).copy()
        if vals.ndim != 2:
            raise ValueError(f"affinity map must be 2-D, got shape {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("affinity map must be finite")
        if (vals < 0).any():
            raise ValueError("affinity map must be non-negative")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def is_normalized(self) -> bool:
        m = self.values.max(initial=0.0)
        return m == 1.0 or m == 0.0


def resolve_part_indices(
    prompt_tokens: Sequence[str],
    part_phrase: str,
    tokenizer: Optional[Callable[[str], list[str]]] = None,
) -> PartSpec:
    """Find ``part_phrase`` as a contiguous token run inside the prompt.

    Returns the first match as a PartSpec; raises NotASubsequence when the
    phrase's tokens do not occur contiguously. This is the prompt checker
    that keeps made-up parts out of the extraction stage.
    """
    tok = tokenizer if tokenizer is not None else whitespace_tokenize
    phrase_tokens = tok(part_phrase)
    prompt = list(prompt_tokens)
    if not phrase_tokens:
        raise NotASubsequence(f"part phrase {part_phrase!r} tokenizes to nothing")
    k = len(phrase_tokens)
    for start in range(len(prompt) - k + 1):
        if prompt[start : start + k] == phrase_tokens:
            return PartSpec(label=part_phrase, indices=tuple(range(start, start + k)))
    raise NotASubsequence(
        f"part phrase {part_phrase!r} is not a contiguous token run of the prompt"
    )


def aggregate(
    records: Iterable[AttentionRecord],
    window: ExtractionWindow,
    part: PartSpec,
) -> PartAffinityMap:
    """Mean of token slices over the window: all (t, l, i in I_p) combinations.

    Realized as sum + count over the records actually present, so sparse
    timestep schedules aggregate just as well as dense ones. Slices are
    summed in ascending (t, l, i) order for bit-reproducibility.
    """
    records = list(records)
    if not records:
        raise AggregationError("no attention records supplied")
    cam = records[0].camera_id
    shape = records[0].shape
    for r in records:
        if r.camera_id != cam:
            raise AggregationError(f"mixed camera ids: {cam} and {r.camera_id}")
        if r.shape != shape:
            raise AggregationError(f"mixed record shapes: {shape} and {r.shape}")
    h, w, n = shape
    if part.indices[-1] >= n:
        raise AggregationError(
            f"part {part.label!r} token index {part.indices[-1]} out of range for n={n}"
        )
    selected = sorted(
        (r for r in records if window.contains(r.t, r.l)), key=lambda r: (r.t, r.l)
    )
    if not selected:
        raise AggregationError(
            f"no records fall inside window t in [{window.t_end}, {window.t_start}], "
            f"layers {window.layers}"
        )
    total = np.zeros((h, w), dtype=np.float64)
    count = 0
    for r in selected:
        for i in part.indices:
            total += r.token_slice(i)
            count += 1
    return PartAffinityMap(part_label=part.label, camera_id=cam, values=total / count)


def normalize(pam: PartAffinityMap) -> PartAffinityMap:
    """Divide by the per-map maximum; an all-zero map passes through."""
    m = float(pam.values.max(initial=0.0))
    if m == 0.0:
        return pam
    return PartAffinityMap(
        part_label=pam.part_label, camera_id=pam.camera_id, values=pam.values / m
    )
