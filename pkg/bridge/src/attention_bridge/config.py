"""Bridge run configuration, loadable from JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional


class BridgeError(ValueError):
    """Invalid configuration or a capture contract violation."""


@dataclass(frozen=True)
class BridgeConfig:
    """Everything one export run needs.

    ``views`` are image files (binary PPM) paired positionally with the
    camera ids listed in the camera manifest. ``num_steps`` is how many
    denoising steps the scheduler places inside the window.
    """

    model_id: str = "mock-diffusion-v1"
    window_t_start: int = 450
    window_t_end: int = 100
    layers: tuple = (11,)
    views: tuple = ()
    cameras: Optional[str] = None
    prompt: str = "a blob with an upper lobe and a lower lobe"
    part_phrases: tuple = ("upper lobe", "lower lobe")
    output_dir: str = "bridge_out"
    num_steps: int = 8
    seed: int = 0

    def __post_init__(self):
        # t_start == t_end is a legal degenerate window (single capture
        # step); t_start = 0 additionally means no noise is added at all.
        if not self.window_t_start >= self.window_t_end >= 0:
            raise BridgeError(
                f"need t_start >= t_end >= 0, got ({self.window_t_start}, {self.window_t_end})"
            )
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if not self.layers:
            raise BridgeError("layer set must be non-empty")
        if any(l < 0 for l in self.layers):
            raise BridgeError("layer indices must be non-negative")
        object.__setattr__(self, "views", tuple(str(v) for v in self.views))
        object.__setattr__(self, "part_phrases", tuple(self.part_phrases))
        if not self.part_phrases:
            raise BridgeError("need at least one part phrase")
        if self.num_steps < 1:
            raise BridgeError(f"num_steps must be >= 1, got {self.num_steps}")

    @classmethod
    def from_dict(cls, raw: dict) -> "BridgeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise BridgeError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "BridgeConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "window_t_start": self.window_t_start,
            "window_t_end": self.window_t_end,
            "layers": list(self.layers),
            "views": list(self.views),
            "cameras": self.cameras,
            "prompt": self.prompt,
            "part_phrases": list(self.part_phrases),
            "output_dir": self.output_dir,
            "num_steps": self.num_steps,
            "seed": self.seed,
        }

    def in_window(self, t: int) -> bool:
        return self.window_t_end <= t <= self.window_t_start
