"""Guidance models for score distillation.

A guidance model predicts the noise component of a noisy image. Two
implementations live here: an oracle that knows per-pose target images
(so the predicted noise has a closed form), and a small attention model
whose cross- and self-attention scores can be modulated by rendered part
affinities. Both hold frozen parameters; nothing here is trained.
"""

from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .cameras import CameraPose
from .extraction import PartSpec, PromptSpec
from .modulation import ModulationConfig, modulate_cross, modulate_self, softmax_rows
from .schedule import NoiseSchedule


class CapabilityError(RuntimeError):
    """The guidance model cannot do what was asked of it."""


class GuidanceError(ValueError):
    """Malformed guidance inputs (shapes, unknown poses, bad timesteps)."""


@dataclass(frozen=True)
class ModulationInputs:
    """Resampled part affinities plus the config that drives modulation."""

    parts: tuple[tuple[PartSpec, np.ndarray], ...]
    config: ModulationConfig


class GuidanceModel(abc.ABC):
    """Frozen noise predictor; subclasses expose _frozen_arrays for hashing."""

    exposes_attention: bool = False

    @abc.abstractmethod
    def predict_noise(
        self,
        x_t: np.ndarray,
        t: int,
        schedule: NoiseSchedule,
        pose: Optional[CameraPose] = None,
        modulation: Optional[ModulationInputs] = None,
    ) -> np.ndarray:
        """Predicted noise for a flat (hw, channels) noisy image."""

    def _frozen_arrays(self) -> Sequence[np.ndarray]:
        return ()

    def parameter_fingerprint(self) -> str:
        """SHA-256 over all frozen parameters, for frozen-weights checks."""
        digest = hashlib.sha256()
        for arr in self._frozen_arrays():
            digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return digest.hexdigest()


def _as_flat_image(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise GuidanceError(f"{name} must be flat (hw, channels), got shape {x.shape}")
    if not np.isfinite(x).all():
        raise GuidanceError(f"{name} must be finite")
    return x


class SyntheticOracleGuidance(GuidanceModel):
    """Noise prediction from known per-pose targets.

    With target x* the exact noise in x_t = sqrt(ab) x* + sqrt(1-ab) eps
    is eps = (x_t - sqrt(ab) x*) / sqrt(1-ab); this model returns that
    expression with the stored target substituted for x*.
    """

    exposes_attention = False

    def __init__(self, targets: Mapping[int, np.ndarray]):
        if not targets:
            raise GuidanceError("oracle guidance needs at least one target image")
        frozen = {}
        for pose_id, img in targets.items():
            arr = _as_flat_image(img, f"target for pose {pose_id}")
            arr = arr.copy()
            arr.flags.writeable = False
            frozen[int(pose_id)] = arr
        self._targets = frozen

    def _frozen_arrays(self):
        return [self._targets[k] for k in sorted(self._targets)]

    def predict_noise(self, x_t, t, schedule, pose=None, modulation=None):
        if modulation is not None:
            raise CapabilityError("oracle guidance has no attention to modulate")
        if pose is None:
            raise GuidanceError("oracle guidance requires a pose")
        if pose.id not in self._targets:
            raise GuidanceError(f"no target registered for pose id {pose.id}")
        x_t = _as_flat_image(x_t, "x_t")
        target = self._targets[pose.id]
        if target.shape != x_t.shape:
            raise GuidanceError(
                f"target shape {target.shape} != x_t shape {x_t.shape} for pose {pose.id}"
            )
        noise_level = schedule.noise_level(t)
        if noise_level == 0.0:
            raise GuidanceError(f"timestep {t} carries no noise; nothing to predict")
        return (x_t - schedule.signal(t) * target) / noise_level


def _positional_features(resolution: int, octaves: int = 2) -> np.ndarray:
    """Fixed sin/cos features of pixel-center coordinates, flat (hw, 4*octaves)."""
    coords = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(coords, coords, indexing="ij")
    flat = np.stack([u.reshape(-1), v.reshape(-1)], axis=1)
    feats = []
    for k in range(octaves):
        ang = flat * (2.0**k) * np.pi
        feats.append(np.sin(ang))
        feats.append(np.cos(ang))
    return np.concatenate(feats, axis=1)


def _pairwise_sqdist(resolution: int) -> np.ndarray:
    coords = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(coords, coords, indexing="ij")
    pts = np.stack([u.reshape(-1), v.reshape(-1)], axis=1)
    diff = pts[:, None, :] - pts[None, :, :]
    return (diff**2).sum(axis=2)


class ToyAttentionGuidance(GuidanceModel):
    """One cross-attention and one self-attention block over image patches.

    Queries come from the noisy pixel values concatenated with fixed
    positional features; keys are seeded token embeddings. Token colors
    define what each prompt token "wants" a pixel to look like, and an
    optional per-token logit bias sets which tokens dominate by default.
    Self-attention carries a distance penalty so unmodulated attention is
    local rather than a global average. Pre-softmax scores for both blocks
    pass through the modulation hooks when modulation inputs are supplied.
    """

    exposes_attention = True

    def __init__(
        self,
        prompt: PromptSpec,
        token_colors: np.ndarray,
        resolution: int,
        seed: int = 0,
        token_bias: Optional[np.ndarray] = None,
        embed_dim: int = 16,
        query_scale: float = 0.35,
        locality: float = 30.0,
    ):
        n = len(prompt.tokens)
        token_colors = np.asarray(token_colors, dtype=np.float64)
        if token_colors.shape != (n, 3):
            raise GuidanceError(
                f"token_colors must be ({n}, 3) for this prompt, got {token_colors.shape}"
            )
        if token_bias is None:
            token_bias = np.zeros(n)
        token_bias = np.asarray(token_bias, dtype=np.float64)
        if token_bias.shape != (n,):
            raise GuidanceError(f"token_bias must be ({n},), got {token_bias.shape}")
        if resolution < 2 or resolution > 64:
            raise GuidanceError("resolution must lie in [2, 64] (self-attention is dense)")
        self.prompt = prompt
        self.resolution = int(resolution)
        self.locality = float(locality)
        self._scale = 1.0 / np.sqrt(embed_dim)
        rng = np.random.default_rng(seed)
        pos = _positional_features(resolution)
        feature_dim = 3 + pos.shape[1]
        self._token_embeddings = rng.normal(size=(n, embed_dim))
        self._w_query = rng.normal(size=(feature_dim, embed_dim)) * query_scale
        self._token_colors = token_colors.copy()
        self._token_bias = token_bias.copy()
        self._pos_features = pos
        self._sqdist = _pairwise_sqdist(resolution)
        for arr in self._frozen_arrays():
            arr.flags.writeable = False
        self.last_scores: dict[str, np.ndarray] = {}

    def _frozen_arrays(self):
        return (
            self._token_embeddings,
            self._w_query,
            self._token_colors,
            self._token_bias,
            self._pos_features,
            self._sqdist,
        )

    def attention_scores(self, x_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pre-softmax (S_cross, S_self) for a flat (hw, 3) noisy image."""
        x_t = _as_flat_image(x_t, "x_t")
        hw = self.resolution * self.resolution
        if x_t.shape != (hw, 3):
            raise GuidanceError(f"x_t must be ({hw}, 3) at this resolution, got {x_t.shape}")
        feats = np.concatenate([x_t, self._pos_features], axis=1)
        q = feats @ self._w_query
        s_cross = q @ self._token_embeddings.T * self._scale + self._token_bias[None, :]
        s_self = q @ q.T * self._scale - self.locality * self._sqdist
        return s_cross, s_self

    def predict_noise(self, x_t, t, schedule, pose=None, modulation=None):
        s_cross, s_self = self.attention_scores(x_t)
        self.last_scores = {"cross": s_cross, "self": s_self}
        if modulation is not None and modulation.parts:
            cfg = modulation.config
            _, a_cross = modulate_cross(s_cross, modulation.parts, cfg.alpha_cross)
            _, a_self = modulate_self(s_self, modulation.parts, cfg.alpha_self)
        else:
            a_cross = softmax_rows(s_cross)
            a_self = softmax_rows(s_self)
        token_mix = a_cross @ self._token_colors
        target = a_self @ token_mix
        noise_level = schedule.noise_level(t)
        if noise_level == 0.0:
            raise GuidanceError(f"timestep {t} carries no noise; nothing to predict")
        x_t = np.asarray(x_t, dtype=np.float64)
        return (x_t - schedule.signal(t) * target) / noise_level
