"""A small deterministic stand-in for a hosted diffusion pipeline.

It mimics the pieces the exporter touches: a tokenizer with BOS/EOS
sentinels, a VAE-style encoder from RGB images to a 4-channel latent, a
linear-beta scheduler, and a denoiser made of labeled attention layers.
Real-model runs swap this object out; the capture code never knows the
difference. The reference hosted model captures at a native latent
resolution of 128; the mock defaults to 16 to keep test payloads small.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import BridgeError

BOS = "<|start|>"
EOS = "<|end|>"


class MockTokenizer:
    """Lowercase whitespace tokenizer wrapped in BOS/EOS sentinels."""

    def tokenize(self, text: str) -> list[str]:
        return [BOS] + text.lower().split() + [EOS]


@dataclass(frozen=True)
class MockScheduler:
    """Linear-beta diffusion schedule with DDIM-style deterministic steps."""

    num_train_timesteps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.num_train_timesteps)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    def timesteps(self, t_start: int, t_end: int, num_steps: int) -> list[int]:
        """Descending step list inside [t_end, t_start], endpoints included."""
        if not 0 <= t_end <= t_start < len(self.alpha_bar):
            raise BridgeError(
                f"window ({t_start}, {t_end}) outside schedule of length {len(self.alpha_bar)}"
            )
        grid = np.unique(np.round(np.linspace(t_end, t_start, num_steps)).astype(int))
        return [int(t) for t in grid[::-1]]

    def add_noise(self, latent: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
        ab = self.alpha_bar[t]
        return np.sqrt(ab) * latent + np.sqrt(1.0 - ab) * eps

    def step(self, latent: np.ndarray, eps_hat: np.ndarray, t: int, t_next: int) -> np.ndarray:
        ab_t, ab_n = self.alpha_bar[t], self.alpha_bar[t_next]
        x0 = (latent - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        return np.sqrt(ab_n) * x0 + np.sqrt(1.0 - ab_n) * eps_hat


class MockPipeline:
    """Denoiser with ``n_layers`` labeled attention blocks.

    ``attention_mode`` selects what the blocks emit: "constant" gives a
    uniform map (handy for passthrough checks), "structured" derives
    query/key scores from the latent and token embeddings so maps vary
    with timestep, layer, and content.
    """

    def __init__(
        self,
        model_id: str = "mock-diffusion-v1",
        native_resolution: int = 16,
        n_layers: int = 16,
        latent_channels: int = 4,
        embed_dim: int = 8,
        attention_mode: str = "structured",
        seed: int = 0,
    ):
        if attention_mode not in ("structured", "constant"):
            raise BridgeError(f"unknown attention mode {attention_mode!r}")
        if native_resolution < 2:
            raise BridgeError(f"native resolution must be >= 2, got {native_resolution}")
        self.model_id = model_id
        self.native_resolution = native_resolution
        self.n_layers = n_layers
        self.latent_channels = latent_channels
        self.embed_dim = embed_dim
        self.attention_mode = attention_mode
        self.tokenizer = MockTokenizer()
        self.scheduler = MockScheduler()
        rng = np.random.default_rng(seed)
        self._w_q = rng.normal(size=(n_layers, latent_channels, embed_dim)) * 0.5
        self._token_seed = int(rng.integers(2**31))

    # -- encoding ----------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Block-mean downsample an (H, W, 3) image in [0, 1] to the latent.

        Channels are the three color planes plus luminance, shifted to be
        roughly zero-centered like a VAE latent.
        """
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise BridgeError(f"expected an (H, W, 3) image, got {img.shape}")
        res = self.native_resolution
        h, w = img.shape[:2]
        if h < res or w < res:
            raise BridgeError(f"image {h}x{w} smaller than native resolution {res}")
        ys = np.linspace(0, h, res + 1).astype(int)
        xs = np.linspace(0, w, res + 1).astype(int)
        down = np.empty((res, res, 3))
        for i in range(res):
            for j in range(res):
                down[i, j] = img[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(0, 1))
        lum = down.mean(axis=2, keepdims=True)
        return np.concatenate([down, lum], axis=2) - 0.5

    # -- tokens ------------------------------------------------------------

    def token_embeddings(self, tokens: list[str]) -> np.ndarray:
        """Deterministic per-token embeddings, stable across calls."""
        out = np.empty((len(tokens), self.embed_dim))
        for i, tok in enumerate(tokens):
            digest = hashlib.sha256(f"{self._token_seed}:{tok}".encode()).digest()
            h = int.from_bytes(digest[:8], "little")
            out[i] = np.random.default_rng(h).normal(size=self.embed_dim)
        return out

    # -- denoising ---------------------------------------------------------

    def attention(self, latent: np.ndarray, t: int, layer: int, tokens: list[str]) -> np.ndarray:
        """Cross-attention map (H, W, n) at one layer of one step."""
        if not 0 <= layer < self.n_layers:
            raise BridgeError(f"layer {layer} out of range for model with {self.n_layers} layers")
        res = latent.shape[0]
        n = len(tokens)
        if self.attention_mode == "constant":
            return np.full((res, res, n), 1.0 / n)
        q = latent.reshape(-1, self.latent_channels) @ self._w_q[layer]
        k = self.token_embeddings(tokens)
        scores = q @ k.T / np.sqrt(self.embed_dim) + 0.001 * t
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        attn = e / e.sum(axis=1, keepdims=True)
        return attn.reshape(res, res, n)

    def predict_noise(self, latent: np.ndarray, t: int, tokens: list[str]) -> np.ndarray:
        """Deterministic mock noise prediction (shape-preserving)."""
        phase = np.linspace(0.0, np.pi, latent.size).reshape(latent.shape)
        return 0.1 * np.sin(phase + 0.01 * t) + 0.05 * latent
