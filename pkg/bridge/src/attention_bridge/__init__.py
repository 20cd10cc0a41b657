"""Capture cross-attention from a diffusion model and export it as files.

The package noises rendered views to a start timestep, denoises them back
down through a window, records attention at configured layers, and writes
PAM1 containers plus a tokenizer-accurate prompt spec. The downstream
consumer reads those files; nothing here imports it.
"""

from .config import BridgeConfig, BridgeError
from .export import condition_on_views, export_attention
from .mockmodel import MockPipeline

__all__ = [
    "BridgeConfig",
    "BridgeError",
    "MockPipeline",
    "condition_on_views",
    "export_attention",
]
