"""Capture attention while denoising conditioned views, then write files.

Outputs per run: one PAM1 container per camera, one prompt spec JSON with
indices from the model's own tokenizer, and a capture manifest recording
the model id, scheduler, and step list. Every record's timestep lies
inside the configured window by construction; a final guard enforces it
before anything is written.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pamwriter
from .config import BridgeConfig, BridgeError
from .mockmodel import MockPipeline


def read_ppm(path) -> np.ndarray:
    """Minimal binary PPM (P6, maxval 255) reader returning floats in [0, 1]."""
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if not m:
        raise BridgeError(f"{path}: not a binary PPM with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    payload = data[m.end():]
    if len(payload) != h * w * 3:
        raise BridgeError(f"{path}: payload is {len(payload)} bytes, expected {h * w * 3}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float64) / 255.0


def resolve_prompt_parts(tokens: list[str], phrases) -> list[dict]:
    """Locate each phrase as a contiguous run of the model's tokens."""
    parts = []
    for phrase in phrases:
        needle = phrase.lower().split()
        k = len(needle)
        for start in range(len(tokens) - k + 1):
            if tokens[start:start + k] == needle:
                parts.append({"label": phrase, "indices": list(range(start, start + k))})
                break
        else:
            raise BridgeError(
                f"part phrase {phrase!r} is not a contiguous run of the model tokenization"
            )
    return parts


def _camera_ids(config: BridgeConfig) -> list[int]:
    if config.cameras is None:
        return list(range(len(config.views)))
    manifest = json.loads(Path(config.cameras).read_text())
    ids = [int(entry["id"]) for entry in manifest]
    if len(ids) != len(config.views):
        raise BridgeError(
            f"{len(config.views)} views but {len(ids)} cameras in the manifest"
        )
    return ids


@dataclass(frozen=True)
class ConditionedView:
    camera_id: int
    latent: np.ndarray
    noised: np.ndarray
    records: list


def condition_on_views(config: BridgeConfig, pipeline: MockPipeline) -> list[ConditionedView]:
    """Encode each view, noise it to t_start, denoise to t_end with hooks.

    Returns per-view latents plus the (t, layer, attention) records the
    hooks captured. t_start = 0 degenerates to no noise at all, so the
    latent enters denoising unchanged.
    """
    for layer in config.layers:
        if layer >= pipeline.n_layers:
            raise BridgeError(
                f"layer {layer} out of range for model with {pipeline.n_layers} layers"
            )
    tokens = pipeline.tokenizer.tokenize(config.prompt)
    steps = pipeline.scheduler.timesteps(
        config.window_t_start, config.window_t_end, config.num_steps
    )
    rng = np.random.default_rng(config.seed)
    out = []
    camera_ids = _camera_ids(config)
    for camera_id, view_path in zip(camera_ids, config.views):
        latent = pipeline.encode(read_ppm(view_path))
        if config.window_t_start == 0:
            noised = latent.copy()
        else:
            eps = rng.standard_normal(latent.shape)
            noised = pipeline.scheduler.add_noise(latent, eps, config.window_t_start)
        records = []
        x = noised
        for idx, t in enumerate(steps):
            for layer in config.layers:
                records.append((t, layer, pipeline.attention(x, t, layer, tokens)))
            eps_hat = pipeline.predict_noise(x, t, tokens)
            t_next = steps[idx + 1] if idx + 1 < len(steps) else config.window_t_end
            x = pipeline.scheduler.step(x, eps_hat, t, t_next)
        out.append(
            ConditionedView(camera_id=camera_id, latent=latent, noised=noised, records=records)
        )
    return out


def export_attention(config: BridgeConfig, pipeline: MockPipeline | None = None) -> dict:
    """Run the capture and write containers, prompt spec, and manifest.

    Returns a summary dict (paths, record counts, step list).
    """
    pipeline = pipeline if pipeline is not None else MockPipeline(model_id=config.model_id)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokens = pipeline.tokenizer.tokenize(config.prompt)
    parts = resolve_prompt_parts(tokens, config.part_phrases)
    views = condition_on_views(config, pipeline)
    steps = pipeline.scheduler.timesteps(
        config.window_t_start, config.window_t_end, config.num_steps
    )

    containers = []
    total_records = 0
    for view in views:
        for t, layer, _ in view.records:
            if not config.in_window(t):
                raise BridgeError(f"refusing to write record at t={t} outside the window")
            if layer not in config.layers:
                raise BridgeError(f"refusing to write record for unconfigured layer {layer}")
        path = out_dir / f"cam{view.camera_id:04d}.pam"
        pamwriter.write_container(
            path,
            [(t, layer, view.camera_id, values) for t, layer, values in view.records],
        )
        containers.append(str(path))
        total_records += len(view.records)

    prompt_path = out_dir / "prompt.json"
    prompt_path.write_text(
        json.dumps({"tokens": tokens, "parts": parts}, indent=2, sort_keys=True) + "\n"
    )
    manifest = {
        "model_id": pipeline.model_id,
        "native_resolution": pipeline.native_resolution,
        "scheduler": {
            "kind": "linear-beta-ddim",
            "num_train_timesteps": pipeline.scheduler.num_train_timesteps,
            "beta_start": pipeline.scheduler.beta_start,
            "beta_end": pipeline.scheduler.beta_end,
        },
        "window": [config.window_t_start, config.window_t_end],
        "layers": list(config.layers),
        "steps": steps,
        "views": list(config.views),
        "config_echo": config.to_dict(),
    }
    manifest_path = out_dir / "capture_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {
        "containers": containers,
        "prompt_spec": str(prompt_path),
        "manifest": str(manifest_path),
        "records": total_records,
        "steps": steps,
    }
