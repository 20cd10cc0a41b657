"""Analytic test scene: a Gaussian density ball with two part lobes.

Everything here has a closed-form pointwise definition, so renders can be
checked against dense quadrature and fits against exact ground truth. The
scene doubles as the SDS target generator (RGB channel) and the affinity
ground truth (per-part channel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import CameraPose, rays_for


@dataclass(frozen=True)
class SyntheticScene:
    """Gaussian ball at the origin; two Gaussian part lobes along z.

    Affinity of part p at x is exp(-|x - mu_p|^2 / (2 s_p^2)), in (0, 1].
    RGB blends each part's color over a gray base by that affinity.
    """

    density_amplitude: float = 12.0
    density_sigma: float = 0.38
    part_centers: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.45), (0.0, 0.0, -0.45))
    part_sigma: float = 0.22
    part_labels: tuple[str, ...] = ("upper lobe", "lower lobe")
    part_colors: tuple[tuple[float, float, float], ...] = ((0.9, 0.15, 0.15), (0.15, 0.25, 0.9))
    base_color: tuple[float, float, float] = (0.45, 0.45, 0.45)

    def density(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        r2 = np.sum(pts * pts, axis=-1)
        return self.density_amplitude * np.exp(-r2 / (2.0 * self.density_sigma**2))

    def affinity(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        centers = np.asarray(self.part_centers, dtype=np.float64)
        d2 = np.sum((pts[..., None, :] - centers) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * self.part_sigma**2))

    def rgb(self, points: np.ndarray) -> np.ndarray:
        aff = self.affinity(points)
        base = np.asarray(self.base_color, dtype=np.float64)
        colors = np.asarray(self.part_colors, dtype=np.float64)
        out = np.broadcast_to(base, aff.shape[:-1] + (3,)).copy()
        for p in range(colors.shape[0]):
            out += aff[..., p : p + 1] * (colors[p] - base)
        return np.clip(out, 0.0, 1.0)

    def emission(self, points: np.ndarray, channel: str) -> np.ndarray:
        if channel == "affinity":
            return self.affinity(points)
        if channel == "rgb":
            return self.rgb(points)
        raise ValueError(f"unknown channel {channel!r}")

    def channel_labels(self, channel: str) -> tuple[str, ...]:
        return self.part_labels if channel == "affinity" else ("r", "g", "b")


def render_scene(
    scene: SyntheticScene,
    pose: CameraPose,
    resolution: int,
    channel: str = "affinity",
    samples: int = 4096,
    chunk: int = 512,
) -> np.ndarray:
    """Midpoint-rule quadrature render of the analytic scene.

    Same compositing equations as the learned field, evaluated pointwise on
    the closed-form scene with a dense sample count. Returns a
    (resolution, resolution, channels) grid. Chunked over rays to bound
    memory.
    """
    bundle = rays_for(pose, resolution)
    origins, dirs = bundle.flat()
    near, far = bundle.near, bundle.far
    delta = (far - near) / samples
    ts = near + delta * (np.arange(samples) + 0.5)
    n_chan = len(scene.channel_labels(channel))
    out = np.empty((origins.shape[0], n_chan))
    for start in range(0, origins.shape[0], chunk):
        o = origins[start : start + chunk]
        d = dirs[start : start + chunk]
        pts = o[:, None, :] + ts[None, :, None] * d[:, None, :]
        sd = scene.density(pts) * delta
        csum = np.cumsum(sd, axis=1)
        weights = np.exp(sd - csum) - np.exp(-csum)
        emit = scene.emission(pts, channel)
        out[start : start + chunk] = np.sum(weights[:, :, None] * emit, axis=1)
    return np.clip(out.reshape(resolution, resolution, n_chan), 0.0, 1.0)


def part_masks(affinity_grids: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask per part: pixels at or above ``threshold`` of that
    part's per-grid maximum. An all-zero grid yields an empty mask."""
    grids = np.asarray(affinity_grids, dtype=np.float64)
    maxes = grids.reshape(-1, grids.shape[2]).max(axis=0)
    masks = np.zeros(grids.shape, dtype=bool)
    for p in range(grids.shape[2]):
        if maxes[p] > 0:
            masks[:, :, p] = grids[:, :, p] >= threshold * maxes[p]
    return masks


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; empty union gives 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def scene_affinity_maps(
    scene: SyntheticScene,
    poses,
    resolution: int,
    samples: int = 1024,
):
    """Ground-truth PartAffinityMap set for the given poses (one per part)."""
    from .extraction import PartAffinityMap

    maps = []
    for pose in poses:
        grids = render_scene(scene, pose, resolution, channel="affinity", samples=samples)
        for p, label in enumerate(scene.part_labels):
            maps.append(
                PartAffinityMap(part_label=label, camera_id=pose.id, values=grids[:, :, p])
            )
    return maps
