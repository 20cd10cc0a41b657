"""Camera poses on a view sphere and pinhole ray generation.

Poses are (radius, elevation, azimuth) look-at cameras. Azimuths are
stratum midpoints over [0, 360) so a sweep covers the object evenly;
elevations are drawn uniformly from a configurable band. Both the affinity
field and the asset field consume the same ray geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RADIUS = 2.5
DEFAULT_ELEVATION_RANGE = (-10.0, 45.0)
DEFAULT_FOV = 40.0


@dataclass(frozen=True)
class CameraPose:
    """A look-at camera on a sphere around ``look_at``.

    Angles are degrees. ``elevation`` is measured from the xy-plane toward
    +z; ``azimuth`` spins about +z and is normalized into [0, 360) so that
    362° and 2° are the same camera, bit for bit.
    """

    id: int
    radius: float
    elevation: float
    azimuth: float
    fov: float = DEFAULT_FOV
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0.0 < self.fov < 180.0:
            raise ValueError(f"fov must lie in (0, 180), got {self.fov}")
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError(f"elevation must lie in [-90, 90], got {self.elevation}")
        # float % is exact (fmod semantics), so equal angles mod 360 collapse
        # to bit-identical values here.
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)

    def position(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        offset = np.array(
            [
                self.radius * math.cos(el) * math.cos(az),
                self.radius * math.cos(el) * math.sin(az),
                self.radius * math.sin(el),
            ]
        )
        return np.asarray(self.look_at, dtype=np.float64) + offset

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward) with forward toward look_at."""
        pos = self.position()
        forward = np.asarray(self.look_at, dtype=np.float64) - pos
        forward = forward / np.linalg.norm(forward)
        world_up = np.asarray(self.up, dtype=np.float64)
        right = np.cross(forward, world_up)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            # Looking straight along the up axis; fall back to +x so the
            # frame stays well defined at the poles.
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
            norm = np.linalg.norm(right)
        right = right / norm
        cam_up = np.cross(right, forward)
        return right, cam_up, forward

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "radius": self.radius,
            "elevation_deg": self.elevation,
            "azimuth_deg": self.azimuth,
            "fov_deg": self.fov,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(
            id=int(d["id"]),
            radius=float(d["radius"]),
            elevation=float(d["elevation_deg"]),
            azimuth=float(d["azimuth_deg"]),
            fov=float(d.get("fov_deg", DEFAULT_FOV)),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass(frozen=True)
class RayBundle:
    """All rays of one rendered view, row-major from the top-left pixel."""

    origins: np.ndarray  # (res, res, 3)
    directions: np.ndarray  # (res, res, 3), unit norm
    near: float
    far: float

    @property
    def resolution(self) -> int:
        return self.origins.shape[0]

    def at(self, row: int, col: int) -> Ray:
        return Ray(self.origins[row, col], self.directions[row, col], self.near, self.far)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, 3) origins and directions, N = res*res."""
        return self.origins.reshape(-1, 3), self.directions.reshape(-1, 3)


def sample_sphere_poses(
    count: int,
    radius: float = DEFAULT_RADIUS,
    elevation_range: tuple[float, float] = DEFAULT_ELEVATION_RANGE,
    seed: int = 0,
    fov: float = DEFAULT_FOV,
) -> list[CameraPose]:
    """Sample ``count`` poses: stratified azimuth midpoints, uniform elevation.

    Azimuth i sits at the midpoint of stratum [i*360/count, (i+1)*360/count),
    so pose layout is deterministic in count; only elevations consume the
    seed. Raises ValueError for count < 1 or an inverted elevation range.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    lo, hi = float(elevation_range[0]), float(elevation_range[1])
    if lo > hi:
        raise ValueError(f"empty elevation range ({lo} > {hi})")
    if not (-90.0 <= lo and hi <= 90.0):
        raise ValueError(f"elevation range must sit inside [-90, 90], got ({lo}, {hi})")
    rng = np.random.default_rng(seed)
    elevations = rng.uniform(lo, hi, size=count)
    poses = []
    for i in range(count):
        azimuth = (i + 0.5) * 360.0 / count
        poses.append(
            CameraPose(id=i, radius=radius, elevation=float(elevations[i]), azimuth=azimuth, fov=fov)
        )
    return poses


def rays_for(pose: CameraPose, resolution: int) -> RayBundle:
    """Pinhole rays through pixel centers of a resolution² image.

    Row 0 is the top of the image; directions are unit length. near/far
    bracket a unit-ish scene: [max(radius-1, 0), radius+1].
    """
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    right, cam_up, forward = pose.basis()
    tan_half = math.tan(math.radians(pose.fov) / 2.0)
    # Pixel-center offsets in [-1, 1], top row first.
    steps = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u = steps * tan_half  # columns, rightward
    v = -steps * tan_half  # rows, downward in image = negative camera-up
    dirs = (
        forward[None, None, :]
        + u[None, :, None] * right[None, None, :]
        + v[:, None, None] * cam_up[None, None, :]
    )
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position(), dirs.shape).copy()
    near = max(pose.radius - 1.0, 0.0)
    far = pose.radius + 1.0
    return RayBundle(origins=origins, directions=dirs, near=near, far=far)
