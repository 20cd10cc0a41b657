"""Pose sampling and ray geometry: closed-form pinhole oracles."""

import math

import numpy as np
import pytest

from partlift.cameras import CameraPose, RayBundle, rays_for, sample_sphere_poses


def pose(az=30.0, el=20.0, radius=2.5, fov=40.0, pid=0):
    return CameraPose(id=pid, radius=radius, elevation=el, azimuth=az, fov=fov)


# ---------------------------------------------------------------------------
# CameraPose


def test_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(id=0, radius=0.0, elevation=0.0, azimuth=0.0)
    with pytest.raises(ValueError):
        CameraPose(id=0, radius=1.0, elevation=95.0, azimuth=0.0)
    with pytest.raises(ValueError):
        CameraPose(id=0, radius=1.0, elevation=0.0, azimuth=0.0, fov=180.0)


def test_position_on_sphere():
    p = pose(az=45.0, el=30.0, radius=2.0)
    np.testing.assert_allclose(np.linalg.norm(p.position()), 2.0, atol=1e-12)
    # elevation 90 puts the camera on the +z axis
    top = pose(az=123.0, el=90.0, radius=3.0)
    np.testing.assert_allclose(top.position(), [0, 0, 3.0], atol=1e-12)


def test_azimuth_normalized_to_half_open_turn():
    assert pose(az=405.0).azimuth == 45.0
    assert pose(az=-10.0).azimuth == 350.0
    assert pose(az=360.0).azimuth == 0.0


def test_basis_is_orthonormal_camera_triple():
    r, u, f = pose(az=77.0, el=-5.0).basis()
    for vec in (r, u, f):
        np.testing.assert_allclose(np.linalg.norm(vec), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.dot(r, u), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.dot(r, f), 0.0, atol=1e-12)
    # conventional camera frame: (right, up, backward) is right-handed
    np.testing.assert_allclose(np.cross(r, u), -f, atol=1e-12)


def test_basis_defined_at_poles():
    r, u, f = pose(az=0.0, el=90.0).basis()
    np.testing.assert_allclose(np.linalg.norm(r), 1.0, atol=1e-12)
    np.testing.assert_allclose(f, [0, 0, -1.0], atol=1e-12)


def test_pose_dict_round_trip():
    p = pose(az=12.25, el=-7.5, radius=3.0, fov=55.0, pid=9)
    q = CameraPose.from_dict(p.to_dict())
    assert q == p


# ---------------------------------------------------------------------------
# sample_sphere_poses


def test_sampling_is_deterministic():
    a = sample_sphere_poses(8, seed=7)
    b = sample_sphere_poses(8, seed=7)
    assert a == b
    c = sample_sphere_poses(8, seed=8)
    assert any(x.elevation != y.elevation for x, y in zip(a, c))


def test_default_view_count_distinct():
    poses = sample_sphere_poses(76, seed=0)
    assert len(poses) == 76
    assert len({(p.azimuth, p.elevation) for p in poses}) == 76


def test_single_pose_azimuth_is_stratum_midpoint():
    (p,) = sample_sphere_poses(1, seed=3)
    assert p.azimuth == 180.0


def test_azimuths_are_stratum_midpoints():
    poses = sample_sphere_poses(8, seed=0)
    np.testing.assert_array_equal(
        [p.azimuth for p in poses], [(i + 0.5) * 45.0 for i in range(8)]
    )


def test_elevations_inside_range():
    poses = sample_sphere_poses(64, elevation_range=(-10.0, 45.0), seed=2)
    els = np.array([p.elevation for p in poses])
    assert (els >= -10.0).all() and (els <= 45.0).all()


def test_empty_elevation_range_rejected():
    with pytest.raises(ValueError):
        sample_sphere_poses(4, elevation_range=(20.0, 10.0))
    with pytest.raises(ValueError):
        sample_sphere_poses(0)


# ---------------------------------------------------------------------------
# rays_for


def test_single_ray_points_at_look_at():
    p = pose(az=33.0, el=12.0)
    bundle = rays_for(p, 1)
    assert bundle.origins.shape == (1, 1, 3)
    d = bundle.directions[0, 0]
    expected = -p.position() / np.linalg.norm(p.position())
    np.testing.assert_allclose(d, expected, atol=1e-12)


def test_grid_shape_and_unit_norm():
    bundle = rays_for(pose(), 64)
    assert bundle.directions.shape == (64, 64, 3)
    norms = np.linalg.norm(bundle.directions, axis=-1)
    np.testing.assert_allclose(norms, np.ones((64, 64)), atol=1e-9)
    assert bundle.near < bundle.far
    assert bundle.near >= 0.0


def test_center_pixel_ray_passes_through_look_at():
    p = pose(az=200.0, el=25.0)
    bundle = rays_for(p, 9)
    ray = bundle.at(4, 4)
    # point-line distance from origin (the look_at) to the center ray
    to_target = -ray.origin
    dist = np.linalg.norm(to_target - np.dot(to_target, ray.direction) * ray.direction)
    assert dist < 1e-6


def test_corner_ray_angle_matches_pinhole_formula():
    fov = 40.0
    res = 64
    p = pose(fov=fov)
    bundle = rays_for(p, res)
    center_dir = -p.position() / np.linalg.norm(p.position())
    corner = bundle.directions[0, 0]
    angle = math.acos(np.clip(np.dot(corner, center_dir), -1, 1))
    # Corner pixel center sits at offset ((res-1)/res)*tan(fov/2) in both
    # image axes, so its angle from the optical axis is
    # atan(sqrt(2) * (res-1)/res * tan(fov/2)).
    t = (res - 1) / res * math.tan(math.radians(fov) / 2)
    expected = math.atan(math.sqrt(2.0) * t)
    assert abs(angle - expected) < 1e-6


def test_resolution_must_be_positive():
    with pytest.raises(ValueError):
        rays_for(pose(), 0)


def test_rows_scan_top_to_bottom():
    bundle = rays_for(pose(az=0.0, el=0.0), 8)
    # camera at +x looking at origin with up=+z: top rows have larger z
    assert bundle.directions[0, :, 2].mean() > bundle.directions[-1, :, 2].mean()


# ---------------------------------------------------------------------------
# Invariants


def test_full_turn_reproduces_ray_grid_bitwise():
    for az in (0.0, 45.0, 123.5, 359.0):
        a = rays_for(pose(az=az), 16)
        b = rays_for(pose(az=az + 360.0), 16)
        np.testing.assert_array_equal(a.directions, b.directions)
        np.testing.assert_array_equal(a.origins, b.origins)


def test_azimuth_shift_rotates_directions_about_up_axis():
    rng = np.random.default_rng(11)
    for _ in range(5):
        az = float(rng.uniform(0, 360))
        el = float(rng.uniform(-80, 80))
        delta = float(rng.uniform(0, 360))
        a = rays_for(pose(az=az, el=el), 8)
        b = rays_for(pose(az=az + delta, el=el), 8)
        rad = math.radians(delta)
        rot = np.array(
            [
                [math.cos(rad), -math.sin(rad), 0.0],
                [math.sin(rad), math.cos(rad), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        rotated = a.directions @ rot.T
        np.testing.assert_allclose(rotated, b.directions, atol=1e-9)


def test_bundle_flat_matches_grid():
    bundle = rays_for(pose(), 4)
    o, d = bundle.flat()
    assert o.shape == (16, 3)
    np.testing.assert_array_equal(d.reshape(4, 4, 3), bundle.directions)
