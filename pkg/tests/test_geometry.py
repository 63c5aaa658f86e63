"""
Tests for camera pose geometry
"""

import numpy as np
import pytest

from viewselect.geometry import (
    CameraIntrinsics,
    GridConfig,
    ObjectGeometry,
    compute_radius,
    grid_poses,
    pose_grid,
    pose_to_transform,
)
from utils.errors import ValidationError


def test_compute_radius_example():
    """Test the camera radius of a worked example"""
    side = 0.2 / np.sqrt(3.0)
    geom = ObjectGeometry(length=side, width=side, height=side)
    intr = CameraIntrinsics(focal_px=500.0, image_width=640, image_height=480)
    assert compute_radius(geom, intr, 0.7) == pytest.approx(0.297619, abs=1e-6)


def test_compute_radius_rejects_bad_fill():
    """Test that fill fractions outside (0, 1] are rejected"""
    with pytest.raises(ValidationError):
        compute_radius(ObjectGeometry(), CameraIntrinsics(), 0.0)
    with pytest.raises(ValidationError):
        compute_radius(ObjectGeometry(), CameraIntrinsics(), 1.5)


def test_default_grid_has_21_directions():
    """Test that the default grid has 21 directions and skips azimuth 270"""
    grid = pose_grid()
    assert len(grid) == 21
    assert all(theta != 270.0 for theta, _ in grid)
    assert grid == sorted(grid)
    assert grid[:3] == [(0.0, 45.0), (0.0, 60.0), (0.0, 75.0)]


def test_grid_rejects_non_dividing_step():
    """Test that a step not dividing 360 is rejected"""
    with pytest.raises(ValidationError):
        pose_grid(theta_step=50.0)


@pytest.mark.parametrize("theta", [0.0, 45.0, 135.0, 225.0, 315.0])
@pytest.mark.parametrize("phi", [10.0, 45.0, 75.0, 89.9])
def test_transform_looks_at_center(theta, phi):
    """Test that the camera looks at the object center"""
    geom = ObjectGeometry(gc=(0.1, -0.2, 0.3))
    pose = pose_to_transform(geom, theta, phi, 0.5)
    R = pose.rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)

    to_center = np.asarray(geom.gc) - pose.position
    assert np.linalg.norm(to_center) == pytest.approx(0.5)
    assert np.allclose(R[:, 2], to_center / np.linalg.norm(to_center), atol=1e-9)
    assert abs(R[2, 0]) < 1e-9
    assert R[2, 1] >= -1e-12


def test_top_view_is_regular():
    """Test that the top view transform is a proper rotation"""
    pose = pose_to_transform(ObjectGeometry(), 90.0, 90.0, 1.0)
    R = pose.rotation
    assert np.allclose(R[:, 0], [1.0, 0.0, 0.0])
    assert np.allclose(R[:, 2], [0.0, 0.0, -1.0])
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert np.allclose(pose.position, [0.0, 0.0, 1.0])


def test_quaternion_matches_rotation():
    """Test that the quaternion encodes the rotation matrix"""
    pose = pose_to_transform(ObjectGeometry(), 45.0, 60.0, 1.0)
    q = pose.quaternion
    assert np.linalg.norm(q) == pytest.approx(1.0)
    x, y, z, w = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    assert np.allclose(R, pose.rotation, atol=1e-9)


def test_transform_rejects_invalid_input():
    """Test that invalid angles or radius are rejected"""
    with pytest.raises(ValidationError):
        pose_to_transform(ObjectGeometry(), 0.0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        pose_to_transform(ObjectGeometry(), 0.0, 95.0, 1.0)
    with pytest.raises(ValidationError):
        pose_to_transform(ObjectGeometry(), 0.0, 45.0, 0.0)


def test_object_geometry_rejects_non_positive_size():
    """Test that a non-positive size is rejected"""
    with pytest.raises(ValidationError):
        ObjectGeometry(length=0.0)


def test_grid_poses_share_radius():
    """Test that all grid poses of an object share one radius"""
    poses = grid_poses(ObjectGeometry(), CameraIntrinsics())
    assert len(poses) == 21
    assert len({p.radius for p in poses}) == 1


def test_to_line_fields():
    """Test the pose line fields"""
    pose = pose_to_transform(ObjectGeometry(), 0.0, 45.0, 2.0)
    fields = pose.to_line().split()
    assert len(fields) == 9
    assert float(fields[0]) == 0.0
    assert float(fields[1]) == 45.0
    assert float(fields[2]) == pytest.approx(np.sqrt(2.0), rel=1e-8)


def test_grid_config_violations():
    """Test grid config validation messages"""
    cfg = GridConfig(theta_step=50.0, phi_values=[0.0], fill=2.0)
    problems = cfg.violations()
    assert len(problems) == 3
    with pytest.raises(ValidationError):
        GridConfig.from_dict({"bogus": 1})


def test_grid_config_builds_geometry():
    """Test geometry built from a grid config"""
    cfg = GridConfig.from_dict({"length": 0.3, "focal_px": 600.0})
    assert cfg.geometry().length == 0.3
    assert cfg.intrinsics().focal_px == 600.0
