"""Camera conventions: projection, front-camera alignment, orbits."""

import numpy as np
import pytest

from glyphsplat.camera import (
    Camera,
    front_camera,
    glyph_pixels_to_world,
    look_at,
    orbit_position,
    turntable_cameras,
)
from glyphsplat.errors import BehindCamera


def test_on_axis_point_hits_principal_point():
    cam = Camera(
        rotation=np.eye(3),
        translation=np.zeros(3),
        focal=100.0,
        principal_point=np.array([32.0, 24.0]),
        width=64,
        height=48,
    )
    uv, depth = cam.project(np.array([[0.0, 0.0, 3.0]]))
    np.testing.assert_allclose(uv[0], [32.0, 24.0])
    assert depth[0] == pytest.approx(3.0)


def test_projection_formula():
    cam = Camera(
        rotation=np.eye(3),
        translation=np.zeros(3),
        focal=50.0,
        principal_point=np.array([16.0, 16.0]),
        width=32,
        height=32,
    )
    uv, _ = cam.project(np.array([[0.1, -0.2, 2.0]]))
    np.testing.assert_allclose(uv[0], [16.0 + 50.0 * 0.05, 16.0 - 50.0 * 0.1])


def test_behind_camera_raises():
    cam = front_camera(8, 8)
    with pytest.raises(BehindCamera):
        cam.project(np.array([[0.0, 0.0, 10.0]]))  # behind: z_view < 0 past the camera


def test_front_camera_inverts_glyph_lift_exactly():
    # Lift pixel centers to the glyph plane, project back: identity.
    w = 48
    cam = front_camera(w, w)
    rng = np.random.default_rng(11)
    uv = rng.uniform(0.0, w, size=(500, 2))
    world = glyph_pixels_to_world(uv, w, w)
    back, depth = cam.project(world)
    np.testing.assert_allclose(back, uv, atol=1e-10)
    np.testing.assert_allclose(depth, 2.5)


def test_front_camera_requires_square_image():
    with pytest.raises(ValueError):
        front_camera(64, 32)


def test_glyph_plane_corners():
    w = 100
    corners = glyph_pixels_to_world(np.array([[0.0, 0.0], [100.0, 100.0]]), w, w)
    np.testing.assert_allclose(corners[0], [-1.0, 1.0, 0.0])
    np.testing.assert_allclose(corners[1], [1.0, -1.0, 0.0])


def test_look_at_from_front_matches_front_camera():
    cam_a = front_camera(32, 32)
    cam_b = look_at((0.0, 0.0, 2.5), (0.0, 0.0, 0.0), 32, 32, focal=cam_a.focal)
    assert cam_a == cam_b


def test_look_at_rotation_is_orthonormal_everywhere():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pos = orbit_position(rng.uniform(0, 360), rng.uniform(-75, 75), rng.uniform(1, 4))
        cam = look_at(pos, (0, 0, 0), 16, 16, focal=10.0)
        np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(cam.position(), pos, atol=1e-12)
        # The origin projects to the image center with positive depth.
        uv, depth = cam.project(np.zeros((1, 3)))
        np.testing.assert_allclose(uv[0], [8.0, 8.0], atol=1e-9)
        assert depth[0] > 0


def test_look_at_degenerate_up_rejected():
    with pytest.raises(ValueError):
        look_at((0.0, 2.5, 0.0), (0.0, 0.0, 0.0), 16, 16, focal=10.0)


def test_orbit_positions_lie_on_sphere():
    for az in (0.0, 90.0, 180.0, 270.0):
        p = orbit_position(az, 10.0, radius=2.5)
        assert np.linalg.norm(p) == pytest.approx(2.5)
    np.testing.assert_allclose(orbit_position(0.0, 0.0, 2.5), [0.0, 0.0, 2.5], atol=1e-12)


def test_turntable_cameras_count_and_spacing():
    cams = turntable_cameras(8, size=24)
    assert len(cams) == 8
    positions = np.array([c.position() for c in cams])
    radii = np.linalg.norm(positions, axis=1)
    np.testing.assert_allclose(radii, 2.5, atol=1e-12)
    # Consecutive cameras are rotated copies: pairwise angles are equal.
    azimuths = np.arctan2(positions[:, 0], positions[:, 2])
    diffs = np.diff(np.unwrap(azimuths))
    np.testing.assert_allclose(diffs, diffs[0], atol=1e-9)


def test_camera_equality_and_validation():
    cam = front_camera(16, 16)
    assert cam == front_camera(16, 16)
    assert cam != front_camera(32, 32)
    with pytest.raises(ValueError):
        Camera(
            rotation=np.eye(3) * 2.0,
            translation=np.zeros(3),
            focal=10.0,
            principal_point=np.array([8.0, 8.0]),
            width=16,
            height=16,
        )
    with pytest.raises(ValueError):
        Camera(
            rotation=np.eye(3),
            translation=np.zeros(3),
            focal=-1.0,
            principal_point=np.array([8.0, 8.0]),
            width=16,
            height=16,
        )
