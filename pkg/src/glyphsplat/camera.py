"""Pinhole cameras and the glyph-plane coordinate convention.

Camera space follows the computer-vision convention: +x right, +y down,
+z forward. A world point p maps to view space as R @ p + t and to the
image as (f * x / z + cx, f * y / z + cy). Pixel (i, j) covers the unit
square whose center is (u, v) = (j + 0.5, i + 0.5).

The glyph plane is the world z=0 plane with world +y up. A W x H glyph
image spans [-1, 1]^2 on that plane:

    x = 2u / W - 1        y = 1 - 2v / H

front_camera() is constructed so that projecting a lifted glyph point
lands back on the source pixel exactly; heatmap lookups rely on this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera

# Viewing distance used by the front camera and the turntable orbit.
DEFAULT_CAMERA_DISTANCE = 2.5


@dataclass(frozen=True, eq=False)
class Camera:
    """World-to-image pinhole camera.

    rotation (3, 3) and translation (3,) give view = R @ world + t; focal is
    in pixels; principal_point is (cx, cy).
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: np.ndarray
    width: int
    height: int

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.focal == other.focal
            and np.array_equal(self.principal_point, other.principal_point)
            and self.width == other.width
            and self.height == other.height
        )

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(
            self, "principal_point", np.asarray(self.principal_point, dtype=np.float64)
        )
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if self.translation.shape != (3,):
            raise ValueError("translation must be length 3")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (max error {err:.3g})")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def position(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_view(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def project(self, points, near=1e-8):
        """Project world points to pixel coordinates.

        Returns (uv, depth) where uv is (N, 2) and depth is the view-space z.
        Raises BehindCamera if any depth <= near; callers that want culling
        instead of an error should mask on world_to_view depths first.
        """
        view = np.atleast_2d(self.world_to_view(points))
        depth = view[:, 2]
        if np.any(depth <= near):
            raise BehindCamera(f"{int(np.sum(depth <= near))} point(s) at depth <= {near}")
        uv = self.focal * view[:, :2] / depth[:, None] + self.principal_point[None, :]
        return uv, depth

    def pixel_grid(self):
        """Pixel-center coordinates, two (H, W) arrays (u, v)."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(u, v)


def glyph_pixels_to_world(points_uv, width, height, z=0.0):
    """Map continuous glyph pixel coordinates to the world glyph plane."""
    points_uv = np.asarray(points_uv, dtype=np.float64)
    x = 2.0 * points_uv[..., 0] / width - 1.0
    y = 1.0 - 2.0 * points_uv[..., 1] / height
    zs = np.full_like(x, float(z))
    return np.stack([x, y, zs], axis=-1)


def front_camera(width, height, distance=DEFAULT_CAMERA_DISTANCE):
    """Camera looking down -z at the glyph plane, pixel-aligned with the image.

    The focal length is chosen so world x = +-1 lands on the left/right image
    edge; combined with glyph_pixels_to_world this makes lift-then-project the
    identity on pixel coordinates. Requires a square image: one focal length
    cannot align both axes otherwise.
    """
    if width != height:
        raise ValueError("front camera requires a square image")
    rotation = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    translation = np.array([0.0, 0.0, float(distance)])
    focal = width * distance / 2.0
    return Camera(
        rotation=rotation,
        translation=translation,
        focal=focal,
        principal_point=np.array([width / 2.0, height / 2.0]),
        width=int(width),
        height=int(height),
    )


def look_at(position, target, width, height, focal, up=(0.0, 1.0, 0.0)):
    """Camera at `position` looking toward `target`, world `up` roughly up."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise ValueError("camera position coincides with target")
    forward = forward / norm
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right = right / norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ position
    return Camera(
        rotation=rotation,
        translation=translation,
        focal=float(focal),
        principal_point=np.array([width / 2.0, height / 2.0]),
        width=int(width),
        height=int(height),
    )


def orbit_position(azimuth_deg, elevation_deg, radius=DEFAULT_CAMERA_DISTANCE):
    """Point on the viewing orbit; azimuth 0 is the +z axis (front)."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    return radius * np.array(
        [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
    )


def turntable_cameras(
    n_views,
    size,
    elevation_deg=10.0,
    radius=DEFAULT_CAMERA_DISTANCE,
    focal_ratio=0.7,
):
    """Evenly spaced orbit cameras for consistency metrics and previews."""
    cams = []
    for k in range(n_views):
        az = 360.0 * k / n_views
        cams.append(
            look_at(
                orbit_position(az, elevation_deg, radius),
                target=(0.0, 0.0, 0.0),
                width=size,
                height=size,
                focal=focal_ratio * size,
            )
        )
    return cams
