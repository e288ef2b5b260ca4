"""Dynamic component assignment.

Each pixel p gets the label of the component maximizing

    log(H_m(p) + delta) - beta * ||p - centroid_m||

where centroid_m is the heatmap-weighted mean pixel of component m. The
label map lives on the front camera's image plane; Gaussians are relabeled
by looking up the pixel their mean projects to. Heatmaps are static during
optimization, so the map is built once and reused at every cadence.

Pixel coordinates here are integer (column, row) indices; a uniform
heatmap's centroid is ((W-1)/2, (H-1)/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import UNASSIGNED
from .errors import ShapeMismatch, ZeroMass

DEFAULT_BETA = 0.02
DEFAULT_DELTA = 1e-8


def centroid(heatmap):
    """Mass-weighted mean pixel position (u, v) of a heatmap."""
    values = heatmap.values if hasattr(heatmap, "values") else np.asarray(heatmap)
    mass = values.sum()
    if mass <= 0.0:
        raise ZeroMass("heatmap has zero total mass")
    h, w = values.shape
    u = (values.sum(axis=0) * np.arange(w)).sum() / mass
    v = (values.sum(axis=1) * np.arange(h)).sum() / mass
    return np.array([u, v])


@dataclass
class ComponentLabelMap:
    """Per-pixel component assignment on the front view.

    labels holds indices into the heatmap list (0..M-1); component_ids maps
    each index back to the component id it stands for.
    """

    labels: np.ndarray
    centroids: np.ndarray
    component_ids: tuple
    beta: float
    delta: float

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("labels must be 2D")
        m = len(self.component_ids)
        if self.centroids.shape != (m, 2):
            raise ValueError("one centroid per component required")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= m):
            raise ValueError("labels out of range")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")

    @property
    def shape(self):
        return self.labels.shape

    def component_labels(self):
        """Labels translated from list indices to component ids."""
        ids = np.asarray(self.component_ids, dtype=np.int32)
        return ids[self.labels]


def build_label_map(heatmaps, beta=DEFAULT_BETA, delta=DEFAULT_DELTA, centroids=None):
    """Score every (pixel, component) pair and take the argmax.

    Ties go to the lowest component index. Centroids are computed from the
    heatmaps unless given explicitly (callers may cache them across
    cadences since the heatmaps never change mid-run).
    """
    if not heatmaps:
        raise ValueError("need at least one heatmap")
    shape = heatmaps[0].values.shape
    for hm in heatmaps[1:]:
        if hm.values.shape != shape:
            raise ShapeMismatch("heatmap resolutions differ")
    if centroids is None:
        centroids = np.stack([centroid(hm) for hm in heatmaps])
    else:
        centroids = np.asarray(centroids, dtype=np.float64)

    h, w = shape
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    scores = np.empty((len(heatmaps), h, w))
    for m, hm in enumerate(heatmaps):
        dist = np.sqrt((jj - centroids[m, 0]) ** 2 + (ii - centroids[m, 1]) ** 2)
        scores[m] = np.log(hm.values + delta) - beta * dist
    labels = np.argmax(scores, axis=0).astype(np.int32)  # first max: lowest index wins

    return ComponentLabelMap(
        labels=labels,
        centroids=centroids,
        component_ids=tuple(int(hm.component_id) for hm in heatmaps),
        beta=float(beta),
        delta=float(delta),
    )


def assign_gaussians(cloud, labelmap, front_cam):
    """Relabel every Gaussian from the label map pixel under its projection.

    Projected means are clamped to the image bounds, so off-frame Gaussians
    take the nearest border pixel's label. Gaussians behind the camera keep
    whatever label they had. Returns the number of changed labels.
    """
    h, w = labelmap.shape
    if (front_cam.height, front_cam.width) != (h, w):
        raise ShapeMismatch("label map resolution differs from the front camera")
    if len(cloud) == 0:
        return 0
    view = cloud.positions @ front_cam.rotation.T + front_cam.translation
    z = view[:, 2]
    visible = z > 0.0
    uv = np.zeros((len(cloud), 2))
    uv[visible] = (
        front_cam.focal * view[visible, :2] / z[visible, None]
        + front_cam.principal_point[None, :]
    )
    cols = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, h - 1)
    ids = labelmap.component_labels()
    new_ids = np.where(visible, ids[rows, cols], cloud.component_ids).astype(np.int32)
    changed = int(np.sum(new_ids != cloud.component_ids))
    if changed:
        cloud.component_ids = new_ids
        cloud.touch()
    return changed


def drifted_fraction(cloud, labelmap, front_cam):
    """Fraction of Gaussians whose current label disagrees with the map."""
    if len(cloud) == 0:
        return 0.0
    probe = cloud.copy()
    changed = assign_gaussians(probe, labelmap, front_cam)
    return changed / len(cloud)


def unassigned_fraction(cloud):
    if len(cloud) == 0:
        return 0.0
    return float(np.mean(cloud.component_ids == UNASSIGNED))
