"""Gaussian cloud parameterization.

The cloud is a structure-of-arrays over N anisotropic 3D Gaussians. Covariance
is never stored directly: it is rebuilt as R(q) diag(exp(s))^2 R(q)^T so every
optimizer step stays on the manifold of valid (symmetric PSD) matrices.

Concurrency: read paths (rendering, export) may share one cloud across
threads. Mutation is single-writer; every mutating call must bump `version`
so stale forward/backward pairs are detectable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

# Label for Gaussians not yet claimed by any component. Component 0 is the
# whole-glyph composition; real parts are numbered from 1.
UNASSIGNED = -1


def logit(p):
    """Inverse sigmoid, valid for p in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q):
    """Return unit quaternions, (..., 4), wxyz order.

    Raises ValueError on a zero-norm row; there is no sensible default
    orientation to substitute silently.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion")
    return q / norm


def quaternion_to_matrix(q):
    """Rotation matrices from unit quaternions.

    Parameters
    ----------
    q : (..., 4) array, wxyz order, assumed unit norm.

    Returns
    -------
    (..., 3, 3) array of rotation matrices.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


@dataclass
class Gaussian3D:
    """One Gaussian, mostly useful for tests and debugging.

    Bulk storage lives in GaussianCloud; this is a copied record, not a view.
    """

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: float
    component_id: int = UNASSIGNED

    def covariance(self):
        rot = quaternion_to_matrix(normalize_quaternions(self.rotation))
        m = rot * np.exp(self.log_scale)[None, :]
        return m @ m.T


@dataclass
class GaussianCloud:
    """Structure-of-arrays storage for N Gaussians.

    Parameters are stored in their unconstrained form (log scales, opacity
    logits, free quaternions) so gradient updates need no projection beyond
    quaternion renormalization.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    component_ids: np.ndarray
    version: int = field(default=0, compare=False)

    PARAM_FIELDS = ("positions", "log_scales", "rotations", "colors", "opacity_logits")

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.component_ids = np.ascontiguousarray(self.component_ids, dtype=np.int32)
        self.validate()

    def validate(self):
        n = len(self)
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions shape {self.positions.shape}")
        if self.log_scales.shape != (n, 3):
            raise ValueError(f"log_scales shape {self.log_scales.shape}")
        if self.rotations.shape != (n, 4):
            raise ValueError(f"rotations shape {self.rotations.shape}")
        if self.colors.shape != (n, 3):
            raise ValueError(f"colors shape {self.colors.shape}")
        if self.opacity_logits.shape != (n,):
            raise ValueError(f"opacity_logits shape {self.opacity_logits.shape}")
        if self.component_ids.shape != (n,):
            raise ValueError(f"component_ids shape {self.component_ids.shape}")
        if n and np.min(self.component_ids) < UNASSIGNED:
            raise ValueError("component ids below UNASSIGNED")
        for name in self.PARAM_FIELDS:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def empty(cls):
        return cls(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            colors=np.zeros((0, 3)),
            opacity_logits=np.zeros((0,)),
            component_ids=np.zeros((0,), dtype=np.int32),
        )

    @classmethod
    def concatenate(cls, clouds):
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            positions=np.concatenate([c.positions for c in clouds]),
            log_scales=np.concatenate([c.log_scales for c in clouds]),
            rotations=np.concatenate([c.rotations for c in clouds]),
            colors=np.concatenate([c.colors for c in clouds]),
            opacity_logits=np.concatenate([c.opacity_logits for c in clouds]),
            component_ids=np.concatenate([c.component_ids for c in clouds]),
        )

    def copy(self):
        return GaussianCloud(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            colors=self.colors.copy(),
            opacity_logits=self.opacity_logits.copy(),
            component_ids=self.component_ids.copy(),
        )

    def touch(self):
        """Mark the cloud as mutated; invalidates cached forward passes."""
        self.version += 1

    # Derived quantities -------------------------------------------------

    def opacities(self):
        return expit(self.opacity_logits)

    def scales(self):
        return np.exp(self.log_scales)

    def unit_rotations(self):
        return normalize_quaternions(self.rotations)

    def rotation_matrices(self):
        return quaternion_to_matrix(self.unit_rotations())

    def covariances(self):
        """World-space covariances, (N, 3, 3)."""
        rot = self.rotation_matrices()
        m = rot * self.scales()[:, None, :]
        return m @ np.swapaxes(m, 1, 2)

    def component_mask(self, component_id):
        return self.component_ids == np.int32(component_id)

    def select(self, mask):
        """New cloud holding the masked rows (copies, not views)."""
        mask = np.asarray(mask)
        return GaussianCloud(
            positions=self.positions[mask].copy(),
            log_scales=self.log_scales[mask].copy(),
            rotations=self.rotations[mask].copy(),
            colors=self.colors[mask].copy(),
            opacity_logits=self.opacity_logits[mask].copy(),
            component_ids=self.component_ids[mask].copy(),
        )

    def record(self, i):
        return Gaussian3D(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            color=self.colors[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            component_id=int(self.component_ids[i]),
        )
