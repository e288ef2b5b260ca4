"""Differentiable CPU splatting of Gaussian clouds.

Forward model per pixel x, over Gaussians sorted front to back:

    C(x) = sum_i c_i a'_i(x) T_i(x) + bg * T_final(x)
    T_i(x) = prod_{j<i} (1 - a'_j(x))
    a'_i(x) = clamp(alpha_i * exp(-0.5 d^T Sigma2d^{-1} d), <= alpha_clamp)

with a'_i set to zero where it falls below alpha_skip. The kernel peaks at 1
(no 2*pi normalizer), so alpha_i is the actual peak opacity. Sigma2d comes
from the first-order (EWA) projection of the world covariance and gets
cov_floor added to its diagonal before inversion so splats can never fall
between pixel centers.

The backward pass is analytic and exact for this forward model, including
the projection Jacobian terms. Pixels where a' was clamped or skipped
contribute no gradient to that Gaussian's parameters (the clamp is flat and
the skip is treated as a dead zone), but still participate in the
transmittance chain exactly as in the forward pass.

Two forward implementations share every per-pixel operation in the same
order: a per-Gaussian reference loop and a tiled path that bins Gaussians
into square tiles first. They produce bit-identical images; the tiled path
just touches less memory per step on large frames.

Rendering never mutates the cloud, so one cloud may be rendered from many
cameras concurrently. A Rasterizer instance, however, holds the saved
forward state for exactly one render at a time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .cloud import GaussianCloud, quaternion_to_matrix
from .errors import BehindCamera, DegenerateCovariance, ShapeMismatch, StaleForward

logger = logging.getLogger(__name__)

WHITE = np.array([1.0, 1.0, 1.0])


@dataclass(frozen=True)
class RenderSettings:
    """Knobs shared by every render path.

    alpha_skip is deliberately tiny: the skip is a hard cutoff, so any value
    large enough to matter visually (e.g. 1/255) makes the image a
    discontinuous function of the parameters and breaks gradient checks at
    splat peripheries. The default keeps the cutoff as a pure bounding-box
    device; set it higher only for forward-only preview renders.
    """

    near: float = 0.01
    cov_floor: float = 0.3
    alpha_clamp: float = 0.99
    alpha_skip: float = 1e-12
    tile_size: int = 16
    mode: str = "reference"

    def __post_init__(self):
        if self.mode not in ("reference", "tiled"):
            raise ValueError(f"unknown render mode {self.mode!r}")
        if not 0.0 < self.alpha_clamp < 1.0:
            raise ValueError("alpha_clamp must lie in (0, 1)")
        if not 0.0 < self.alpha_skip < self.alpha_clamp:
            raise ValueError("alpha_skip must lie in (0, alpha_clamp)")


@dataclass
class RenderedImage:
    """Composited RGB plus accumulated opacity."""

    pixels: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be (H, W, 3)")
        if self.alpha.shape != self.pixels.shape[:2]:
            raise ShapeMismatch("alpha does not match pixels")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite pixels")
        if self.alpha.size and (self.alpha.min() < -1e-12 or self.alpha.max() > 1.0 + 1e-12):
            raise ValueError("alpha outside [0, 1]")


@dataclass
class CloudGradients:
    """Per-parameter gradients, same shapes as the cloud's arrays."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            colors=np.zeros((n, 3)),
            opacity_logits=np.zeros((n,)),
        )

    def add_scaled(self, other, scale):
        self.positions += scale * other.positions
        self.log_scales += scale * other.log_scales
        self.rotations += scale * other.rotations
        self.colors += scale * other.colors
        self.opacity_logits += scale * other.opacity_logits
        return self


def depth_sort(cloud, camera):
    """Indices of all Gaussians by ascending view-space depth.

    The sort is stable, so equal depths keep storage order; renders are
    therefore invariant to how a depth-tied cloud was assembled.
    """
    view = cloud.positions @ camera.rotation.T + camera.translation
    return np.argsort(view[:, 2], kind="stable")


def project(gaussian, camera, cov_floor=0.3, near=0.01):
    """Project one Gaussian: returns (mean2d, cov2d, depth).

    cov2d includes the cov_floor diagonal bump. Raises BehindCamera when the
    view depth is at or behind the near plane; bulk render paths cull
    instead of raising.
    """
    pos = np.asarray(gaussian.position, dtype=np.float64)
    view = camera.rotation @ pos + camera.translation
    depth = float(view[2])
    if depth <= near:
        raise BehindCamera(f"depth {depth:.6g} <= near {near:.6g}")
    rot = quaternion_to_matrix(
        np.asarray(gaussian.rotation, dtype=np.float64)
        / np.linalg.norm(gaussian.rotation)
    )
    m = rot * np.exp(np.asarray(gaussian.log_scale, dtype=np.float64))[None, :]
    cov_world = m @ m.T
    f = camera.focal
    jac = np.array(
        [
            [f / depth, 0.0, -f * view[0] / depth**2],
            [0.0, f / depth, -f * view[1] / depth**2],
        ]
    )
    cov_view = camera.rotation @ cov_world @ camera.rotation.T
    cov2d = jac @ cov_view @ jac.T + cov_floor * np.eye(2)
    mean2d = f * view[:2] / depth + camera.principal_point
    return mean2d, cov2d, depth


class _Forward:
    """Everything the backward pass needs from one forward render."""

    __slots__ = (
        "active",
        "order",
        "view",
        "mean2d",
        "cov2d",
        "inv_cov",
        "bbox",
        "alphas",
        "colors",
        "t_final",
        "background",
        "cloud_ref",
        "cloud_version",
        "camera",
        "subset",
        "settings",
    )


def _project_active(cloud, camera, active, settings):
    """Vectorized projection of the selected rows.

    Returns view positions, pixel means, floored 2D covariances and their
    inverses, plus a conservative integer bbox per Gaussian. Gaussians whose
    peak opacity is below alpha_skip or that sit behind the near plane are
    dropped from `active` (they cannot touch any pixel).
    """
    view = cloud.positions[active] @ camera.rotation.T + camera.translation
    alphas = cloud.opacities()[active]
    keep = (view[:, 2] > settings.near) & (alphas >= settings.alpha_skip)
    active = active[keep]
    view = view[keep]
    alphas = alphas[keep]
    if active.size == 0:
        empty = np.zeros((0,))
        return (
            active,
            view,
            np.zeros((0, 2)),
            np.zeros((0, 2, 2)),
            np.zeros((0, 2, 2)),
            np.zeros((0, 4), dtype=np.int64),
            empty,
        )

    f = camera.focal
    z = view[:, 2]
    mean2d = f * view[:, :2] / z[:, None] + camera.principal_point[None, :]

    rot = quaternion_to_matrix(cloud.unit_rotations()[active])
    m = rot * np.exp(cloud.log_scales[active])[:, None, :]
    cov_world = m @ np.swapaxes(m, 1, 2)
    cov_view = np.einsum("ij,ajk,lk->ail", camera.rotation, cov_world, camera.rotation)

    jac = np.zeros((active.size, 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 1, 1] = f / z
    jac[:, 0, 2] = -f * view[:, 0] / z**2
    jac[:, 1, 2] = -f * view[:, 1] / z**2
    cov2d = np.einsum("aij,ajk,alk->ail", jac, cov_view, jac)
    cov2d[:, 0, 0] += settings.cov_floor
    cov2d[:, 1, 1] += settings.cov_floor

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    if np.any(det <= 0.0) or not np.all(np.isfinite(det)):
        raise DegenerateCovariance("floored 2D covariance is singular or non-finite")
    inv_cov = np.empty_like(cov2d)
    inv_cov[:, 0, 0] = cov2d[:, 1, 1] / det
    inv_cov[:, 1, 1] = cov2d[:, 0, 0] / det
    inv_cov[:, 0, 1] = -cov2d[:, 0, 1] / det
    inv_cov[:, 1, 0] = -cov2d[:, 1, 0] / det

    # Largest eigenvalue bounds the kernel's reach: alpha * exp(-r^2 / (2 L))
    # drops below alpha_skip beyond r^2 = 2 L ln(alpha / alpha_skip).
    trace = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    gap = np.sqrt(np.maximum(trace**2 - 4.0 * det, 0.0))
    lam_max = 0.5 * (trace + gap)
    radius = np.sqrt(2.0 * lam_max * np.maximum(np.log(alphas / settings.alpha_skip), 0.0))

    # Pixel-center j+0.5 lies in [u-r, u+r] iff ceil(u-r-0.5) <= j <= floor(u+r-0.5).
    bbox = np.empty((active.size, 4), dtype=np.int64)
    bbox[:, 0] = np.maximum(np.ceil(mean2d[:, 0] - radius[:] - 0.5), 0)
    bbox[:, 1] = np.minimum(np.floor(mean2d[:, 0] + radius[:] - 0.5), camera.width - 1)
    bbox[:, 2] = np.maximum(np.ceil(mean2d[:, 1] - radius[:] - 0.5), 0)
    bbox[:, 3] = np.minimum(np.floor(mean2d[:, 1] + radius[:] - 0.5), camera.height - 1)

    nonempty = (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])
    return (
        active[nonempty],
        view[nonempty],
        mean2d[nonempty],
        cov2d[nonempty],
        inv_cov[nonempty],
        bbox[nonempty],
        alphas[nonempty],
    )


def _splat_weights(mean2d, inv_cov, alpha, bbox, settings):
    """Per-pixel a' over the bbox slice; clamped, with sub-skip zeroed."""
    x0, x1, y0, y1 = bbox
    du = np.arange(x0, x1 + 1, dtype=np.float64) + 0.5 - mean2d[0]
    dv = np.arange(y0, y1 + 1, dtype=np.float64) + 0.5 - mean2d[1]
    du = du[None, :]
    dv = dv[:, None]
    quad = inv_cov[0, 0] * du * du + 2.0 * inv_cov[0, 1] * du * dv + inv_cov[1, 1] * dv * dv
    kernel = np.exp(-0.5 * quad)
    a = alpha * kernel
    np.minimum(a, settings.alpha_clamp, out=a)
    a[a < settings.alpha_skip] = 0.0
    return a, kernel


def _composite(order, fwd, camera, background, settings):
    """Front-to-back alpha compositing; shared by reference and tiled modes."""
    h, w = camera.height, camera.width
    trans = np.ones((h, w))
    rgb = np.zeros((h, w, 3))
    if settings.mode == "reference":
        tiles = [(0, h, 0, w, order)]
    else:
        tiles = _bin_tiles(order, fwd.bbox_by_rank, h, w, settings.tile_size)
    for r0, r1, c0, c1, ranks in tiles:
        for rank in ranks:
            x0, x1, y0, y1 = fwd.bbox_by_rank[rank]
            x0, x1 = max(x0, c0), min(x1, c1 - 1)
            y0, y1 = max(y0, r0), min(y1, r1 - 1)
            if x0 > x1 or y0 > y1:
                continue
            a, _ = _splat_weights(
                fwd.mean2d_by_rank[rank],
                fwd.inv_cov_by_rank[rank],
                fwd.alpha_by_rank[rank],
                (x0, x1, y0, y1),
                settings,
            )
            t_slice = trans[y0 : y1 + 1, x0 : x1 + 1]
            weight = a * t_slice
            rgb[y0 : y1 + 1, x0 : x1 + 1] += weight[:, :, None] * fwd.color_by_rank[rank]
            t_slice *= 1.0 - a
    pixels = rgb + trans[:, :, None] * background
    return pixels, trans


def _bin_tiles(order, bboxes, h, w, tile):
    """Tile list with the depth-ordered ranks whose bbox overlaps each tile.

    Ranks land in each bucket in depth order, so per-pixel compositing
    order is identical to the reference path.
    """
    if len(order) == 0:
        return []
    tx0 = bboxes[:, 0] // tile
    tx1 = bboxes[:, 1] // tile
    ty0 = bboxes[:, 2] // tile
    ty1 = bboxes[:, 3] // tile
    buckets = {}
    for rank in range(len(order)):
        for ty in range(ty0[rank], ty1[rank] + 1):
            for tx in range(tx0[rank], tx1[rank] + 1):
                buckets.setdefault((ty, tx), []).append(rank)
    out = []
    for (ty, tx) in sorted(buckets):
        r0, c0 = ty * tile, tx * tile
        out.append((r0, min(r0 + tile, h), c0, min(c0 + tile, w), buckets[(ty, tx)]))
    return out


class _RankView:
    """Projection results reordered by depth rank, for the compositor."""

    def __init__(self, order_pos, mean2d, inv_cov, alphas, colors, bbox):
        self.mean2d_by_rank = mean2d[order_pos]
        self.inv_cov_by_rank = inv_cov[order_pos]
        self.alpha_by_rank = alphas[order_pos]
        self.color_by_rank = colors[order_pos]
        self.bbox_by_rank = bbox[order_pos]


class Rasterizer:
    """Paired forward/backward renderer.

    render() saves everything backward needs; render_backward() then demands
    the same cloud (object and version), camera, and subset, raising
    StaleForward otherwise. Use separate instances to render concurrently.
    """

    def __init__(self, settings=None):
        self.settings = settings if settings is not None else RenderSettings()
        self._fwd = None

    def render(self, cloud, camera, subset=None, background=WHITE):
        """Composite the cloud (optionally one component) onto background.

        subset=None renders every Gaussian; subset=m renders only Gaussians
        labeled m, compositing them as if the rest did not exist.
        """
        background = np.asarray(background, dtype=np.float64)
        if background.shape != (3,):
            raise ShapeMismatch("background must be an RGB triple")
        if subset is None:
            active = np.arange(len(cloud))
        else:
            active = np.flatnonzero(cloud.component_mask(subset))
        active, view, mean2d, cov2d, inv_cov, bbox, alphas = _project_active(
            cloud, camera, active, self.settings
        )
        colors = cloud.colors[active]
        order_pos = np.argsort(view[:, 2], kind="stable")

        rank_view = _RankView(order_pos, mean2d, inv_cov, alphas, colors, bbox)
        pixels, trans = _composite(
            np.arange(active.size), rank_view, camera, background, self.settings
        )

        fwd = _Forward()
        fwd.active = active
        fwd.order = order_pos
        fwd.view = view
        fwd.mean2d = mean2d
        fwd.cov2d = cov2d
        fwd.inv_cov = inv_cov
        fwd.bbox = bbox
        fwd.alphas = alphas
        fwd.colors = colors
        fwd.t_final = trans
        fwd.background = background
        fwd.cloud_ref = cloud
        fwd.cloud_version = cloud.version
        fwd.camera = camera
        fwd.subset = subset
        fwd.settings = self.settings
        self._fwd = fwd

        return RenderedImage(pixels=pixels, alpha=1.0 - trans)

    def render_backward(self, cloud, camera, subset, grad_pixels):
        """Pull pixel gradients back to cloud parameters.

        grad_pixels is dL/dpixels, (H, W, 3). Returns CloudGradients with
        zeros for Gaussians outside the subset or off screen.
        """
        fwd = self._fwd
        if fwd is None:
            raise StaleForward("render_backward before any render")
        if fwd.cloud_ref is not cloud or fwd.cloud_version != cloud.version:
            raise StaleForward("cloud changed since the forward pass")
        if fwd.camera != camera or fwd.subset != subset:
            raise StaleForward("camera or subset differs from the forward pass")
        grad_pixels = np.asarray(grad_pixels, dtype=np.float64)
        if grad_pixels.shape != (camera.height, camera.width, 3):
            raise ShapeMismatch(f"grad_pixels shape {grad_pixels.shape}")

        settings = self.settings
        n_active = fwd.active.size
        grads = CloudGradients.zeros(len(cloud))
        if n_active == 0:
            return grads

        d_mean2d = np.zeros((n_active, 2))
        d_cov2d = np.zeros((n_active, 2, 2))
        d_color = np.zeros((n_active, 3))
        d_alpha = np.zeros((n_active,))

        trans_run = fwd.t_final.copy()
        suffix = fwd.t_final[:, :, None] * fwd.background

        # Back to front: recover each Gaussian's incoming transmittance by
        # dividing its own attenuation back out, then push gradients through
        # C = sum c_i a'_i T_i + bg T_final.
        for rank in range(n_active - 1, -1, -1):
            k = fwd.order[rank]
            x0, x1, y0, y1 = fwd.bbox[k]
            a, kernel = _splat_weights(
                fwd.mean2d[k], fwd.inv_cov[k], fwd.alphas[k], (x0, x1, y0, y1), settings
            )
            sl = np.s_[y0 : y1 + 1, x0 : x1 + 1]
            one_minus = 1.0 - a
            t_before = trans_run[sl] / one_minus
            g = grad_pixels[sl]
            s = suffix[sl]

            weight = a * t_before
            d_color[k] = np.einsum("hwc,hw->c", g, weight)
            d_aprime = np.einsum(
                "hwc,hwc->hw", g, fwd.colors[k][None, None, :] * t_before[:, :, None] - s / one_minus[:, :, None]
            )
            # Clamped or skipped pixels: a' is locally constant there.
            live = (a > 0.0) & (fwd.alphas[k] * kernel < settings.alpha_clamp)
            d_aprime = np.where(live, d_aprime, 0.0)

            d_alpha[k] = np.sum(d_aprime * kernel)
            d_kernel = d_aprime * fwd.alphas[k]

            du = np.arange(x0, x1 + 1, dtype=np.float64) + 0.5 - fwd.mean2d[k, 0]
            dv = np.arange(y0, y1 + 1, dtype=np.float64) + 0.5 - fwd.mean2d[k, 1]
            du = np.broadcast_to(du[None, :], a.shape)
            dv = np.broadcast_to(dv[:, None], a.shape)
            inv = fwd.inv_cov[k]
            pu = inv[0, 0] * du + inv[0, 1] * dv
            pv = inv[1, 0] * du + inv[1, 1] * dv
            dk_kernel = d_kernel * kernel
            d_mean2d[k, 0] = np.sum(dk_kernel * pu)
            d_mean2d[k, 1] = np.sum(dk_kernel * pv)
            # dG/dSigma2d = 0.5 G (A d)(A d)^T with A the floored inverse.
            d_cov2d[k, 0, 0] = 0.5 * np.sum(dk_kernel * pu * pu)
            d_cov2d[k, 0, 1] = 0.5 * np.sum(dk_kernel * pu * pv)
            d_cov2d[k, 1, 0] = d_cov2d[k, 0, 1]
            d_cov2d[k, 1, 1] = 0.5 * np.sum(dk_kernel * pv * pv)

            suffix[sl] = s + (fwd.colors[k][None, None, :] * weight[:, :, None])
            trans_run[sl] = t_before

        self._chain_to_params(cloud, camera, fwd, grads, d_mean2d, d_cov2d, d_color, d_alpha)
        return grads

    def _chain_to_params(self, cloud, camera, fwd, grads, d_mean2d, d_cov2d, d_color, d_alpha):
        """Chain image-plane gradients through projection to raw parameters."""
        active = fwd.active
        view = fwd.view
        f = camera.focal
        z = view[:, 2]

        jac = np.zeros((active.size, 2, 3))
        jac[:, 0, 0] = f / z
        jac[:, 1, 1] = f / z
        jac[:, 0, 2] = -f * view[:, 0] / z**2
        jac[:, 1, 2] = -f * view[:, 1] / z**2

        # Mean path: mean2d depends on view position through the same Jacobian.
        d_view = np.einsum("aij,ai->aj", jac, d_mean2d)

        rot = quaternion_to_matrix(cloud.unit_rotations()[active])
        scales = np.exp(cloud.log_scales[active])
        m_mat = rot * scales[:, None, :]
        cov_view = np.einsum(
            "ij,ajk,lk->ail", camera.rotation, m_mat @ np.swapaxes(m_mat, 1, 2), camera.rotation
        )

        # Covariance path: Sigma2d = J V J^T (floor is additive, gradient-transparent).
        d_cov_view = np.einsum("aki,akl,alj->aij", jac, d_cov2d, jac)
        d_jac = 2.0 * np.einsum("aik,akl,alj->aij", d_cov2d, jac, cov_view)

        inv_z2 = f / z**2
        d_view[:, 0] += d_jac[:, 0, 2] * (-inv_z2)
        d_view[:, 1] += d_jac[:, 1, 2] * (-inv_z2)
        d_view[:, 2] += (
            (d_jac[:, 0, 0] + d_jac[:, 1, 1]) * (-inv_z2)
            + d_jac[:, 0, 2] * (2.0 * f * view[:, 0] / z**3)
            + d_jac[:, 1, 2] * (2.0 * f * view[:, 1] / z**3)
        )

        d_pos = d_view @ camera.rotation
        d_cov_world = np.einsum("ki,akl,lj->aij", camera.rotation, d_cov_view, camera.rotation)
        d_cov_world = d_cov_world + np.swapaxes(d_cov_world, 1, 2)
        # Sigma = M M^T: the symmetrized gradient above is exactly 2 sym(dL/dSigma).
        d_m = d_cov_world @ m_mat
        d_rot = d_m * scales[:, None, :]
        d_log_scale = np.einsum("aik,aik->ak", rot, d_m) * scales

        d_quat = _rotation_grad_to_quaternion(cloud, active, d_rot)

        alphas = fwd.alphas
        d_logit = d_alpha * alphas * (1.0 - alphas)

        grads.positions[active] = d_pos
        grads.log_scales[active] = d_log_scale
        grads.rotations[active] = d_quat
        grads.colors[active] = d_color
        grads.opacity_logits[active] = d_logit


def _rotation_grad_to_quaternion(cloud, active, d_rot):
    """dL/dR -> dL/dq through R(q/|q|), including the normalization Jacobian."""
    q_raw = cloud.rotations[active]
    norm = np.linalg.norm(q_raw, axis=1)
    q = q_raw / norm[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    dr = d_rot

    dqw = 2.0 * (
        -z * dr[:, 0, 1] + y * dr[:, 0, 2] + z * dr[:, 1, 0] - x * dr[:, 1, 2]
        - y * dr[:, 2, 0] + x * dr[:, 2, 1]
    )
    dqx = 2.0 * (
        y * dr[:, 0, 1] + z * dr[:, 0, 2] + y * dr[:, 1, 0] - 2.0 * x * dr[:, 1, 1]
        - w * dr[:, 1, 2] + z * dr[:, 2, 0] + w * dr[:, 2, 1] - 2.0 * x * dr[:, 2, 2]
    )
    dqy = 2.0 * (
        -2.0 * y * dr[:, 0, 0] + x * dr[:, 0, 1] + w * dr[:, 0, 2] + x * dr[:, 1, 0]
        + z * dr[:, 1, 2] - w * dr[:, 2, 0] + z * dr[:, 2, 1] - 2.0 * y * dr[:, 2, 2]
    )
    dqz = 2.0 * (
        -2.0 * z * dr[:, 0, 0] - w * dr[:, 0, 1] + x * dr[:, 0, 2] + w * dr[:, 1, 0]
        - 2.0 * z * dr[:, 1, 1] + y * dr[:, 1, 2] + x * dr[:, 2, 0] + y * dr[:, 2, 1]
    )
    d_unit = np.stack([dqw, dqx, dqy, dqz], axis=1)
    # Normalization Jacobian: (I - q q^T) / |q_raw| applied to the unit-q grad.
    proj = d_unit - q * np.sum(q * d_unit, axis=1, keepdims=True)
    return proj / norm[:, None]


def render(cloud, camera, subset=None, background=WHITE, settings=None):
    """One-shot forward render with a throwaway Rasterizer."""
    return Rasterizer(settings).render(cloud, camera, subset=subset, background=background)
