"""Glyph-conditioned cloud initialization.

The 2D stage works on a printed glyph and a stylized version of it. Blended
denoising keeps the stylized stream anchored to the glyph shape for the
first K of T steps; segmentation heatmaps (model-provided, or the luminance
fallback) mark each component's pixels; foreground samples are lifted onto
a thin slab around the glyph plane as the initial Gaussians.

All randomness is routed through explicit seeds; the same inputs and seed
always produce the same cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import glyph_pixels_to_world
from .cloud import GaussianCloud, logit
from .errors import EmptyMask, ShapeMismatch

GLYPH_RESOLUTION = 768  # native resolution of the 2D stage

DEFAULT_SAMPLES = 20000
DEFAULT_THRESHOLD = 0.5
DEFAULT_DEPTH = 0.1
DEFAULT_OPACITY = 0.1
DEFAULT_BLEND_ALPHA = 0.7
DEFAULT_BLEND_FRACTION = 0.3  # K = floor(0.3 T)


@dataclass
class GlyphImage:
    """A glyph rendering: float RGB in [0, 1]."""

    pixels: np.ndarray
    kind: str = "printed"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("glyph pixels must be (H, W, 3)")
        if self.kind not in ("printed", "stylized"):
            raise ValueError(f"unknown glyph kind {self.kind!r}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("glyph pixels must lie in [0, 1]")


@dataclass
class ComponentHeatmap:
    """Nonnegative per-pixel support for one semantic component."""

    values: np.ndarray
    component_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("heatmap must be 2D")
        if not np.all(np.isfinite(self.values)) or (
            self.values.size and self.values.min() < 0.0
        ):
            raise ValueError("heatmap values must be finite and nonnegative")
        if self.component_id < 1:
            raise ValueError("component ids start at 1")


@dataclass
class LatentTensor:
    """A diffusion latent at a known timestep."""

    values: np.ndarray
    timestep: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestep < 0:
            raise ValueError("timestep must be nonnegative")


@dataclass
class BlendSchedule:
    """Blend the style stream with the printed-glyph stream for K late steps.

    Denoising counts down from timestep T; the window is T-K <= t <= T.
    alpha may be a scalar or an array broadcastable to the latent shape.
    """

    alpha: float | np.ndarray = DEFAULT_BLEND_ALPHA
    k: int = 0
    total: int = 0

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 <= self.k <= self.total:
            raise ValueError("need 0 <= k <= total")

    @classmethod
    def from_fraction(cls, total, fraction=DEFAULT_BLEND_FRACTION, alpha=DEFAULT_BLEND_ALPHA):
        return cls(alpha=alpha, k=int(np.floor(fraction * total)), total=total)

    def active(self, t):
        return self.total - self.k <= t <= self.total


def blend_latents(zs, zp, schedule, t):
    """Anchor the style latent zs to the printed latent zp inside the window.

    Outside the window the style stream passes through bit-identically; it
    is the stream actually being denoised.
    """
    if zs.values.shape != zp.values.shape:
        raise ShapeMismatch(f"{zs.values.shape} vs {zp.values.shape}")
    if zs.timestep != t or zp.timestep != t:
        raise ValueError("latent timesteps disagree with t")
    if not schedule.active(t):
        return LatentTensor(values=zs.values, timestep=t)
    a = np.asarray(schedule.alpha, dtype=np.float64)
    return LatentTensor(values=a * zs.values + (1.0 - a) * zp.values, timestep=t)


def shape_loss(decoded, printed):
    """Mean absolute difference between a decoded latent and the glyph."""
    decoded = np.asarray(decoded, dtype=np.float64)
    printed = np.asarray(printed, dtype=np.float64)
    if decoded.shape != printed.shape:
        raise ShapeMismatch(f"{decoded.shape} vs {printed.shape}")
    return float(np.mean(np.abs(decoded - printed)))


def threshold_heatmap(heatmap, tau=DEFAULT_THRESHOLD):
    """Boolean mask of pixels at or above tau times the heatmap maximum.

    An all-zero heatmap yields an all-false mask rather than an error; the
    caller decides whether an empty component is fatal.
    """
    values = heatmap.values if isinstance(heatmap, ComponentHeatmap) else np.asarray(heatmap)
    peak = values.max() if values.size else 0.0
    if peak <= 0.0:
        return np.zeros(values.shape, dtype=bool)
    return values >= tau * peak


def fallback_segment(image):
    """Single-component heatmap when no segmentation model is available.

    Dark-on-light glyphs make inverted Rec. 709 luminance a usable support
    map. No renormalization: a mid-gray image yields mid-level support, and
    an all-white image yields zero support everywhere.
    """
    pixels = image.pixels if isinstance(image, GlyphImage) else np.asarray(image)
    luma = 0.2126 * pixels[..., 0] + 0.7152 * pixels[..., 1] + 0.0722 * pixels[..., 2]
    return np.clip(1.0 - luma, 0.0, 1.0)


def sample_foreground(mask, n, seed):
    """n continuous pixel positions uniform over the true pixels of mask.

    Each sample is a uniformly chosen foreground pixel plus uniform jitter
    inside that pixel, so points cover the mask region continuously.
    Deterministic for a given (mask, n, seed).
    """
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMask("mask has no foreground pixels")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, rows.size, size=n)
    jitter = rng.uniform(0.0, 1.0, size=(n, 2))
    u = cols[pick] + jitter[:, 0]
    v = rows[pick] + jitter[:, 1]
    return np.stack([u, v], axis=1)


def lift_to_cloud(
    points,
    stylized,
    component_id,
    seed,
    depth=DEFAULT_DEPTH,
    opacity=DEFAULT_OPACITY,
):
    """Lift 2D foreground samples to a Gaussian slab on the glyph plane.

    Each point keeps its glyph-plane (x, y), draws z uniformly from the
    slab [-depth/2, depth/2], and takes its color from the stylized image
    at its source pixel. Scales start isotropic at the mean 3D
    nearest-neighbor distance so splats just cover the sampling gaps;
    rotations start at identity.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    pixels = stylized.pixels if isinstance(stylized, GlyphImage) else np.asarray(stylized)
    h, w = pixels.shape[:2]
    n = points.shape[0]

    rng = np.random.default_rng(seed)
    z = rng.uniform(-depth / 2.0, depth / 2.0, size=n)
    world = glyph_pixels_to_world(points, w, h)
    world[:, 2] = z

    cols = np.clip(points[:, 0].astype(np.int64), 0, w - 1)
    rows = np.clip(points[:, 1].astype(np.int64), 0, h - 1)
    colors = pixels[rows, cols].astype(np.float64)

    if n >= 2:
        dist, _ = cKDTree(world).query(world, k=2)
        mean_nn = float(dist[:, 1].mean())
    else:
        mean_nn = 2.0 / w  # lone point: fall back to one pixel in world units
    mean_nn = max(mean_nn, 1e-9)

    return GaussianCloud(
        positions=world,
        log_scales=np.full((n, 3), np.log(mean_nn)),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        colors=colors,
        opacity_logits=np.full(n, float(logit(opacity))),
        component_ids=np.full(n, component_id, dtype=np.int32),
    )
