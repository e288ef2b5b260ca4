"""Exception types shared across the pipeline."""


class GlyphSplatError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(GlyphSplatError):
    """Two arrays that must agree in shape do not."""


class BehindCamera(GlyphSplatError):
    """A point projected with depth at or behind the near plane."""


class DegenerateCovariance(GlyphSplatError):
    """A projected 2D covariance is singular or non-finite; indicates a bug upstream."""


class StaleForward(GlyphSplatError):
    """Backward pass requested against a forward pass that no longer matches."""


class EmptyMask(GlyphSplatError):
    """An operation that requires foreground pixels received an all-zero mask."""


class ZeroMass(GlyphSplatError):
    """A weighted average over a heatmap with zero total mass."""


class NoTarget(GlyphSplatError):
    """Oracle guidance has no target registered for the requested component."""


class ProviderFailure(GlyphSplatError):
    """A guidance provider failed to produce a gradient; the step must be aborted."""


class EmptyComponent(GlyphSplatError):
    """A component selected for rendering contains no Gaussians."""


class ConfigError(GlyphSplatError):
    """A pipeline configuration is malformed or references missing files."""
