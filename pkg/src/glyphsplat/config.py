"""JSON run configuration for the pipeline CLI.

One JSON document describes a full run; every tunable from the library
modules is overridable here, and anything omitted takes the library
default. Validation failures raise ConfigError with the offending key in
the message so the CLI can exit with a configuration-error code.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .glyph2cloud import (
    DEFAULT_BLEND_ALPHA,
    DEFAULT_BLEND_FRACTION,
    DEFAULT_DEPTH,
    DEFAULT_OPACITY,
    DEFAULT_SAMPLES,
    DEFAULT_THRESHOLD,
    BlendSchedule,
)
from .dca import DEFAULT_BETA, DEFAULT_DELTA
from .optimizer import CameraSchedule, DensifyConfig, OptimizationConfig

logger = logging.getLogger(__name__)

DEFAULT_RENDER_RESOLUTION = 1024


@dataclass
class ComponentSpec:
    """One semantic component: its prompt and 2D-stage artifacts."""

    prompt: str
    stylized: Path | None = None
    heatmap: Path | None = None
    samples: int = DEFAULT_SAMPLES

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("components[].samples must be >= 1")


@dataclass
class ProviderSpec:
    kind: str = "oracle"
    command: str | None = None
    timeout: float = 120.0
    # Oracle targets keyed by lambda index: "0" is the global term. Values
    # are an RGB triple or a PNG path rendered-size images are resized to.
    targets: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("oracle", "external"):
            raise ConfigError(f"provider.kind must be oracle or external, got {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ConfigError("provider.kind external requires provider.command")


@dataclass
class InitSpec:
    threshold: float = DEFAULT_THRESHOLD
    depth: float = DEFAULT_DEPTH
    opacity: float = DEFAULT_OPACITY

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("init.threshold must lie in (0, 1]")
        if self.depth <= 0:
            raise ConfigError("init.depth must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ConfigError("init.opacity must lie in (0, 1)")


@dataclass
class BlendSpec:
    alpha: float = DEFAULT_BLEND_ALPHA
    fraction: float = DEFAULT_BLEND_FRACTION
    total_steps: int = 50

    def schedule(self):
        return BlendSchedule.from_fraction(
            self.total_steps, fraction=self.fraction, alpha=self.alpha
        )


@dataclass
class DcaSpec:
    beta: float = DEFAULT_BETA
    delta: float = DEFAULT_DELTA
    cadence: int = 100

    def __post_init__(self):
        if self.beta < 0 or self.delta <= 0:
            raise ConfigError("dca.beta must be >= 0 and dca.delta > 0")


@dataclass
class OptimizeSpec:
    iterations: int = 3000
    learning_rate: float = 0.001
    lambda_global: float = 0.01
    lambdas: tuple | None = None  # explicit override of the area rule
    render_size: int = 64
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (-10.0, 30.0)
    radius: float = 2.5
    focal_ratio: float = 0.7
    timesteps: int = 1000
    background: tuple = (1.0, 1.0, 1.0)
    checkpoint_every: int = 500
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def camera_schedule(self):
        return CameraSchedule(
            azimuth_range=tuple(self.azimuth_range),
            elevation_range=tuple(self.elevation_range),
            radius=self.radius,
            size=self.render_size,
            focal_ratio=self.focal_ratio,
        )

    def optimization_config(self, lambdas, dca_cadence, seed):
        return OptimizationConfig(
            lambdas=tuple(lambdas),
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            camera=self.camera_schedule(),
            densify=self.densify,
            dca_cadence=dca_cadence,
            timesteps=self.timesteps,
            background=tuple(self.background),
            checkpoint_every=self.checkpoint_every,
            seed=seed,
        )


@dataclass
class PipelineConfig:
    """Everything one glyph run needs, resolved and validated."""

    glyph: Path
    prompt: str
    components: list
    init: InitSpec = field(default_factory=InitSpec)
    blend: BlendSpec = field(default_factory=BlendSpec)
    dca: DcaSpec = field(default_factory=DcaSpec)
    optimize: OptimizeSpec = field(default_factory=OptimizeSpec)
    provider: ProviderSpec = field(default_factory=ProviderSpec)
    render_resolution: int = DEFAULT_RENDER_RESOLUTION
    output_dir: Path = Path("out")
    seed: int = 0

    def __post_init__(self):
        if not self.components:
            raise ConfigError("need at least one component")
        if self.render_resolution < 1:
            raise ConfigError("render_resolution must be >= 1")
        if len(self.components) > 3:
            logger.warning(
                "%d components; glyphs typically decompose into 1-3",
                len(self.components),
            )

    def component_count(self):
        return len(self.components)

    def prompts(self):
        """Global prompt followed by one prompt per component, lambda order."""
        return [self.prompt] + [c.prompt for c in self.components]

    def check_files(self):
        """Existence check for every referenced input path."""
        missing = []
        if not self.glyph.exists():
            missing.append(str(self.glyph))
        for spec in self.components:
            for path in (spec.stylized, spec.heatmap):
                if path is not None and not path.exists():
                    missing.append(str(path))
        for target in self.provider.targets.values():
            if isinstance(target, Path) and not target.exists():
                missing.append(str(target))
        if missing:
            raise ConfigError("missing input files: " + ", ".join(sorted(set(missing))))


def _take(raw, key, expected, default):
    value = raw.pop(key, default)
    if value is default:
        return value
    if expected is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, expected):
        raise ConfigError(f"{key} must be {getattr(expected, '__name__', expected)}")
    return value


def _reject_unknown(raw, where):
    if raw:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(raw))}")


def _parse_component(raw, index, base):
    if not isinstance(raw, dict):
        raise ConfigError(f"components[{index}] must be an object")
    raw = dict(raw)
    if "prompt" not in raw:
        raise ConfigError(f"components[{index}].prompt is required")
    spec = ComponentSpec(
        prompt=_take(raw, "prompt", str, None),
        stylized=_path_or_none(raw.pop("stylized", None), base),
        heatmap=_path_or_none(raw.pop("heatmap", None), base),
        samples=_take(raw, "samples", int, DEFAULT_SAMPLES),
    )
    _reject_unknown(raw, f"components[{index}]")
    return spec


def _path_or_none(value, base):
    if value is None:
        return None
    if not isinstance(value, str):
        raise ConfigError(f"expected a path string, got {value!r}")
    path = Path(value)
    return path if path.is_absolute() else base / path


def _parse_provider(raw, base):
    raw = dict(raw)
    targets = {}
    for key, value in raw.pop("targets", {}).items():
        try:
            index = int(key)
        except ValueError:
            raise ConfigError(f"provider.targets key {key!r} is not a lambda index") from None
        if isinstance(value, str):
            targets[index] = _path_or_none(value, base)
        elif isinstance(value, (list, tuple)) and len(value) == 3:
            targets[index] = tuple(float(c) for c in value)
        else:
            raise ConfigError(f"provider.targets[{key}] must be [r,g,b] or a PNG path")
    spec = ProviderSpec(
        kind=_take(raw, "kind", str, "oracle"),
        command=_take(raw, "command", str, None),
        timeout=_take(raw, "timeout", float, 120.0),
        targets=targets,
    )
    _reject_unknown(raw, "provider")
    return spec


def _parse_densify(raw):
    raw = dict(raw)
    spec = DensifyConfig(
        prune_opacity=_take(raw, "prune_opacity", float, 0.005),
        grad_threshold=_take(raw, "grad_threshold", float, 2e-4),
        cadence=_take(raw, "cadence", int, 200),
        stop_fraction=_take(raw, "stop_fraction", float, 0.7),
        split_scale=_take(raw, "split_scale", float, 0.02),
        scale_shrink=_take(raw, "scale_shrink", float, 1.6),
        max_gaussians=_take(raw, "max_gaussians", int, 200_000),
    )
    _reject_unknown(raw, "optimize.densify")
    return spec


def _parse_optimize(raw):
    raw = dict(raw)
    lambdas = raw.pop("lambdas", None)
    if lambdas is not None:
        lambdas = tuple(float(l) for l in lambdas)
    spec = OptimizeSpec(
        iterations=_take(raw, "iterations", int, 3000),
        learning_rate=_take(raw, "learning_rate", float, 0.001),
        lambda_global=_take(raw, "lambda_global", float, 0.01),
        lambdas=lambdas,
        render_size=_take(raw, "render_size", int, 64),
        azimuth_range=tuple(raw.pop("azimuth_range", (0.0, 360.0))),
        elevation_range=tuple(raw.pop("elevation_range", (-10.0, 30.0))),
        radius=_take(raw, "radius", float, 2.5),
        focal_ratio=_take(raw, "focal_ratio", float, 0.7),
        timesteps=_take(raw, "timesteps", int, 1000),
        background=tuple(raw.pop("background", (1.0, 1.0, 1.0))),
        checkpoint_every=_take(raw, "checkpoint_every", int, 500),
        densify=_parse_densify(raw.pop("densify", {})),
    )
    _reject_unknown(raw, "optimize")
    return spec


def parse_config(raw, base):
    """Build a PipelineConfig from a decoded JSON object.

    base anchors relative paths (normally the config file's directory).
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = dict(raw)
    if "glyph" not in raw:
        raise ConfigError("glyph is required")
    if "components" not in raw or not isinstance(raw["components"], list):
        raise ConfigError("components must be a list")

    glyph = _path_or_none(raw.pop("glyph"), base)
    components = [
        _parse_component(c, i, base) for i, c in enumerate(raw.pop("components"))
    ]

    init_raw = dict(raw.pop("init", {}))
    init = InitSpec(
        threshold=_take(init_raw, "threshold", float, DEFAULT_THRESHOLD),
        depth=_take(init_raw, "depth", float, DEFAULT_DEPTH),
        opacity=_take(init_raw, "opacity", float, DEFAULT_OPACITY),
    )
    _reject_unknown(init_raw, "init")

    blend_raw = dict(raw.pop("blend", {}))
    blend = BlendSpec(
        alpha=_take(blend_raw, "alpha", float, DEFAULT_BLEND_ALPHA),
        fraction=_take(blend_raw, "fraction", float, DEFAULT_BLEND_FRACTION),
        total_steps=_take(blend_raw, "total_steps", int, 50),
    )
    _reject_unknown(blend_raw, "blend")

    dca_raw = dict(raw.pop("dca", {}))
    dca = DcaSpec(
        beta=_take(dca_raw, "beta", float, DEFAULT_BETA),
        delta=_take(dca_raw, "delta", float, DEFAULT_DELTA),
        cadence=_take(dca_raw, "cadence", int, 100),
    )
    _reject_unknown(dca_raw, "dca")

    config = PipelineConfig(
        glyph=glyph,
        prompt=_take(raw, "prompt", str, ""),
        components=components,
        init=init,
        blend=blend,
        dca=dca,
        optimize=_parse_optimize(raw.pop("optimize", {})),
        provider=_parse_provider(raw.pop("provider", {}), base),
        render_resolution=_take(raw, "render_resolution", int, DEFAULT_RENDER_RESOLUTION),
        output_dir=Path(raw.pop("output_dir", "out")),
        seed=_take(raw, "seed", int, 0),
    )
    _reject_unknown(raw, "config root")

    explicit = config.optimize.lambdas
    if explicit is not None and len(explicit) != len(components) + 1:
        raise ConfigError(
            f"optimize.lambdas has {len(explicit)} entries, "
            f"need {len(components) + 1} (global + one per component)"
        )
    return config


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    config = parse_config(raw, path.resolve().parent)
    if not config.output_dir.is_absolute():
        config.output_dir = path.resolve().parent / config.output_dir
    return config
