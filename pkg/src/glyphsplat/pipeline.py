"""Pipeline commands behind the CLI: init, optimize, render, assign, metrics, export.

Each command takes a validated PipelineConfig (plus a cloud path where it
operates on an existing cloud) and writes its artifacts under the config's
output directory. All commands are deterministic for a fixed config and
seed with the oracle provider.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from skimage.transform import resize

from .camera import front_camera, turntable_cameras
from .cloud import GaussianCloud
from .dca import assign_gaussians, build_label_map, drifted_fraction
from .errors import ConfigError
from .glyph2cloud import (
    ComponentHeatmap,
    GlyphImage,
    fallback_segment,
    lift_to_cloud,
    sample_foreground,
    threshold_heatmap,
)
from .guidance import ExternalGuidance, OracleGuidance
from .images import load_hmap, load_png, save_label_png, save_png
from .metrics import (
    silhouette_iou,
    view_consistency,
    write_loss_figure,
    write_metrics,
)
from .optimizer import lambdas_from_areas, run_optimization
from .ply import load_ply, quantize, save_ply
from .rasterizer import RenderSettings, render

logger = logging.getLogger(__name__)

_TILED = RenderSettings(mode="tiled")

# Fixed per-purpose salts so the component RNG streams stay independent.
_SEED_SAMPLE = 31
_SEED_LIFT = 37


def load_glyph(config):
    return GlyphImage(pixels=load_png(config.glyph))


def component_inputs(config):
    """Per-component (stylized pixels, heatmap, mask) in component-id order.

    The stylized image falls back to the glyph itself; the heatmap falls
    back to luminance segmentation of the stylized image.
    """
    glyph = load_glyph(config)
    out = []
    for index, spec in enumerate(config.components):
        component_id = index + 1
        stylized = load_png(spec.stylized) if spec.stylized else glyph.pixels
        if spec.heatmap:
            values = load_hmap(spec.heatmap)
        else:
            values = fallback_segment(stylized)
        if values.shape != stylized.shape[:2]:
            raise ConfigError(
                f"component {component_id}: heatmap {values.shape} does not match "
                f"image {stylized.shape[:2]}"
            )
        mask = threshold_heatmap(values, config.init.threshold)
        out.append((stylized, ComponentHeatmap(values, component_id), mask))
    return out


def build_dca_inputs(config, inputs=None):
    """(label map, matching front camera) from the component heatmaps."""
    inputs = inputs if inputs is not None else component_inputs(config)
    heatmaps = [hm for _, hm, _ in inputs]
    label_map = build_label_map(heatmaps, beta=config.dca.beta, delta=config.dca.delta)
    h, w = label_map.labels.shape
    return label_map, front_camera(w, h)


def resolve_lambdas(config, inputs=None):
    """Explicit lambdas from config, or the area rule over component masks."""
    explicit = config.optimize.lambdas
    if explicit is not None:
        return tuple(explicit)
    inputs = inputs if inputs is not None else component_inputs(config)
    areas = [int(mask.sum()) for _, _, mask in inputs]
    return lambdas_from_areas(areas, lambda_global=config.optimize.lambda_global)


def _masked_mean_color(pixels, mask):
    if not mask.any():
        return np.full(3, 0.5)
    return pixels[mask].mean(axis=0)


def build_provider(config, inputs=None):
    """Instantiate the guidance provider the config asks for.

    Oracle targets come from provider.targets (RGB triple or PNG path,
    resized to the optimization render); components without an explicit
    target fall back to the mean stylized color inside their mask, and the
    global term to the mean over all component masks.
    """
    if config.provider.kind == "external":
        return ExternalGuidance(config.provider.command, timeout=config.provider.timeout)

    inputs = inputs if inputs is not None else component_inputs(config)
    size = config.optimize.render_size
    targets = {}
    for index, target in config.provider.targets.items():
        if isinstance(target, Path):
            pixels = load_png(target)
            if pixels.shape[:2] != (size, size):
                pixels = resize(
                    pixels, (size, size), order=1, preserve_range=True, anti_aliasing=True
                )
            targets[index] = np.clip(pixels, 0.0, 1.0)
        else:
            targets[index] = np.asarray(target, dtype=np.float64)

    for index, (stylized, _, mask) in enumerate(inputs):
        targets.setdefault(index + 1, _masked_mean_color(stylized, mask))
    if 0 not in targets:
        any_mask = np.zeros(inputs[0][2].shape, dtype=bool)
        stack = []
        for stylized, _, mask in inputs:
            any_mask |= mask
            stack.append(stylized[mask])
        targets[0] = (
            np.concatenate(stack).mean(axis=0) if any_mask.any() else np.full(3, 0.5)
        )
    return OracleGuidance(targets)


def cmd_init(config):
    """Segment, sample, and lift each component; write the merged cloud.

    Returns the path of the written PLY. The in-memory cloud is quantized
    to the PLY's float32 precision first, so reloading the file renders
    bit-identically to what this command produced.
    """
    config.check_files()
    inputs = component_inputs(config)
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    parts = []
    for index, ((stylized, heatmap, mask), spec) in enumerate(zip(inputs, config.components)):
        component_id = index + 1
        points = sample_foreground(
            mask, spec.samples, seed=[config.seed, _SEED_SAMPLE, component_id]
        )
        parts.append(
            lift_to_cloud(
                points,
                stylized,
                component_id,
                seed=[config.seed, _SEED_LIFT, component_id],
                depth=config.init.depth,
                opacity=config.init.opacity,
            )
        )
        logger.info(
            "component %d: %d mask pixels, %d samples", component_id, int(mask.sum()), len(parts[-1])
        )

    cloud = quantize(GaussianCloud.concatenate(parts))
    ply_path = out_dir / "init.ply"
    save_ply(cloud, ply_path)

    label_map, _ = build_dca_inputs(config, inputs)
    save_label_png(label_map.component_labels(), out_dir / "label_map.png")
    logger.info("wrote %s with %d gaussians", ply_path, len(cloud))
    return ply_path


def cmd_optimize(config, cloud_path=None):
    """Score-distillation optimization of an initialized cloud.

    Reads <out>/init.ply unless an explicit cloud path is given; writes
    final.ply, checkpoints, log.csv, and a loss-curve figure. A provider
    failure aborts the run but leaves the last checkpoint on disk.
    """
    config.check_files()
    out_dir = config.output_dir
    cloud_path = Path(cloud_path) if cloud_path else out_dir / "init.ply"
    if not cloud_path.exists():
        raise ConfigError(f"cloud {cloud_path} not found; run init first")
    cloud = load_ply(cloud_path)

    inputs = component_inputs(config)
    lambdas = resolve_lambdas(config, inputs)
    if len(lambdas) != config.component_count() + 1:
        raise ConfigError(
            f"{len(lambdas)} lambdas for {config.component_count()} components"
        )
    label_map, front_cam = build_dca_inputs(config, inputs)
    cfg = config.optimize.optimization_config(lambdas, config.dca.cadence, config.seed)
    logger.info(
        "optimizing %d gaussians for %d iterations, lambdas %s",
        len(cloud), cfg.iterations, tuple(round(l, 6) for l in lambdas),
    )

    with build_provider(config, inputs) as provider:
        result = run_optimization(
            cloud,
            provider,
            cfg,
            prompts=config.prompts(),
            label_map=label_map,
            front_cam=front_cam,
            out_dir=out_dir,
        )

    final = quantize(result.cloud)
    final_path = out_dir / "final.ply"
    save_ply(final, final_path)
    if result.log_path is not None and cfg.iterations > 0:
        write_loss_figure(result.log_path, out_dir / "loss_curve.png")
    logger.info("wrote %s with %d gaussians", final_path, len(final))
    return final_path


def cmd_render(config, cloud_path=None, views=8, size=None, subdir="views"):
    """Turntable PNG sequence: equally spaced azimuths at 10 deg elevation."""
    out_dir = config.output_dir / subdir
    out_dir.mkdir(parents=True, exist_ok=True)
    cloud_path = Path(cloud_path) if cloud_path else _default_cloud(config)
    cloud = load_ply(cloud_path)
    size = size or config.render_resolution

    cameras = turntable_cameras(views, size)
    background = np.asarray(config.optimize.background, dtype=np.float64)
    paths = []
    with open(out_dir / "index.csv", "w") as fh:
        fh.write("view,azimuth_deg,path\n")
        for i, cam in enumerate(cameras):
            image = render(cloud, cam, background=background, settings=_TILED)
            path = out_dir / f"view_{i:03d}.png"
            save_png(np.clip(image.pixels, 0.0, 1.0), path, alpha=image.alpha)
            paths.append(path)
            fh.write(f"{i},{360.0 * i / views:g},{path.name}\n")
    logger.info("wrote %d views to %s", views, out_dir)
    return paths


def cmd_assign(config, cloud_path=None):
    """One component-reassignment pass; writes assigned.ply and a report."""
    config.check_files()
    cloud_path = Path(cloud_path) if cloud_path else _default_cloud(config)
    cloud = load_ply(cloud_path)
    label_map, front_cam = build_dca_inputs(config)

    before = drifted_fraction(cloud, label_map, front_cam)
    changed = assign_gaussians(cloud, label_map, front_cam)
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    assigned_path = out_dir / "assigned.ply"
    save_ply(quantize(cloud), assigned_path)
    save_label_png(label_map.component_labels(), out_dir / "label_map.png")

    report = {
        "source": str(cloud_path),
        "gaussians": len(cloud),
        "changed": changed,
        "drifted_fraction_before": before,
        "components": {
            str(cid): int(np.sum(cloud.component_ids == cid))
            for cid in label_map.component_ids
        },
    }
    with open(out_dir / "assign.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("reassigned %d of %d gaussians", changed, len(cloud))
    return assigned_path, report


def cmd_metrics(config, cloud_path=None, views=8, size=256):
    """View-consistency + silhouette report under <out>/, with a figure."""
    config.check_files()
    cloud_path = Path(cloud_path) if cloud_path else _default_cloud(config)
    cloud = load_ply(cloud_path)

    report = view_consistency(
        cloud,
        views=views,
        size=size,
        radius=config.optimize.radius,
        focal_ratio=config.optimize.focal_ratio,
        background=config.optimize.background,
    )
    glyph = load_glyph(config)
    glyph_mask = threshold_heatmap(fallback_segment(glyph.pixels), config.init.threshold)
    report["silhouette_iou"] = silhouette_iou(cloud, glyph_mask)
    report["source"] = str(cloud_path)
    report["gaussians"] = len(cloud)

    paths = write_metrics(report, config.output_dir)
    logger.info(
        "mean adjacent MSE %.3e, mean SSIM %.4f, IoU %.3f",
        report["mean_mse"], report["mean_ssim"], report["silhouette_iou"],
    )
    return report, paths


def cmd_export(config, cloud_path=None, views=8, size=None):
    """Bundle final artifacts under <out>/export: PLY, views, report, sheet."""
    cloud_path = Path(cloud_path) if cloud_path else _default_cloud(config)
    export_dir = config.output_dir / "export"
    export_dir.mkdir(parents=True, exist_ok=True)

    shutil.copyfile(cloud_path, export_dir / "cloud.ply")
    size = size or min(config.render_resolution, 512)
    view_paths = cmd_render(config, cloud_path, views=views, size=size, subdir="export/views")
    report, _ = cmd_metrics(config, cloud_path, views=views, size=min(size, 256))

    # Contact sheet: the turntable strip plus the training curve if present.
    log_path = config.output_dir / "log.csv"
    cols = min(4, views)
    rows = int(np.ceil(views / cols)) + (1 if log_path.exists() else 0)
    fig = plt.figure(figsize=(3 * cols, 3 * rows))
    for i, path in enumerate(view_paths):
        ax = fig.add_subplot(rows, cols, i + 1)
        ax.imshow(plt.imread(path))
        ax.set_title(f"{360.0 * i / views:.0f} deg", fontsize=8)
        ax.axis("off")
    if log_path.exists():
        ax = fig.add_subplot(rows, 1, rows)
        with open(log_path) as fh:
            body = list(csv.reader(fh))[1:]
        if body:
            its = [int(r[0]) for r in body]
            losses = [float(r[1]) for r in body if r[1]]
            ax.plot(its[: len(losses)], losses)
            ax.set_yscale("log")
            ax.set_xlabel("iteration")
            ax.set_ylabel("global loss proxy")
    sheet_path = export_dir / "summary.png"
    fig.tight_layout()
    fig.savefig(sheet_path, dpi=110)
    plt.close(fig)

    manifest = {
        "cloud": "cloud.ply",
        "views": [p.name for p in view_paths],
        "metrics": report,
        "summary": sheet_path.name,
        "seed": config.seed,
    }
    with open(export_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("export bundle at %s", export_dir)
    return export_dir


def _default_cloud(config):
    """final.ply when it exists, otherwise init.ply."""
    final = config.output_dir / "final.ply"
    if final.exists():
        return final
    init = config.output_dir / "init.ply"
    if init.exists():
        return init
    raise ConfigError(f"no cloud found under {config.output_dir}; run init first")
