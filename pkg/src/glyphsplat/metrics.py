"""Quality metrics over rendered views, with JSON/CSV/figure reporting.

Multi-view consistency is proxied by MSE and SSIM between adjacent
turntable views (noisy clouds shimmer between neighboring viewpoints;
coherent ones change smoothly). Semantic preservation is proxied by the
IoU between the front-view silhouette and the input glyph mask.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from skimage.metrics import structural_similarity

from .camera import front_camera, turntable_cameras
from .rasterizer import RenderSettings, render

logger = logging.getLogger(__name__)

# Accumulated alpha at or above this marks a pixel as covered. The default
# init opacity (0.1) gives fresh clouds per-pixel alpha well above it.
SILHOUETTE_ALPHA = 0.05

_TILED = RenderSettings(mode="tiled")


def view_consistency(
    cloud,
    views=8,
    size=256,
    elevation_deg=10.0,
    radius=2.5,
    focal_ratio=0.7,
    background=(1.0, 1.0, 1.0),
):
    """MSE and SSIM between each adjacent pair on a turntable.

    Pair i compares view i with view (i+1) mod V, so the loop closes.
    Returns a dict ready for JSON serialization.
    """
    if views < 2:
        raise ValueError("need at least two views")
    background = np.asarray(background, dtype=np.float64)
    cameras = turntable_cameras(
        views, size, elevation_deg=elevation_deg, radius=radius, focal_ratio=focal_ratio
    )
    images = [
        np.clip(render(cloud, cam, background=background, settings=_TILED).pixels, 0.0, 1.0)
        for cam in cameras
    ]
    mse = []
    ssim = []
    for i in range(views):
        a = images[i]
        b = images[(i + 1) % views]
        mse.append(float(np.mean((a - b) ** 2)))
        ssim.append(
            float(structural_similarity(a, b, channel_axis=2, data_range=1.0))
        )
    return {
        "views": views,
        "size": size,
        "elevation_deg": elevation_deg,
        "pair_mse": mse,
        "pair_ssim": ssim,
        "mean_mse": float(np.mean(mse)),
        "mean_ssim": float(np.mean(ssim)),
    }


def silhouette_iou(cloud, mask, alpha_threshold=SILHOUETTE_ALPHA):
    """IoU between the front-view coverage and a boolean glyph mask."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    cam = front_camera(w, h)
    image = render(cloud, cam, settings=_TILED)
    covered = image.alpha >= alpha_threshold
    union = int(np.sum(covered | mask))
    if union == 0:
        return 1.0
    return float(np.sum(covered & mask) / union)


def coverage_fraction(cloud, mask, alpha_threshold=SILHOUETTE_ALPHA):
    """Fraction of covered front-view pixels that fall inside the mask."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    cam = front_camera(w, h)
    covered = render(cloud, cam, settings=_TILED).alpha >= alpha_threshold
    total = int(covered.sum())
    if total == 0:
        return 1.0
    return float(np.sum(covered & mask) / total)


def write_metrics(report, out_dir, stem="metrics"):
    """Persist a metrics report as JSON + CSV + a rendered figure.

    Returns the three paths (json, csv, png).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    png_path = out_dir / f"{stem}.png"

    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    pairs = report.get("pair_mse", [])
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "mse", "ssim"])
        for i, (m, s) in enumerate(zip(pairs, report.get("pair_ssim", []))):
            writer.writerow([i, f"{m:.8e}", f"{s:.8f}"])

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    xs = np.arange(len(pairs))
    axes[0].plot(xs, report.get("pair_mse", []), marker="o")
    axes[0].set_xlabel("adjacent view pair")
    axes[0].set_ylabel("MSE")
    axes[0].set_title(f"mean MSE {report.get('mean_mse', float('nan')):.2e}")
    axes[1].plot(xs, report.get("pair_ssim", []), marker="o", color="tab:green")
    axes[1].set_xlabel("adjacent view pair")
    axes[1].set_ylabel("SSIM")
    axes[1].set_ylim(-1.0, 1.05)
    axes[1].set_title(f"mean SSIM {report.get('mean_ssim', float('nan')):.4f}")
    title = "view consistency"
    if "silhouette_iou" in report:
        title += f" | front IoU {report['silhouette_iou']:.3f}"
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return json_path, csv_path, png_path


def write_loss_figure(log_path, png_path):
    """Loss curves per lambda term from a training CSV log."""
    log_path = Path(log_path)
    with open(log_path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not body:
        logger.warning("no rows in %s; skipping loss figure", log_path)
        return None
    iterations = [int(r[0]) for r in body]
    fig, (ax_loss, ax_count) = plt.subplots(1, 2, figsize=(9, 3.2))
    for col in range(1, len(header) - 1):
        series = [(it, float(r[col])) for it, r in zip(iterations, body) if r[col]]
        if series:
            ax_loss.plot(*zip(*series), label=header[col])
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss proxy")
    ax_loss.set_yscale("log")
    ax_loss.legend(fontsize=7)
    ax_count.plot(iterations, [int(r[-1]) for r in body], color="tab:gray")
    ax_count.set_xlabel("iteration")
    ax_count.set_ylabel("gaussians")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return Path(png_path)
