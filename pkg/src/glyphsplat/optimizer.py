"""Component-wise score-distillation optimization loop.

Every iteration samples one camera (shared by all components to keep their
gradients spatially consistent) and one timestep, renders the full cloud
for the global term and each labeled subset for the local terms, feeds the
renders to the guidance provider, pulls the returned pixel gradients back
through the rasterizer, and applies a single Adam update of the
lambda-weighted sum. Densification/pruning and component reassignment run
on their own cadences between steps.

Determinism: all randomness flows from numpy Generators keyed by
(seed, stream tag, iteration), components accumulate in index order, and
the whole loop is single-threaded, so identical configs and seeds yield
bit-identical clouds with the oracle provider.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .adam import AdamState, adam_step, save_adam
from .camera import look_at, orbit_position
from .cloud import GaussianCloud
from .dca import assign_gaussians
from .errors import ProviderFailure
from .guidance import GuidanceRequest
from .ply import save_ply
from .rasterizer import CloudGradients, Rasterizer, RenderSettings

logger = logging.getLogger(__name__)

# Stream tags keep the per-purpose RNGs independent at equal iterations.
_STREAM_CAMERA = 101
_STREAM_TIMESTEP = 202
_STREAM_DENSIFY = 303
_STREAM_PROVIDER = 404


@dataclass(frozen=True)
class CameraSchedule:
    """Viewpoint distribution for optimization renders."""

    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (-10.0, 30.0)
    radius: float = 2.5
    size: int = 64
    focal_ratio: float = 0.7

    def __post_init__(self):
        if self.size <= 0 or self.radius <= 0 or self.focal_ratio <= 0:
            raise ValueError("size, radius, focal_ratio must be positive")


def sample_camera(schedule, iteration, seed):
    """Deterministic random orbit camera for one iteration."""
    rng = np.random.default_rng([seed, _STREAM_CAMERA, iteration])
    az = rng.uniform(*schedule.azimuth_range)
    el = rng.uniform(*schedule.elevation_range)
    return look_at(
        orbit_position(az, el, schedule.radius),
        target=(0.0, 0.0, 0.0),
        width=schedule.size,
        height=schedule.size,
        focal=schedule.focal_ratio * schedule.size,
    )


def sample_timestep(total, iteration, seed):
    rng = np.random.default_rng([seed, _STREAM_TIMESTEP, iteration])
    return int(rng.integers(0, total + 1))


def provider_seed(iteration, seed):
    return int(np.random.SeedSequence([seed, _STREAM_PROVIDER, iteration]).generate_state(1)[0])


@dataclass(frozen=True)
class DensifyConfig:
    prune_opacity: float = 0.005
    grad_threshold: float = 2e-4
    cadence: int = 200
    stop_fraction: float = 0.7  # densify only in the first 70% of the run
    split_scale: float = 0.02  # world-unit scale above which split beats clone
    scale_shrink: float = 1.6
    max_gaussians: int = 200_000  # no further densification once reached (single event may overshoot)


@dataclass(frozen=True)
class OptimizationConfig:
    """Everything one optimization run needs besides cloud and prompts."""

    lambdas: tuple
    learning_rate: float = 0.001
    iterations: int = 3000
    camera: CameraSchedule = field(default_factory=CameraSchedule)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    dca_cadence: int = 100
    timesteps: int = 1000
    background: tuple = (1.0, 1.0, 1.0)
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(l) for l in self.lambdas))
        if not self.lambdas:
            raise ValueError("need at least the global lambda")
        if any(l < 0 for l in self.lambdas):
            raise ValueError("lambdas must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 0 or self.timesteps < 0:
            raise ValueError("iterations and timesteps must be nonnegative")

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).digest()


def lambdas_from_areas(areas, lambda_global=0.01, local_base=1.0):
    """Global weight plus per-component weights proportional to region area."""
    areas = np.asarray(areas, dtype=np.float64)
    if areas.size == 0 or np.any(areas < 0) or areas.sum() <= 0:
        raise ValueError("component areas must be nonnegative with positive total")
    return (float(lambda_global),) + tuple(local_base * areas / areas.sum())


@dataclass
class StepReport:
    iteration: int
    losses: dict
    skipped: tuple
    gaussians: int


class DensifyStats:
    """Accumulated positional-gradient norms driving densification."""

    def __init__(self, n):
        self.norm_sum = np.zeros(n)
        self.counts = np.zeros(n, dtype=np.int64)

    def update(self, position_grads):
        norms = np.linalg.norm(position_grads, axis=1)
        seen = norms > 0.0
        self.norm_sum[seen] += norms[seen]
        self.counts[seen] += 1

    def mean_norm(self):
        out = np.zeros_like(self.norm_sum)
        seen = self.counts > 0
        out[seen] = self.norm_sum[seen] / self.counts[seen]
        return out

    def select(self, index):
        fresh = DensifyStats(0)
        fresh.norm_sum = self.norm_sum[np.asarray(index)].copy()
        fresh.counts = self.counts[np.asarray(index)].copy()
        return fresh

    def reset(self):
        self.norm_sum[:] = 0.0
        self.counts[:] = 0


def accumulate_gradients(cloud, cams, provider, cfg, iteration=0, prompts=None):
    """Lambda-weighted parameter gradients over all terms, pre-Adam.

    Term order is fixed: lambda index 0 renders the whole cloud, index m >= 1
    renders only Gaussians labeled m. Every term of one call shares the same
    timestep and provider seed. Returns (CloudGradients, losses, skipped)
    where losses maps lambda index to the mean squared provider gradient and
    skipped lists components that had no Gaussians.
    """
    cameras = list(cams) if isinstance(cams, (list, tuple)) else [cams]
    prompts = prompts or [""] * len(cfg.lambdas)
    if len(prompts) < len(cfg.lambdas):
        raise ValueError("need one prompt per lambda")

    t = sample_timestep(cfg.timesteps, iteration, cfg.seed)
    req_seed = provider_seed(iteration, cfg.seed)
    background = np.asarray(cfg.background, dtype=np.float64)

    accum = CloudGradients.zeros(len(cloud))
    losses = {}
    skipped = []
    for m, lam in enumerate(cfg.lambdas):
        if lam == 0.0:
            continue
        subset = None if m == 0 else m
        if subset is not None and not np.any(cloud.component_mask(subset)):
            logger.warning("component %d has no Gaussians; skipping its term", m)
            skipped.append(m)
            continue
        term_loss = 0.0
        for cam in cameras:
            ras = Rasterizer(RenderSettings())
            image = ras.render(cloud, cam, subset=subset, background=background)
            request = GuidanceRequest(
                image=image, prompt=prompts[m], timestep=t, seed=req_seed, component_id=m
            )
            response = provider.guide(request)
            if response.grad.shape != image.pixels.shape:
                raise ProviderFailure(
                    f"provider grad shape {response.grad.shape} vs render {image.pixels.shape}"
                )
            partial = ras.render_backward(cloud, cam, subset, lam * response.grad)
            accum.add_scaled(partial, 1.0)
            term_loss += float(np.mean(response.grad**2))
        losses[m] = term_loss / len(cameras)
    return accum, losses, tuple(skipped)


def sds_step(cloud, cams, provider, cfg, state, iteration=0, stats=None, prompts=None):
    """One optimization step over the given cameras.

    All terms accumulate before the single Adam update at the end, so a
    provider failure anywhere leaves the parameters untouched.
    """
    accum, losses, skipped = accumulate_gradients(
        cloud, cams, provider, cfg, iteration=iteration, prompts=prompts
    )
    if stats is not None:
        stats.update(accum.positions)
    adam_step(cloud, accum, state, cfg.learning_rate)
    return StepReport(
        iteration=iteration, losses=losses, skipped=skipped, gaussians=len(cloud)
    )


def densify_prune(cloud, cfg, state, stats, iteration=0, seed=0, allow_densify=True):
    """Prune transparent Gaussians; split or clone high-gradient ones.

    Split children draw positions from the parent's own distribution and
    shrink its scales; clones are verbatim copies. Both inherit the parent's
    component label and Adam moment rows. Returns (cloud, state, stats);
    accumulated gradient statistics reset whenever the structure changes.
    """
    densify = cfg.densify
    opacities = cloud.opacities()
    keep = opacities >= densify.prune_opacity
    keep_idx = np.flatnonzero(keep)

    mean_norm = stats.mean_norm()
    hot = keep & (mean_norm > densify.grad_threshold)
    if not allow_densify or len(cloud) >= densify.max_gaussians:
        hot[:] = False
    scales = cloud.scales().max(axis=1)
    split_idx = np.flatnonzero(hot & (scales > densify.split_scale))
    clone_idx = np.flatnonzero(hot & (scales <= densify.split_scale))

    survivors = np.setdiff1d(keep_idx, split_idx, assume_unique=True)
    pruned = int(len(cloud) - keep_idx.size)
    if pruned == 0 and split_idx.size == 0 and clone_idx.size == 0:
        return cloud, state, stats, {"pruned": 0, "split": 0, "cloned": 0}

    pieces = [cloud.select(survivors)]
    index_map = [survivors]

    if clone_idx.size:
        pieces.append(cloud.select(clone_idx))
        index_map.append(clone_idx)

    if split_idx.size:
        rng = np.random.default_rng([seed, _STREAM_DENSIFY, iteration])
        parents = cloud.select(split_idx)
        cov = parents.covariances()
        chol = np.linalg.cholesky(cov)
        for _ in range(2):
            draws = rng.standard_normal((split_idx.size, 3))
            child = parents.copy()
            child.positions = parents.positions + np.einsum("aij,aj->ai", chol, draws)
            child.log_scales = parents.log_scales - np.log(densify.scale_shrink)
            pieces.append(child)
            index_map.append(split_idx)

    new_cloud = GaussianCloud.concatenate(pieces)
    new_index = np.concatenate(index_map)
    new_state = state.select(new_index)
    new_stats = stats.select(new_index)
    new_stats.reset()
    report = {"pruned": pruned, "split": int(split_idx.size), "cloned": int(clone_idx.size)}
    logger.info(
        "densify/prune at %d: -%d pruned, %d split, %d cloned -> %d gaussians",
        iteration, report["pruned"], report["split"], report["cloned"], len(new_cloud),
    )
    return new_cloud, new_state, new_stats, report


@dataclass
class OptimizationResult:
    cloud: GaussianCloud
    state: AdamState
    history: list
    log_path: Path | None = None


def run_optimization(
    cloud,
    provider,
    cfg,
    prompts,
    label_map=None,
    front_cam=None,
    out_dir=None,
    cameras_per_step=1,
):
    """Drive sds_step for cfg.iterations with all cadenced maintenance.

    The cloud is mutated in place (and structurally replaced on densify);
    the returned result carries the final object. When out_dir is given,
    checkpoints (PLY + Adam sidecar) and a CSV loss log are written there.
    """
    state = AdamState.zeros(len(cloud))
    stats = DensifyStats(len(cloud))
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_file = None
    writer = None
    max_m = len(cfg.lambdas) - 1

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.csv"
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(
            ["iteration"] + [f"loss_{m}" for m in range(max_m + 1)] + ["gaussians"]
        )

    try:
        for iteration in range(1, cfg.iterations + 1):
            cams = [
                sample_camera(cfg.camera, iteration * cameras_per_step + k, cfg.seed)
                for k in range(cameras_per_step)
            ]
            report = sds_step(
                cloud, cams, provider, cfg, state, iteration=iteration,
                stats=stats, prompts=prompts,
            )
            history.append(report)
            if writer is not None:
                row = [iteration]
                row += [f"{report.losses[m]:.8e}" if m in report.losses else "" for m in range(max_m + 1)]
                row.append(len(cloud))
                writer.writerow(row)

            if (
                cfg.densify.cadence > 0
                and iteration % cfg.densify.cadence == 0
                and iteration < cfg.iterations
            ):
                allow = iteration <= cfg.densify.stop_fraction * cfg.iterations
                cloud, state, stats, _ = densify_prune(
                    cloud, cfg, state, stats,
                    iteration=iteration, seed=cfg.seed, allow_densify=allow,
                )

            if (
                label_map is not None
                and front_cam is not None
                and cfg.dca_cadence > 0
                and iteration % cfg.dca_cadence == 0
            ):
                moved = assign_gaussians(cloud, label_map, front_cam)
                if moved:
                    logger.info("reassigned %d gaussians at iteration %d", moved, iteration)

            if (
                out_dir is not None
                and cfg.checkpoint_every > 0
                and iteration % cfg.checkpoint_every == 0
            ):
                tag = f"{iteration:06d}"
                save_ply(cloud, out_dir / f"checkpoint_{tag}.ply")
                save_adam(state, out_dir / f"checkpoint_{tag}.adam", cfg.config_hash())
    finally:
        if log_file is not None:
            log_file.close()

    return OptimizationResult(cloud=cloud, state=state, history=history, log_path=log_path)
