"""Command-line entry point.

Subcommands mirror the pipeline stages:

  init      segment + sample + lift the glyph into init.ply
  optimize  score-distillation optimization into final.ply
  render    turntable PNG sequence from a cloud
  assign    one component-reassignment pass over a cloud
  metrics   view-consistency + silhouette report (JSON/CSV/figure)
  export    bundle cloud, views, metrics, and a summary sheet

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, GlyphSplatError
from . import pipeline

logger = logging.getLogger(__name__)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="glyphsplat",
        description="3D artistic glyph synthesis as optimized Gaussian clouds",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument(
            "--provider",
            choices=("oracle", "external"),
            default=None,
            help="override guidance provider kind",
        )
        p.add_argument(
            "--provider-cmd",
            default=None,
            help="external provider launch command (implies --provider external)",
        )

    p = sub.add_parser("init", help="build the initial Gaussian cloud")
    common(p)

    p = sub.add_parser("optimize", help="run score-distillation optimization")
    common(p)
    p.add_argument("--cloud", default=None, help="input PLY (default <out>/init.ply)")

    p = sub.add_parser("render", help="render a turntable PNG sequence")
    common(p)
    p.add_argument("--cloud", default=None, help="input PLY (default latest under <out>)")
    p.add_argument("--views", type=int, default=8, help="number of azimuth steps")
    p.add_argument("--size", type=int, default=None, help="image size (default config)")

    p = sub.add_parser("assign", help="reassign component labels from heatmaps")
    common(p)
    p.add_argument("--cloud", default=None, help="input PLY (default latest under <out>)")

    p = sub.add_parser("metrics", help="write the view-consistency report")
    common(p)
    p.add_argument("--cloud", default=None, help="input PLY (default latest under <out>)")
    p.add_argument("--views", type=int, default=8, help="turntable views to compare")
    p.add_argument("--size", type=int, default=256, help="comparison render size")

    p = sub.add_parser("export", help="bundle final artifacts")
    common(p)
    p.add_argument("--cloud", default=None, help="input PLY (default latest under <out>)")
    p.add_argument("--views", type=int, default=8, help="views in the bundle")
    p.add_argument("--size", type=int, default=None, help="view render size")
    return parser


def resolve_config(args):
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = Path(args.out)
    if args.provider_cmd is not None:
        config.provider.command = args.provider_cmd
        config.provider.kind = "external"
    if args.provider is not None:
        config.provider.kind = args.provider
        if config.provider.kind == "external" and not config.provider.command:
            raise ConfigError("--provider external requires --provider-cmd or provider.command")
    return config


def run(args):
    config = resolve_config(args)
    if args.command == "init":
        path = pipeline.cmd_init(config)
        print(path)
    elif args.command == "optimize":
        path = pipeline.cmd_optimize(config, cloud_path=args.cloud)
        print(path)
    elif args.command == "render":
        paths = pipeline.cmd_render(
            config, cloud_path=args.cloud, views=args.views, size=args.size
        )
        print(paths[0].parent)
    elif args.command == "assign":
        path, report = pipeline.cmd_assign(config, cloud_path=args.cloud)
        print(f"{path} changed={report['changed']}")
    elif args.command == "metrics":
        report, paths = pipeline.cmd_metrics(
            config, cloud_path=args.cloud, views=args.views, size=args.size
        )
        print(
            f"{paths[0]} mse={report['mean_mse']:.3e} "
            f"ssim={report['mean_ssim']:.4f} iou={report['silhouette_iou']:.3f}"
        )
    elif args.command == "export":
        path = pipeline.cmd_export(
            config, cloud_path=args.cloud, views=args.views, size=args.size
        )
        print(path)
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown command {args.command}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GlyphSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
