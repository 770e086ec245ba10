"""Command-line entry point.

Exit codes:
    0  success
    1  data or quality failure (unreadable inputs, nothing recovered, stage error)
    2  configuration or usage error
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, InfeasibleOverlap, LowOverlapError, PoleInRange, StageError
from .pipeline import (
    STAGES,
    RunConfig,
    default_workers,
    load_config,
    load_recovered,
    run_cloud,
    run_dsm,
    run_eval,
    run_ortho,
    run_pipeline,
    run_recover,
)

logger = logging.getLogger("lowoverlap")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--manifest", type=Path, help="dataset manifest (overrides config)")
    p.add_argument("--out", type=Path, help="output directory (overrides config)")
    p.add_argument("--workers", type=int, help="worker threads (default: $LOWOVERLAP_WORKERS or 1)")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=("huber", "square"))
    p.add_argument("--min-pairs", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--cell-size", type=float)
    p.add_argument("--aggregator", choices=("median", "max", "mean"))
    p.add_argument("--occlusion-tolerance", type=float)
    p.add_argument("--skip", action="append", choices=STAGES, default=[],
                   help="disable a stage (pipeline only; repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lowoverlap", description="Low-overlap aerial DSM/ortho pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("spec", type=Path)
    synth.add_argument("out", type=Path)
    synth.add_argument("-v", "--verbose", action="store_true")
    for name, text in (
        ("recover", "fit per-image warps and write metric depth maps"),
        ("cloud", "fuse recovered depth maps into a point cloud"),
        ("dsm", "rasterize the cloud into a DSM"),
        ("ortho", "build the true orthophoto"),
        ("eval", "compute metrics against ground truth"),
        ("pipeline", "run every stage"),
    ):
        _add_run_options(sub.add_parser(name, help=text))
    return parser


def resolve_config(args) -> RunConfig:
    """Config file first, then command-line flags on top."""
    cfg = load_config(args.config) if args.config else RunConfig(workers=default_workers())
    if args.manifest:
        cfg.manifest = args.manifest
    if args.out:
        cfg.out_dir = args.out
    overrides = {
        "workers": args.workers,
        "seed": args.seed,
        "stride": args.stride,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    try:
        if args.loss is not None:
            cfg.recovery = replace(cfg.recovery, loss=args.loss)
        if args.min_pairs is not None:
            cfg.recovery = replace(cfg.recovery, min_pairs=args.min_pairs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.cell_size is not None:
        cfg.dsm.cell_size = args.cell_size
    if args.aggregator is not None:
        cfg.dsm.aggregator = args.aggregator
    if args.occlusion_tolerance is not None:
        cfg.ortho.occlusion_tolerance = args.occlusion_tolerance
    for name in args.skip:
        cfg.stages[name] = False
    if args.verbose:
        cfg.log_level = "DEBUG"
    if cfg.manifest is None or cfg.out_dir is None:
        raise ConfigError("a manifest and an output directory are required (--manifest/--out or config)")
    return cfg.validate()


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _setup_logging(level: str) -> None:
    logger.setLevel(getattr(logging, level.upper()))
    if not any(isinstance(h, _StderrHandler) for h in logger.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)


def cmd_synth(args) -> int:
    from .synth import generate_dataset
    from .ingest import load_manifest

    try:
        doc = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read spec {args.spec}: {exc}") from None
    try:
        path = generate_dataset(doc, args.out)
    except (PoleInRange, InfeasibleOverlap) as exc:
        raise ConfigError(str(exc)) from None
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad synth spec: {exc!r}") from None
    load_manifest(path)
    logger.info("wrote %s", path)
    return EXIT_OK


def _manifest(cfg):
    from .ingest import load_manifest

    return load_manifest(cfg.manifest)


def cmd_recover(cfg: RunConfig) -> int:
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    results, maps = run_recover(_manifest(cfg), cfg)
    if not maps:
        logger.error("no image recovered")
        return EXIT_DATA
    logger.info("%d of %d images recovered", len(maps), len(results))
    return EXIT_OK


def cmd_cloud(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    run_cloud(manifest, load_recovered(manifest, cfg.out_dir), cfg)
    return EXIT_OK


def cmd_dsm(cfg: RunConfig) -> int:
    from .ingest import read_ply

    run_dsm(_manifest(cfg), read_ply(Path(cfg.out_dir) / "cloud.ply"), cfg)
    return EXIT_OK


def cmd_ortho(cfg: RunConfig) -> int:
    from .ingest import read_asc_grid

    manifest = _manifest(cfg)
    dsm = read_asc_grid(Path(cfg.out_dir) / "dsm.asc")
    run_ortho(manifest, dsm, load_recovered(manifest, cfg.out_dir), cfg)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from .ingest import read_asc_grid

    manifest = _manifest(cfg)
    out = Path(cfg.out_dir)
    dsm = read_asc_grid(out / "dsm.asc") if (out / "dsm.asc").exists() else None
    view_index = read_asc_grid(out / "view_index.asc") if (out / "view_index.asc").exists() else None
    run_eval(manifest, cfg, load_recovered(manifest, out), dsm, view_index)
    return EXIT_OK


def cmd_pipeline(cfg: RunConfig) -> int:
    run_pipeline(cfg)
    return EXIT_OK


COMMANDS = {
    "recover": cmd_recover,
    "cloud": cmd_cloud,
    "dsm": cmd_dsm,
    "ortho": cmd_ortho,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            _setup_logging("DEBUG" if args.verbose else "INFO")
            return cmd_synth(args)
        cfg = resolve_config(args)
        _setup_logging(cfg.log_level)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"lowoverlap: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"lowoverlap: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (LowOverlapError, OSError) as exc:
        print(f"lowoverlap: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
