"""Stage orchestration shared by the command-line tool.

Every stage reads its inputs from the manifest and the output directory and
writes its artifacts back there, so stages can run one at a time or chained.
Per-image work is dispatched to a thread pool; results are always collected
in manifest image order, which keeps every artifact independent of the
worker count.
"""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientPairs, DegenerateSystem, LowOverlapError, StageError
from .evaluation import (
    completeness,
    dataset_mrmse,
    depth_rmse,
    dsm_error_stats,
    dump_json,
    error_grid,
    metrics_table,
    pooled_rmse,
)
from .fusion import DEFAULT_STRIDE, PointCloud, depth_to_cloud, merge_clouds, voxel_downsample
from .ingest import (
    load_manifest,
    read_asc_grid,
    read_color_image,
    read_depth_pfm,
    read_ply,
    write_asc_grid,
    write_depth_pfm,
    write_ply,
    write_png,
    write_world_file,
)
from .products import (
    DsmConfig,
    OrthoConfig,
    OrthoView,
    coverage_mask,
    dataset_cell_size,
    fill_holes,
    orthorectify,
    ortho_rgba,
    rasterize_dsm,
    stereo_baseline,
)
from .rasters import DepthMap, RasterGrid, resample
from .recovery import (
    STATUS_DEGRADED,
    STATUS_INSUFFICIENT,
    STATUS_OK,
    FitOptions,
    apply_model,
    build_correspondences,
    fit_rational,
)

logger = logging.getLogger(__name__)

STAGES = ("recover", "cloud", "dsm", "ortho", "eval")
WORKERS_ENV = "LOWOVERLAP_WORKERS"
RECOVERED_DIR = "recovered"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


@dataclass
class DsmOptions:
    cell_size: float | None = None
    aggregator: str = "median"
    fill_radius: int = 3
    fill_k: int = 8
    aoi: tuple[float, float, float, float] | None = None


@dataclass
class OrthoOptions:
    occlusion_tolerance: float = 1.0
    ranking: str = "min_view_angle"


@dataclass
class RunConfig:
    """Everything a run needs besides the data itself.

    ``dsm.cell_size`` and ``dsm.aoi`` default to the ground-truth DSM grid when
    the manifest has one, else to two mean GSDs over the manifest AOI (or the
    cloud's extent).
    """

    manifest: Path | None = None
    out_dir: Path | None = None
    stages: dict[str, bool] = field(default_factory=lambda: {s: True for s in STAGES})
    recovery: FitOptions = field(default_factory=FitOptions)
    stride: int = DEFAULT_STRIDE
    voxel: float | None = None
    dsm: DsmOptions = field(default_factory=DsmOptions)
    ortho: OrthoOptions = field(default_factory=OrthoOptions)
    workers: int = 1
    seed: int = 0
    log_level: str = "INFO"

    def validate(self) -> "RunConfig":
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.voxel is not None and not self.voxel > 0:
            raise ConfigError("voxel must be > 0")
        if self.dsm.cell_size is not None and not self.dsm.cell_size > 0:
            raise ConfigError("dsm.cell_size must be > 0")
        if not self.ortho.occlusion_tolerance > 0:
            raise ConfigError("ortho.occlusion_tolerance must be > 0")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"unknown log level {self.log_level!r}")
        try:
            DsmConfig(self.dsm.cell_size or 1.0, self.dsm.aggregator, self.dsm.fill_radius,
                      self.dsm.fill_k, self.dsm.aoi)
            OrthoConfig(1.0, self.ortho.occlusion_tolerance, self.ortho.ranking)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "RunConfig":
        """Build from a JSON document; relative paths resolve against ``base``."""
        doc = dict(doc)
        base = Path(base) if base is not None else Path.cwd()
        _reject_unknown(doc, {f.name for f in fields(cls)}, "config")
        cfg = cls(workers=default_workers())
        for key in ("manifest", "out_dir"):
            if doc.get(key) is not None:
                setattr(cfg, key, base / doc[key])
        if "stages" in doc:
            cfg.stages = {**{s: True for s in STAGES}, **{k: bool(v) for k, v in doc["stages"].items()}}
        try:
            if "recovery" in doc:
                _reject_unknown(doc["recovery"], {f.name for f in fields(FitOptions)}, "recovery")
                cfg.recovery = FitOptions(**doc["recovery"])
        except ValueError as exc:
            raise ConfigError(f"recovery: {exc}") from None
        if "dsm" in doc:
            _reject_unknown(doc["dsm"], {f.name for f in fields(DsmOptions)}, "dsm")
            opts = dict(doc["dsm"])
            if opts.get("aoi") is not None:
                opts["aoi"] = tuple(float(v) for v in opts["aoi"])
            cfg.dsm = DsmOptions(**opts)
        if "ortho" in doc:
            _reject_unknown(doc["ortho"], {f.name for f in fields(OrthoOptions)}, "ortho")
            cfg.ortho = OrthoOptions(**doc["ortho"])
        for key in ("stride", "workers", "seed"):
            if key in doc:
                setattr(cfg, key, int(doc[key]))
        if doc.get("voxel") is not None:
            cfg.voxel = float(doc["voxel"])
        if "log_level" in doc:
            cfg.log_level = str(doc["log_level"])
        return cfg.validate()

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["manifest"] = None if self.manifest is None else str(self.manifest)
        doc["out_dir"] = None if self.out_dir is None else str(self.out_dir)
        doc["dsm"]["aoi"] = None if self.dsm.aoi is None else list(self.dsm.aoi)
        return doc


def _reject_unknown(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(doc, base=path.parent)


def _map(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _recovered_path(out_dir: Path, entry) -> Path:
    return out_dir / RECOVERED_DIR / f"{entry.name}.pfm"


# recovery


@dataclass
class ImageResult:
    image_id: int
    name: str
    status: str
    report: dict | None = None
    model: dict | None = None
    dropped: dict | None = None
    error: str | None = None

    @property
    def recovered(self) -> bool:
        return self.status in (STATUS_OK, STATUS_DEGRADED)


def recover_image(manifest, entry, tie_points, options: FitOptions):
    """Fit and apply the warp for one image; returns ``(ImageResult, DepthMap | None)``."""
    k = manifest.intrinsics(entry)
    path = manifest.depth_path(entry)
    try:
        mono = read_depth_pfm(path, kind=manifest.depth_kind)
    except FileNotFoundError:
        logger.error("image %s: depth file %s missing; skipped", entry.name, path)
        return ImageResult(entry.id, entry.name, "missing_input", error=f"missing {path}"), None
    except LowOverlapError as exc:
        logger.error("image %s: cannot read %s: %s", entry.name, path, exc)
        return ImageResult(entry.id, entry.name, "missing_input", error=str(exc)), None
    if (mono.width, mono.height) != (k.width, k.height):
        mono = resample(mono, k.width, k.height)
    corr = build_correspondences(entry.id, entry.pose, k, tie_points, mono, options.edge_k)
    try:
        model, report = fit_rational(corr.mono, corr.depth, options)
    except InsufficientPairs as exc:
        logger.warning("image %s: %s", entry.name, exc)
        return ImageResult(entry.id, entry.name, STATUS_INSUFFICIENT, dropped=corr.dropped,
                           error=str(exc)), None
    except DegenerateSystem as exc:
        logger.warning("image %s: degenerate fit: %s", entry.name, exc)
        return ImageResult(entry.id, entry.name, "rejected_degenerate", dropped=corr.dropped,
                           error=str(exc)), None
    result = ImageResult(entry.id, entry.name, report.status, report.to_dict(), model.to_dict(),
                         corr.dropped)
    if not result.recovered:
        logger.warning("image %s rejected: %s", entry.name, report.message or report.status)
        return result, None
    metric = apply_model(model, mono, options.range_margin)
    # recovered maps are stored as float32; keep the in-memory copy identical
    metric = DepthMap(metric.values.astype(np.float32), metric.valid, "metric")
    logger.info("image %s: %s, residual rmse %.4g m over %d/%d pairs", entry.name, report.status,
                report.residual_rmse, report.n_inliers, report.n_pairs)
    return result, metric


def run_recover(manifest, cfg: RunConfig, tie_points=None):
    """Recover every image; writes ``recovered/*.pfm`` and ``fit_report.json``.

    Returns ``(results, maps)`` where ``maps`` is keyed by image id.
    """
    out = Path(cfg.out_dir)
    (out / RECOVERED_DIR).mkdir(parents=True, exist_ok=True)
    tie_points = tie_points if tie_points is not None else manifest.load_tie_points()
    pairs = _map(lambda e: recover_image(manifest, e, tie_points, cfg.recovery), manifest.images, cfg.workers)
    results, maps = [], {}
    for entry, (result, metric) in zip(manifest.images, pairs):
        results.append(result)
        path = _recovered_path(out, entry)
        if metric is not None:
            write_depth_pfm(metric, path)
            maps[entry.id] = metric
        elif path.exists():
            path.unlink()
    recovered = [r.name for r in results if r.recovered]
    skipped = [{"image": r.name, "status": r.status, "reason": r.error or ""}
               for r in results if not r.recovered]
    dump_json({
        "images": [asdict(r) for r in results],
        "recovered": recovered,
        "skipped": skipped,
    }, out / "fit_report.json")
    return results, maps


def load_recovered(manifest, out_dir: Path) -> dict[int, DepthMap]:
    maps = {}
    for entry in manifest.images:
        path = _recovered_path(Path(out_dir), entry)
        if path.exists():
            maps[entry.id] = read_depth_pfm(path, kind="metric")
    return maps


# fusion


def _color_for(entry, k):
    if entry.path is None or not Path(entry.path).exists():
        return None
    try:
        color = read_color_image(entry.path)
    except LowOverlapError as exc:
        logger.warning("image %s: cannot read color: %s", entry.name, exc)
        return None
    if (color.width, color.height) != (k.width, k.height):
        logger.warning("image %s: color size differs from camera; uncolored", entry.name)
        return None
    return color


def run_cloud(manifest, maps: dict[int, DepthMap], cfg: RunConfig) -> PointCloud:
    """Fuse recovered maps into ``cloud.ply``."""
    entries = [e for e in manifest.images if e.id in maps]
    if not entries:
        raise StageError("cloud", "no recovered depth maps")

    def lift(entry):
        k = manifest.intrinsics(entry)
        return depth_to_cloud(k, entry.pose, maps[entry.id], _color_for(entry, k), cfg.stride, entry.id)

    clouds = _map(lift, entries, cfg.workers)
    if any(c.rgb is None for c in clouds):
        clouds = [PointCloud(c.xyz, None, c.source) for c in clouds]
    cloud = merge_clouds(clouds)
    if cfg.voxel is not None:
        cloud = voxel_downsample(cloud, cfg.voxel)
    write_ply(cloud, Path(cfg.out_dir) / "cloud.ply")
    logger.info("fused %d points from %d images", len(cloud), len(entries))
    return cloud


# DSM


def dsm_grid(manifest, cfg: RunConfig, tie_points=None) -> RasterGrid | None:
    """Target DSM geometry, or None to derive it from the cloud."""
    if cfg.dsm.cell_size is None and cfg.dsm.aoi is None and manifest.gt_dsm is not None \
            and Path(manifest.gt_dsm).exists():
        gt = read_asc_grid(manifest.gt_dsm)
        return RasterGrid.empty(gt.origin_x, gt.origin_y, gt.cell_size, gt.ncols, gt.nrows)
    cell = cfg.dsm.cell_size
    if cell is None:
        tie_points = tie_points if tie_points is not None else manifest.load_tie_points()
        cell = dataset_cell_size(manifest, tie_points)
    aoi = cfg.dsm.aoi or manifest.aoi
    if aoi is None:
        return None
    return RasterGrid.covering(*aoi, cell)


def run_dsm(manifest, cloud: PointCloud, cfg: RunConfig, tie_points=None):
    """Rasterize and fill; writes ``dsm_raw.asc`` and ``dsm.asc``."""
    grid = dsm_grid(manifest, cfg, tie_points)
    cell = grid.cell_size if grid is not None else (
        cfg.dsm.cell_size or dataset_cell_size(manifest, tie_points or manifest.load_tie_points()))
    dcfg = DsmConfig(cell, cfg.dsm.aggregator, cfg.dsm.fill_radius, cfg.dsm.fill_k, cfg.dsm.aoi)
    raw = rasterize_dsm(cloud, dcfg, grid)
    dsm = fill_holes(raw, dcfg)
    out = Path(cfg.out_dir)
    write_asc_grid(raw, out / "dsm_raw.asc")
    write_asc_grid(dsm, out / "dsm.asc")
    logger.info("DSM %dx%d at %.3g m: %.1f%% binned, %.1f%% after fill", dsm.ncols, dsm.nrows,
                dsm.cell_size, 100 * raw.valid.mean(), 100 * dsm.valid.mean())
    return raw, dsm


# ortho


def run_ortho(manifest, dsm: RasterGrid, maps: dict[int, DepthMap], cfg: RunConfig):
    """True ortho on the DSM grid; writes ``ortho.png`` (+ ``.pgw``) and ``view_index.asc``."""
    entries = [e for e in manifest.images if e.id in maps]

    def view(entry):
        k = manifest.intrinsics(entry)
        color = _color_for(entry, k)
        return None if color is None else OrthoView(entry.id, entry.pose, k, color, maps[entry.id])

    views = [v for v in _map(view, entries, cfg.workers) if v is not None]
    if not views:
        raise StageError("ortho", "no recovered image with a readable color image")
    ocfg = OrthoConfig(dsm.cell_size, cfg.ortho.occlusion_tolerance, cfg.ortho.ranking)
    channels, view_index = orthorectify(dsm, views, ocfg)
    out = Path(cfg.out_dir)
    write_png(ortho_rgba(channels), out / "ortho.png")
    write_world_file(dsm, out / "ortho.pgw")
    write_asc_grid(view_index, out / "view_index.asc")
    logger.info("ortho: %.1f%% of cells textured", 100 * view_index.valid.mean())
    return channels, view_index


# evaluation


def run_eval(manifest, cfg: RunConfig, maps: dict[int, DepthMap], dsm: RasterGrid | None,
             view_index: RasterGrid | None = None) -> dict | None:
    """Depth and DSM metrics against the manifest's ground truth.

    Returns None (with a warning) when the manifest has no ground truth.
    """
    out = Path(cfg.out_dir)
    report: dict = {}
    have_gt = manifest.gt_depth_pattern is not None or manifest.gt_dsm is not None
    if not have_gt:
        logger.warning("manifest has no ground truth; evaluation skipped")
        return None

    if manifest.gt_depth_pattern is not None:
        summaries = []
        for entry in manifest.images:
            if entry.id not in maps:
                continue
            gt_path = manifest.gt_depth_path(entry)
            if not gt_path.exists():
                logger.warning("image %s: no ground-truth depth at %s", entry.name, gt_path)
                continue
            gt = read_depth_pfm(gt_path, kind="metric")
            rec = maps[entry.id]
            if (gt.width, gt.height) != (rec.width, rec.height):
                gt = resample(gt, rec.width, rec.height)
            summaries.append(depth_rmse(rec, gt, entry.id))
        if summaries:
            report["depth"] = {
                "per_image": [asdict(s) for s in summaries],
                "mrmse": dataset_mrmse(summaries),
                "pooled_rmse": pooled_rmse(summaries),
            }

    aoi = cfg.dsm.aoi or manifest.aoi
    if dsm is not None:
        report["completeness"] = completeness(dsm, aoi)
        views = [(e.pose, manifest.intrinsics(e)) for e in manifest.images]
        report["baseline_completeness"] = completeness(stereo_baseline(dsm, views, 2), aoi)
        if manifest.gt_dsm is not None and Path(manifest.gt_dsm).exists():
            gt_dsm = read_asc_grid(manifest.gt_dsm)
            if gt_dsm.same_geometry(dsm):
                report["dsm"] = dsm_error_stats(dsm, gt_dsm).to_dict()
                single = coverage_mask(views, dsm, 2)
                single = single.with_values(1.0 - single.values)
                if (single.values > 0).any():
                    try:
                        report["dsm_single_coverage"] = dsm_error_stats(dsm, gt_dsm, single).to_dict()
                    except LowOverlapError:
                        pass
                write_asc_grid(error_grid(dsm, gt_dsm), out / "dsm_error.asc")
            else:
                logger.warning("ground-truth DSM grid differs from the product grid; DSM error skipped")
    if view_index is not None:
        report["ortho_completeness"] = completeness(view_index, aoi)

    dump_json(report, out / "metrics.json")
    (out / "metrics.txt").write_text(metrics_table(report))
    return report


# chained run


def run_pipeline(cfg: RunConfig) -> dict:
    """Run the enabled stages in order; writes ``run_summary.json``.

    Raises:
        StageError: naming the first stage that failed.
    """
    if cfg.manifest is None or cfg.out_dir is None:
        raise ConfigError("manifest and out_dir are required")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    counts: dict[str, int] = {}
    summary: dict = {"config": cfg.to_dict(), "timings_s": timings, "counts": counts}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except StageError:
            raise
        except (LowOverlapError, OSError, ValueError) as exc:
            raise StageError(name, str(exc)) from exc
        finally:
            timings[name] = round(time.perf_counter() - t0, 4)

    manifest = stage("ingest", lambda: load_manifest(cfg.manifest))
    tie_points = stage("ingest", manifest.load_tie_points)
    counts["images"] = len(manifest.images)
    counts["tie_points"] = len(tie_points.point_ids)

    on = cfg.stages
    if on.get("recover", True):
        results, maps = stage("recover", lambda: run_recover(manifest, cfg, tie_points))
        counts["recovered"] = sum(r.recovered for r in results)
        summary["statuses"] = {r.name: r.status for r in results}
        if not maps:
            raise StageError("recover", "no image could be recovered")
    else:
        maps = stage("recover", lambda: load_recovered(manifest, out))

    cloud = raw = dsm = view_index = None
    if on.get("cloud", True):
        cloud = stage("cloud", lambda: run_cloud(manifest, maps, cfg))
        counts["points"] = len(cloud)
    if on.get("dsm", True):
        if cloud is None:
            cloud = stage("dsm", lambda: read_ply(out / "cloud.ply"))
        raw, dsm = stage("dsm", lambda: run_dsm(manifest, cloud, cfg, tie_points))
        counts["dsm_cells"] = int(dsm.values.size)
        counts["dsm_valid_cells"] = int(dsm.valid.sum())
    if on.get("ortho", True):
        if dsm is None:
            dsm = stage("ortho", lambda: read_asc_grid(out / "dsm.asc"))
        _, view_index = stage("ortho", lambda: run_ortho(manifest, dsm, maps, cfg))
    if on.get("eval", True):
        metrics = stage("eval", lambda: run_eval(manifest, cfg, maps, dsm, view_index))
        summary["metrics"] = metrics
        if metrics is None:
            summary["eval_skipped"] = "no ground truth in manifest"

    dump_json(summary, out / "run_summary.json")
    return summary
