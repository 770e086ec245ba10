"""Depth and DSM accuracy metrics and completeness."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyAoi, EmptyInput, GridMismatch, KindMismatch, NoOverlap
from .rasters import DepthMap, RasterGrid

HIST_BIN_WIDTH = 1.0
HIST_MAX = 20.0


@dataclass
class DepthErrorSummary:
    image_id: int
    rmse: float
    n_compared: int
    sse: float = 0.0


@dataclass
class DsmErrorSummary:
    mae: float
    median_ae: float
    n_cells: int
    bin_edges: list[float] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def depth_rmse(recovered: DepthMap, gt: DepthMap, image_id: int = -1) -> DepthErrorSummary:
    """RMSE over pixels valid in both maps."""
    if recovered.values.shape != gt.values.shape:
        raise DimensionMismatch(f"{recovered.values.shape} vs {gt.values.shape}")
    if recovered.kind != "metric" or gt.kind != "metric":
        raise KindMismatch("depth_rmse compares metric maps")
    both = recovered.valid & gt.valid
    n = int(both.sum())
    if n == 0:
        raise NoOverlap("no pixel is valid in both maps")
    diff = recovered.values[both].astype(np.float64) - gt.values[both].astype(np.float64)
    sse = float(np.dot(diff, diff))
    return DepthErrorSummary(image_id, float(np.sqrt(sse / n)), n, sse)


def dataset_mrmse(summaries) -> float:
    """Unweighted mean of per-image RMSE values."""
    summaries = list(summaries)
    if not summaries:
        raise EmptyInput("no per-image summaries")
    r = np.array([s.rmse for s in summaries], dtype=np.float64)
    # shifting by the first value keeps the mean of identical inputs exact
    return float(r[0] + math.fsum(r - r[0]) / len(r))


def pooled_rmse(summaries) -> float:
    """RMSE over all compared pixels of all images (pixel-weighted)."""
    summaries = list(summaries)
    if not summaries:
        raise EmptyInput("no per-image summaries")
    n = sum(s.n_compared for s in summaries)
    return float(np.sqrt(sum(s.sse for s in summaries) / n))


def error_grid(dsm: RasterGrid, gt: RasterGrid) -> RasterGrid:
    """Absolute elevation error ``|dsm - gt|``; nodata where either is nodata."""
    if not dsm.same_geometry(gt):
        raise GridMismatch("DSM and ground truth grids differ in extent or cell size")
    return dsm.with_values(np.abs(dsm.values - gt.values))


def dsm_error_stats(dsm: RasterGrid, gt: RasterGrid, mask: RasterGrid | None = None,
                    bin_width: float = HIST_BIN_WIDTH, hist_max: float = HIST_MAX) -> DsmErrorSummary:
    """MAE, median absolute error and a histogram of absolute errors.

    Bins are ``bin_width`` wide over ``[0, hist_max)`` plus one overflow bin.
    Only cells valid in both grids (and nonzero in ``mask``, if given) count.
    """
    err = error_grid(dsm, gt).values
    sel = ~np.isnan(err)
    if mask is not None:
        if not mask.same_geometry(dsm):
            raise GridMismatch("mask grid differs from the DSM grid")
        sel &= np.nan_to_num(mask.values, nan=0.0) != 0
    e = err[sel]
    if len(e) == 0:
        raise NoOverlap("no cell is valid in both grids")
    edges = np.arange(0.0, hist_max + bin_width / 2, bin_width)
    counts = np.zeros(len(edges), np.int64)
    bins = np.minimum(np.floor(e / bin_width).astype(np.int64), len(edges) - 1)
    np.add.at(counts, bins, 1)
    return DsmErrorSummary(
        mae=float(np.mean(e)),
        median_ae=float(np.median(e)),
        n_cells=int(len(e)),
        bin_edges=[float(x) for x in edges],
        counts=[int(c) for c in counts],
    )


def _aoi_cells(grid: RasterGrid, aoi) -> np.ndarray:
    x, y = grid.cell_centers()
    if aoi is None:
        return np.ones(grid.values.shape, dtype=bool)
    xmin, ymin, xmax, ymax = aoi
    return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)


def completeness(grid: RasterGrid, aoi=None) -> float:
    """Fraction of cells (centers inside ``aoi``) that hold a value."""
    inside = _aoi_cells(grid, aoi)
    n = int(inside.sum())
    if n == 0:
        raise EmptyAoi(f"AOI {aoi} contains no cell center of the grid")
    return float(np.count_nonzero(grid.valid & inside) / n)


def metrics_table(report: dict) -> str:
    """Plain-text rendering of a metrics report."""
    lines = []
    depth = report.get("depth")
    if depth:
        lines.append(f"{'image':>8} {'rmse_m':>12} {'pixels':>10}")
        for row in depth["per_image"]:
            lines.append(f"{row['image_id']:>8} {row['rmse']:>12.6f} {row['n_compared']:>10}")
        lines.append(f"{'mRMSE':>8} {depth['mrmse']:>12.6f}")
        lines.append(f"{'pooled':>8} {depth['pooled_rmse']:>12.6f}")
    dsm = report.get("dsm")
    if dsm:
        lines.append(f"DSM MAE {dsm['mae']:.4f} m, median AE {dsm['median_ae']:.4f} m over {dsm['n_cells']} cells")
    for key in ("completeness", "baseline_completeness", "ortho_completeness"):
        if key in report:
            lines.append(f"{key}: {report[key]:.4f}")
    return "\n".join(lines) + "\n"


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
