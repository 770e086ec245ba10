"""DSM rasterization, hole filling, true orthorectification and coverage masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyExtent
from .fusion import PointCloud
from .geometry import CameraIntrinsics, CameraPose, project_points, world_to_camera
from .rasters import ColorImage, DepthMap, RasterGrid, bilinear_lookup

AGGREGATORS = ("median", "max", "mean")
VIEW_RANKINGS = ("min_view_angle", "min_principal_distance")


@dataclass
class DsmConfig:
    cell_size: float
    aggregator: str = "median"
    fill_radius: int = 3
    fill_k: int = 8
    aoi: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.fill_radius < 0 or self.fill_k < 1:
            raise ValueError("fill_radius must be >= 0 and fill_k >= 1")


@dataclass
class OrthoConfig:
    cell_size: float
    occlusion_tolerance: float = 1.0
    ranking: str = "min_view_angle"

    def __post_init__(self):
        if not (self.cell_size > 0 and self.occlusion_tolerance > 0):
            raise ValueError("cell_size and occlusion_tolerance must be > 0")
        if self.ranking not in VIEW_RANKINGS:
            raise ValueError(f"ranking must be one of {VIEW_RANKINGS}")


class OrthoView(NamedTuple):
    image_id: int
    pose: CameraPose
    intrinsics: CameraIntrinsics
    color: ColorImage
    depth: DepthMap


def mean_gsd(views) -> float:
    """Mean ground sampling distance over ``(intrinsics, typical_depth)`` pairs."""
    gsds = [depth / (0.5 * (k.fx + k.fy)) for k, depth in views if depth > 0]
    if not gsds:
        raise ValueError("no views with a positive typical depth")
    return float(np.mean(gsds))


def default_cell_size(views) -> float:
    """Two ground sampling distances, rounded to 3 significant digits."""
    return float(f"{2.0 * mean_gsd(views):.3g}")


def dataset_cell_size(manifest, tie_points) -> float:
    """Default DSM cell size from the median tie-point depth of each image."""
    from .geometry import tie_point_depth

    views = []
    for entry in manifest.images:
        xyz, _ = tie_points.observations_for(entry.id)
        z = tie_point_depth(entry.pose, xyz)
        z = z[z > 0]
        if len(z):
            views.append((manifest.intrinsics(entry), float(np.median(z))))
    return default_cell_size(views)


def _grid_for(cloud: PointCloud, cfg: DsmConfig) -> RasterGrid:
    if cfg.aoi is not None:
        return RasterGrid.covering(*cfg.aoi, cfg.cell_size)
    if len(cloud) == 0:
        raise EmptyExtent("cannot derive a DSM extent from an empty cloud without an AOI")
    lo = cloud.xyz[:, :2].min(axis=0)
    hi = cloud.xyz[:, :2].max(axis=0)
    x0 = np.floor(lo[0] / cfg.cell_size) * cfg.cell_size
    y0 = np.floor(lo[1] / cfg.cell_size) * cfg.cell_size
    ncols = int(np.floor((hi[0] - x0) / cfg.cell_size)) + 1
    nrows = int(np.floor((hi[1] - y0) / cfg.cell_size)) + 1
    return RasterGrid.empty(float(x0), float(y0), cfg.cell_size, ncols, nrows)


def rasterize_dsm(cloud: PointCloud, cfg: DsmConfig, grid: RasterGrid | None = None) -> RasterGrid:
    """Bin point heights into cells and aggregate; empty cells are nodata.

    The grid comes from ``grid`` (geometry only), else ``cfg.aoi``, else the
    cloud's bounding box snapped to multiples of the cell size.
    """
    grid = _grid_for(cloud, cfg) if grid is None else grid.with_values(np.full(grid.values.shape, np.nan))
    out = np.full(grid.ncols * grid.nrows, np.nan)
    if len(cloud):
        col, row = grid.cell_index(cloud.xyz[:, 0], cloud.xyz[:, 1])
        inside = (col >= 0) & (col < grid.ncols) & (row >= 0) & (row < grid.nrows)
        flat = (row * grid.ncols + col)[inside]
        z = cloud.xyz[inside, 2]
        if len(z):
            # sort by (cell, z) so every aggregator is order independent
            order = np.lexsort((z, flat))
            flat, z = flat[order], z[order]
            cells, start, counts = np.unique(flat, return_index=True, return_counts=True)
            if cfg.aggregator == "max":
                vals = z[start + counts - 1]
            elif cfg.aggregator == "mean":
                vals = np.add.reduceat(z, start) / counts
            else:
                lo = z[start + (counts - 1) // 2]
                hi = z[start + counts // 2]
                vals = 0.5 * (lo + hi)
            out[cells] = vals
    return grid.with_values(out.reshape(grid.nrows, grid.ncols))


def fill_holes(grid: RasterGrid, cfg: DsmConfig) -> RasterGrid:
    """Inverse-distance (power 2) fill of nodata cells.

    Each hole takes the ``fill_k`` nearest valid cells (Euclidean distance in
    cells) among those within ``fill_radius`` cells in Chebyshev distance;
    holes with none stay nodata. Valid cells are never modified.
    """
    valid = grid.valid
    if valid.all() or not valid.any() or cfg.fill_radius == 0:
        return grid.with_values(grid.values.copy())
    r = cfg.fill_radius
    vr, vc = np.nonzero(valid)
    hr, hc = np.nonzero(~valid)
    tree = cKDTree(np.column_stack([vr, vc]).astype(np.float64))
    window = (2 * r + 1) ** 2
    k = min(window, len(vr))
    dist, idx = tree.query(np.column_stack([hr, hc]).astype(np.float64), k=k,
                           distance_upper_bound=r * np.sqrt(2.0) + 1e-9)
    dist = dist.reshape(len(hr), k)
    idx = idx.reshape(len(hr), k)
    found = idx < len(vr)
    safe = np.where(found, idx, 0)
    cheb = np.maximum(np.abs(vr[safe] - hr[:, None]), np.abs(vc[safe] - hc[:, None]))
    usable = found & (cheb <= r)
    # neighbors come sorted by distance; keep the first fill_k usable ones
    rank = np.cumsum(usable, axis=1)
    usable &= rank <= cfg.fill_k
    weights = np.where(usable, 1.0 / np.where(usable, dist, 1.0) ** 2, 0.0)
    values = grid.values[vr[safe], vc[safe]]
    wsum = weights.sum(axis=1)
    filled = np.where(wsum > 0, (weights * np.where(usable, values, 0.0)).sum(axis=1)
                      / np.where(wsum > 0, wsum, 1.0), np.nan)
    out = grid.values.copy()
    out[hr, hc] = filled
    return grid.with_values(out)


def _cell_points(dsm: RasterGrid, fallback_z: float | None = None):
    x, y = dsm.cell_centers()
    z = dsm.values
    if fallback_z is not None:
        z = np.where(np.isnan(z), fallback_z, z)
    return np.stack([x, y, z], axis=-1)


def _view_geometry(points, pose: CameraPose, k: CameraIntrinsics):
    cam = world_to_camera(pose, points)
    uv, front = project_points(k, cam)
    inb = front & k.in_bounds(np.nan_to_num(uv, nan=-1.0))
    return cam, uv, inb


def orthorectify(dsm: RasterGrid, views, cfg: OrthoConfig):
    """Z-buffer true ortho: texture each DSM cell from its best visible view.

    For each cell the candidates are ranked by ``cfg.ranking`` (ties broken by
    image id). The first candidate whose projection is in bounds and whose
    depth map agrees with the cell's camera depth within
    ``cfg.occlusion_tolerance`` supplies the bilinear color.

    ``views`` is a sequence of :class:`OrthoView`. The ortho grid is the DSM
    grid. Returns ``((red, green, blue), view_index)`` grids; unresolved cells
    are nodata.
    """
    views = sorted(views, key=lambda v: v.image_id)
    points = _cell_points(dsm)
    has_z = dsm.valid
    shape = dsm.values.shape
    best_key = np.full(shape, np.inf)
    best_view = np.full(shape, -1, np.int64)
    best_rgb = np.zeros(shape + (3,))
    for index, view in enumerate(views):
        cam, uv, inb = _view_geometry(points, view.pose, view.intrinsics)
        inb &= has_z
        depth, ok = bilinear_lookup(view.depth.values, view.depth.valid, np.where(inb[..., None], uv, -1.0))
        visible = inb & ok & (np.abs(depth - cam[..., 2]) <= cfg.occlusion_tolerance)
        if cfg.ranking == "min_view_angle":
            ray = cam / np.linalg.norm(cam, axis=-1, keepdims=True)
            key = np.arccos(np.clip(ray[..., 2], -1.0, 1.0))
        else:
            key = np.hypot(uv[..., 0] - view.intrinsics.cx, uv[..., 1] - view.intrinsics.cy)
        better = visible & (key < best_key)
        if not better.any():
            continue
        rgb, rgb_ok = bilinear_lookup(view.color.rgb, None, np.where(better[..., None], uv, -1.0))
        better &= rgb_ok
        best_key = np.where(better, key, best_key)
        best_view = np.where(better, view.image_id, best_view)
        best_rgb = np.where(better[..., None], rgb, best_rgb)
    resolved = best_view >= 0
    channels = tuple(
        dsm.with_values(np.where(resolved, np.clip(np.rint(best_rgb[..., c]), 0, 255), np.nan))
        for c in range(3)
    )
    view_index = dsm.with_values(np.where(resolved, best_view.astype(np.float64), np.nan))
    return channels, view_index


def ortho_rgba(channels) -> np.ndarray:
    """Stack ortho channel grids into an RGBA uint8 array (alpha 0 at nodata)."""
    stack = np.stack([c.values for c in channels], axis=-1)
    alpha = np.where(np.isnan(stack[..., 0]), 0, 255)
    rgb = np.nan_to_num(stack, nan=0.0)
    return np.concatenate([rgb, alpha[..., None]], axis=-1).astype(np.uint8)


def coverage_count(views, dsm: RasterGrid) -> np.ndarray:
    """Number of image footprints containing each cell (occlusion ignored).

    ``views`` yields ``(pose, intrinsics)``. Cells without a DSM value are
    evaluated at the median valid DSM elevation.
    """
    fallback = float(np.nanmedian(dsm.values)) if dsm.valid.any() else 0.0
    points = _cell_points(dsm, fallback)
    count = np.zeros(dsm.values.shape, np.int64)
    for pose, k in views:
        _, _, inb = _view_geometry(points, pose, k)
        count += inb
    return count


def coverage_mask(views, dsm: RasterGrid, min_views: int = 1) -> RasterGrid:
    """1 where at least ``min_views`` footprints contain the cell, else 0."""
    if min_views < 1:
        raise ValueError("min_views must be >= 1")
    return dsm.with_values((coverage_count(views, dsm) >= min_views).astype(np.float64))


def stereo_baseline(dsm: RasterGrid, views, min_views: int = 2) -> RasterGrid:
    """DSM restricted to cells a multi-view method could reconstruct."""
    mask = coverage_mask(views, dsm, min_views).values > 0
    return dsm.with_values(np.where(mask, dsm.values, np.nan))
