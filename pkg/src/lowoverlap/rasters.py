"""In-memory rasters: depth maps, color images and georeferenced grids."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import OutOfRange

DEPTH_KINDS = ("metric", "relative", "disparity")


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth (or depth-like) values with a validity mask.

    ``values`` is indexed ``[row, col]`` i.e. ``[v, u]``. Invalid pixels may
    hold any value, including NaN.
    """

    values: np.ndarray
    valid: np.ndarray
    kind: str = "metric"

    def __post_init__(self):
        values = np.array(self.values)
        if values.dtype.kind != "f":
            values = values.astype(np.float64)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2 or valid.shape != values.shape:
            raise ValueError(f"values {values.shape} and mask {valid.shape} must be equal 2-D shapes")
        if self.kind not in DEPTH_KINDS:
            raise ValueError(f"unknown depth kind {self.kind!r}")
        if not np.all(np.isfinite(values[valid])):
            raise ValueError("valid pixels must hold finite values")
        if self.kind == "metric" and np.any(values[valid] <= 0):
            raise ValueError("metric depth must be > 0 at valid pixels")
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, values, kind: str = "metric") -> "DepthMap":
        """Wrap an array, marking non-finite (and, for metric, non-positive) values invalid."""
        values = np.asarray(values)
        valid = np.isfinite(values)
        if kind == "metric":
            valid &= np.where(valid, values, 1.0) > 0
        return cls(values, valid, kind)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def with_kind(self, kind: str) -> "DepthMap":
        return replace(self, kind=kind)

    def filled(self, fill=np.nan) -> np.ndarray:
        """Values as a float64 array with invalid pixels set to ``fill``."""
        return np.where(self.valid, self.values.astype(np.float64), fill)


@dataclass(frozen=True, eq=False)
class ColorImage:
    rgb: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
        object.__setattr__(self, "rgb", rgb)

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """North-up grid; row 0 is the northernmost row, NaN marks nodata.

    ``origin_x``/``origin_y`` is the lower-left corner of the grid in meters.
    ``nodata`` is only the sentinel used when the grid is serialized.
    """

    origin_x: float
    origin_y: float
    cell_size: float
    values: np.ndarray
    nodata: float = -9999.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("grid values must be 2-D")
        if np.any(np.isinf(values)):
            raise ValueError("grid values must be finite or NaN")
        object.__setattr__(self, "values", values)

    @classmethod
    def empty(cls, origin_x, origin_y, cell_size, ncols, nrows, nodata=-9999.0) -> "RasterGrid":
        return cls(origin_x, origin_y, cell_size, np.full((nrows, ncols), np.nan), nodata)

    @classmethod
    def covering(cls, xmin, ymin, xmax, ymax, cell_size) -> "RasterGrid":
        """Empty grid anchored at ``(xmin, ymin)`` covering the rectangle."""
        ncols = max(1, int(np.ceil((xmax - xmin) / cell_size - 1e-9)))
        nrows = max(1, int(np.ceil((ymax - ymin) / cell_size - 1e-9)))
        return cls.empty(xmin, ymin, cell_size, ncols, nrows)

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (
            self.origin_x,
            self.origin_y,
            self.origin_x + self.ncols * self.cell_size,
            self.origin_y + self.nrows * self.cell_size,
        )

    def with_values(self, values) -> "RasterGrid":
        return replace(self, values=np.asarray(values, dtype=np.float64))

    def same_geometry(self, other: "RasterGrid", tol: float = 1e-9) -> bool:
        return (
            self.values.shape == other.values.shape
            and abs(self.origin_x - other.origin_x) <= tol
            and abs(self.origin_y - other.origin_y) <= tol
            and abs(self.cell_size - other.cell_size) <= tol
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World x, y of every cell center, each shaped ``(nrows, ncols)``."""
        cols = np.arange(self.ncols)
        rows = np.arange(self.nrows)
        x = self.origin_x + (cols + 0.5) * self.cell_size
        y = self.origin_y + (self.nrows - rows - 0.5) * self.cell_size
        return np.meshgrid(x, y)

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Integer ``(col, row)`` of the cells containing world ``(x, y)``;
        may lie outside the grid."""
        col = np.floor((np.asarray(x) - self.origin_x) / self.cell_size).astype(np.int64)
        row_from_bottom = np.floor((np.asarray(y) - self.origin_y) / self.cell_size).astype(np.int64)
        return col, self.nrows - 1 - row_from_bottom


def grid_cell_center(grid: RasterGrid, col: int, row: int) -> tuple[float, float]:
    if not (0 <= col < grid.ncols and 0 <= row < grid.nrows):
        raise OutOfRange(f"cell ({col}, {row}) outside {grid.ncols}x{grid.nrows} grid")
    x = grid.origin_x + (col + 0.5) * grid.cell_size
    y = grid.origin_y + (grid.nrows - row - 0.5) * grid.cell_size
    return x, y


def bilinear_lookup(values: np.ndarray, valid: np.ndarray | None, uv) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear sampling at continuous pixel coordinates.

    ``values`` is ``(H, W)`` or ``(H, W, C)``; ``uv`` is ``(..., 2)``. Returns
    ``(samples, ok)``. A sample is ok only if it lies in ``[0, W-1] x [0, H-1]``
    and every neighbor with a nonzero weight is valid.
    """
    uv = np.asarray(uv, dtype=np.float64)
    h, w = values.shape[:2]
    u = uv[..., 0]
    v = uv[..., 1]
    ok = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    us = np.where(ok, u, 0.0)
    vs = np.where(ok, v, 0.0)
    i0 = np.clip(np.floor(us).astype(np.int64), 0, max(w - 2, 0))
    j0 = np.clip(np.floor(vs).astype(np.int64), 0, max(h - 2, 0))
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    fu = us - i0
    fv = vs - j0
    corners = ((j0, i0, (1 - fu) * (1 - fv)), (j0, i1, fu * (1 - fv)),
               (j1, i0, (1 - fu) * fv), (j1, i1, fu * fv))
    extra = values.shape[2:]
    acc = np.zeros(u.shape + extra)
    for j, i, wgt in corners:
        used = wgt > 0
        if valid is not None:
            ok &= ~used | valid[j, i]
        sample = values[j, i].astype(np.float64)
        wexp = wgt.reshape(wgt.shape + (1,) * len(extra))
        acc += np.where(wexp > 0, wexp * np.where(np.isfinite(sample), sample, 0.0), 0.0)
    if extra:
        acc = np.where(ok.reshape(ok.shape + (1,) * len(extra)), acc, np.nan)
    else:
        acc = np.where(ok, acc, np.nan)
    return acc, ok


def sample_bilinear(depth: DepthMap, px) -> float | None:
    """Bilinear value at one pixel coordinate, or ``None`` when invalid."""
    val, ok = bilinear_lookup(depth.values, depth.valid, np.asarray(px, dtype=float))
    return float(val) if bool(ok) else None


def _axis_weights(n_old: int, n_new: int):
    if n_new == 1 or n_old == 1:
        pos = np.full(n_new, (n_old - 1) / 2.0)
    else:
        pos = np.arange(n_new) * ((n_old - 1) / (n_new - 1))
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, max(n_old - 2, 0))
    i1 = np.minimum(i0 + 1, n_old - 1)
    frac = pos - i0
    return i0, i1, frac


def resample(depth: DepthMap, new_w: int, new_h: int) -> DepthMap:
    """Bilinear rescale with corner pixel centers aligned.

    A destination pixel is valid only if all source pixels with a nonzero
    weight are valid. Identical dimensions return an identical map.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError("new dimensions must be >= 1")
    if (new_w, new_h) == (depth.width, depth.height):
        return DepthMap(depth.values.copy(), depth.valid.copy(), depth.kind)
    i0, i1, fu = _axis_weights(depth.width, new_w)
    j0, j1, fv = _axis_weights(depth.height, new_h)
    vals = depth.filled(0.0)
    valid = depth.valid
    out = np.zeros((new_h, new_w))
    ok = np.ones((new_h, new_w), dtype=bool)
    for jj, wy in ((j0, 1 - fv), (j1, fv)):
        for ii, wx in ((i0, 1 - fu), (i1, fu)):
            wgt = np.outer(wy, wx)
            out += wgt * vals[np.ix_(jj, ii)]
            ok &= (wgt == 0) | valid[np.ix_(jj, ii)]
    out = np.where(ok, out, np.nan).astype(depth.values.dtype)
    if depth.kind == "metric":
        ok &= np.where(ok, out, 1.0) > 0
    return DepthMap(out, ok, depth.kind)
