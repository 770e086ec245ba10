"""ESRI ASCII grid reader/writer."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import MalformedHeader, TruncatedData
from ..rasters import RasterGrid

_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def encode_asc_grid(grid: RasterGrid) -> str:
    lines = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {grid.origin_x!r}",
        f"yllcorner {grid.origin_y!r}",
        f"cellsize {grid.cell_size!r}",
        f"NODATA_value {_fmt(grid.nodata)}",
    ]
    nodata = _fmt(grid.nodata)
    for row in grid.values:
        lines.append(" ".join(nodata if np.isnan(v) else _fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_asc_grid(grid: RasterGrid, path) -> None:
    """Write with 6 significant digits; row 0 is the northernmost row."""
    if not np.isnan(grid.nodata) and np.any(grid.values == grid.nodata):
        raise ValueError("grid holds a valid value equal to the nodata sentinel")
    Path(path).write_text(encode_asc_grid(grid), encoding="ascii")


def parse_asc_grid(text: str) -> RasterGrid:
    tokens = text.split()
    header = {}
    pos = 0
    while pos + 1 < len(tokens) and tokens[pos].lower() in _KEYS:
        key = tokens[pos].lower()
        if key in header:
            raise MalformedHeader(f"duplicate header key {tokens[pos]!r}")
        header[key] = tokens[pos + 1]
        pos += 2
    missing = [k for k in _KEYS[:5] if k not in header]
    if missing:
        raise MalformedHeader(f"ASCII grid header missing {', '.join(missing)}")
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        xll = float(header["xllcorner"])
        yll = float(header["yllcorner"])
        cell = float(header["cellsize"])
        nodata = float(header.get("nodata_value", "-9999"))
    except ValueError as exc:
        raise MalformedHeader(f"bad header value: {exc}") from None
    if ncols < 1 or nrows < 1 or not (cell > 0) or not np.isfinite([xll, yll, cell]).all():
        raise MalformedHeader("invalid grid geometry in header")
    body = tokens[pos:]
    if len(body) < ncols * nrows:
        raise TruncatedData(f"expected {ncols * nrows} values, found {len(body)}")
    if len(body) > ncols * nrows:
        raise MalformedHeader(f"unexpected token {body[ncols * nrows]!r} after grid values")
    try:
        values = np.array([float(t) for t in body], dtype=np.float64).reshape(nrows, ncols)
    except ValueError as exc:
        raise MalformedHeader(f"bad grid value: {exc}") from None
    if np.any(np.isinf(values)):
        raise MalformedHeader("grid values must be finite")
    values[values == nodata] = np.nan
    return RasterGrid(xll, yll, cell, values, nodata)


def read_asc_grid(path) -> RasterGrid:
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise MalformedHeader("ASCII grid contains non-ASCII bytes") from None
    return parse_asc_grid(text)
