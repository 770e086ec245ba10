"""8-bit PNG/PPM color images and ortho world-file sidecars."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import MissingFile, UnsupportedImageFormat
from ..rasters import ColorImage, RasterGrid


def read_color_image(path) -> ColorImage:
    if not Path(path).is_file():
        raise MissingFile(f"image {path} does not exist")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise UnsupportedImageFormat(f"{path}: format {im.format} is not PNG/PPM")
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise UnsupportedImageFormat(f"{path}: mode {im.mode} is not 8-bit")
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, UnsupportedImageFormat):
            raise
        raise UnsupportedImageFormat(f"{path}: {exc}") from None
    return ColorImage(rgb.copy())


def write_png(rgb: np.ndarray, path) -> None:
    """Write an ``(H, W, 3)`` RGB or ``(H, W, 4)`` RGBA uint8 array."""
    mode = {3: "RGB", 4: "RGBA"}[rgb.shape[2]]
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode).save(path, format="PNG")


def write_world_file(grid: RasterGrid, path) -> None:
    """World-file sidecar: pixel sizes, rotations, then the center of the
    upper-left pixel."""
    x_ul = grid.origin_x + 0.5 * grid.cell_size
    y_ul = grid.origin_y + (grid.nrows - 0.5) * grid.cell_size
    lines = [grid.cell_size, 0.0, 0.0, -grid.cell_size, x_ul, y_ul]
    Path(path).write_text("".join(f"{v!r}\n" for v in lines), encoding="ascii")
