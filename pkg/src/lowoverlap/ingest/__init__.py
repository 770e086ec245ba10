"""File formats: manifest, SfM text triad, PFM depth, PLY clouds, ASCII grids, images."""
from .ascgrid import read_asc_grid, write_asc_grid
from .images import read_color_image, write_png, write_world_file
from .manifest import DatasetManifest, load_manifest, manifest_from_dict, manifest_to_dict
from .pfm import read_depth_pfm, write_depth_pfm
from .ply import read_ply, write_ply
from .sfm import (
    ImageEntry,
    TiePointTable,
    parse_sparse_model,
    reprojection_violations,
    write_sparse_model,
)

__all__ = [
    "DatasetManifest",
    "ImageEntry",
    "TiePointTable",
    "load_manifest",
    "manifest_from_dict",
    "manifest_to_dict",
    "parse_sparse_model",
    "read_asc_grid",
    "read_color_image",
    "read_depth_pfm",
    "read_ply",
    "reprojection_violations",
    "write_asc_grid",
    "write_depth_pfm",
    "write_png",
    "write_ply",
    "write_sparse_model",
    "write_world_file",
]
