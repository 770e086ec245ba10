"""Depth map to point cloud conversion and direct cloud fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import KindMismatch
from .geometry import CameraIntrinsics, CameraPose, backproject, camera_to_world
from .rasters import ColorImage, DepthMap

DEFAULT_STRIDE = 4


@dataclass(frozen=True, eq=False)
class PointCloud:
    """World points with optional 8-bit colors and the id of the source image
    (-1 when unknown, e.g. after reading a PLY file)."""

    xyz: np.ndarray
    rgb: np.ndarray | None = None
    source: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        n = len(xyz)
        rgb = None if self.rgb is None else np.asarray(self.rgb, dtype=np.uint8).reshape(n, 3)
        source = (np.full(n, -1, np.int64) if self.source is None
                  else np.asarray(self.source, dtype=np.int64).reshape(n))
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "source", source)

    @classmethod
    def empty(cls, with_color: bool = True) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if with_color else None,
                   np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.xyz)


def depth_to_cloud(
    k: CameraIntrinsics,
    pose: CameraPose,
    metric: DepthMap,
    color: ColorImage | None = None,
    stride: int = DEFAULT_STRIDE,
    image_id: int = -1,
) -> PointCloud:
    """Lift every valid pixel on the ``stride`` lattice to a world point.

    The lattice starts at pixel (0, 0). ``metric`` must be in the pixel frame
    of ``k``.
    """
    if metric.kind != "metric":
        raise KindMismatch(f"expected a metric depth map, got {metric.kind!r}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if (metric.width, metric.height) != (k.width, k.height):
        raise ValueError(
            f"depth map {metric.width}x{metric.height} does not match camera {k.width}x{k.height}"
        )
    rows = np.arange(0, metric.height, stride)
    cols = np.arange(0, metric.width, stride)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    sel = metric.valid[vv, uu]
    u = uu[sel]
    v = vv[sel]
    if len(u) == 0:
        return PointCloud.empty(with_color=color is not None)
    depth = metric.values[v, u].astype(np.float64)
    cam = backproject(k, np.stack([u, v], axis=-1).astype(np.float64), depth)
    world = camera_to_world(pose, cam)
    rgb = None
    if color is not None:
        if (color.width, color.height) != (k.width, k.height):
            raise ValueError("color image does not match camera size")
        rgb = color.rgb[v, u]
    return PointCloud(world, rgb, np.full(len(u), image_id, np.int64))


def merge_clouds(clouds) -> PointCloud:
    """Concatenate clouds in order; no deduplication or smoothing.

    Colors are kept only if every input carries them.
    """
    clouds = list(clouds)
    if not clouds:
        return PointCloud.empty()
    if len(clouds) == 1:
        return clouds[0]
    xyz = np.concatenate([c.xyz for c in clouds])
    source = np.concatenate([c.source for c in clouds])
    rgb = None
    if all(c.rgb is not None for c in clouds):
        rgb = np.concatenate([c.rgb for c in clouds])
    return PointCloud(xyz, rgb, source)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output order follows the first occurrence of each voxel. Colors become the
    rounded mean; the source id is that of the first contributing point.
    """
    if not voxel > 0:
        raise ValueError("voxel size must be > 0")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.xyz / voxel).astype(np.int64)
    _, first, inverse, counts = np.unique(
        keys, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    group = rank[inverse]
    n = len(first)
    cnt = counts[order].astype(np.float64)
    xyz = np.zeros((n, 3))
    np.add.at(xyz, group, cloud.xyz)
    xyz /= cnt[:, None]
    rgb = None
    if cloud.rgb is not None:
        acc = np.zeros((n, 3))
        np.add.at(acc, group, cloud.rgb.astype(np.float64))
        rgb = np.clip(np.rint(acc / cnt[:, None]), 0, 255).astype(np.uint8)
    return PointCloud(xyz, rgb, cloud.source[first[order]])
