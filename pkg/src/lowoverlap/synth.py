"""Synthetic 2.5D scenes, flight plans, exact depth maps, tie points and
degraded "monocular" depth.

Scenes are a tilted base plane plus Gaussian bumps plus axis-aligned box
buildings. Depth and color are produced by marching each pixel ray with a
0.25 m step and refining the first surface crossing by bisection, which
keeps the renderer independent of the closed-form plane/box intersections
used to test it.
"""
from __future__ import annotations

import math
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numba
import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InfeasibleOverlap, OutOfExtent, PoleInRange
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    nadir_rotation,
    pixel_rays,
    project_points,
    world_to_camera,
)
from .ingest.sfm import TiePointTable
from .rasters import ColorImage, DepthMap, RasterGrid

logger = logging.getLogger(__name__)

MARCH_STEP = 0.25
BISECTIONS = 20
OCCLUSION_TOL = 0.1


@dataclass(frozen=True)
class Bump:
    cx: float
    cy: float
    sigma: float
    amplitude: float


@dataclass(frozen=True)
class Building:
    """Axis-aligned box; its roof sits ``height`` above the terrain at the
    footprint center."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    height: float


@dataclass(frozen=True, eq=False)
class SceneSpec:
    extent: tuple[float, float, float, float]
    base: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bumps: tuple[Bump, ...] = ()
    buildings: tuple[Building, ...] = ()
    seed: int = 0

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.extent
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"bad extent {self.extent}")
        object.__setattr__(self, "bumps", tuple(self.bumps))
        object.__setattr__(self, "buildings", tuple(self.buildings))
        for b in self.bumps:
            if not (b.sigma > 0 and np.isfinite([b.cx, b.cy, b.amplitude]).all()):
                raise ValueError(f"bad bump {b}")
        for b in self.buildings:
            if not (xmin <= b.xmin < b.xmax <= xmax and ymin <= b.ymin < b.ymax <= ymax):
                raise ValueError(f"building {b} outside extent or empty")
            if not np.isfinite(b.height):
                raise ValueError("building height must be finite")
        tops = np.array([
            self.terrain((b.xmin + b.xmax) / 2, (b.ymin + b.ymax) / 2) + b.height
            for b in self.buildings
        ], dtype=np.float64)
        object.__setattr__(self, "_tops", tops)

    @property
    def building_tops(self) -> np.ndarray:
        return self._tops

    def terrain(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z0, sx, sy = self.base
        z = z0 + sx * x + sy * y
        for b in self.bumps:
            z = z + b.amplitude * np.exp(-((x - b.cx) ** 2 + (y - b.cy) ** 2) / (2 * b.sigma**2))
        return z

    def contains(self, x, y):
        xmin, ymin, xmax, ymax = self.extent
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def surface(self, x, y):
        """Elevation without the extent check."""
        z = self.terrain(x, y)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        for b, top in zip(self.buildings, self._tops):
            inside = (x >= b.xmin) & (x <= b.xmax) & (y >= b.ymin) & (y <= b.ymax)
            z = np.where(inside, np.maximum(z, top), z)
        return z

    def elevation_bounds(self) -> tuple[float, float]:
        """Conservative (min, max) of the surface over the extent."""
        xmin, ymin, xmax, ymax = self.extent
        z0, sx, sy = self.base
        corners = [z0 + sx * x + sy * y for x in (xmin, xmax) for y in (ymin, ymax)]
        lo = min(corners) + sum(min(b.amplitude, 0.0) for b in self.bumps)
        hi = max(corners) + sum(max(b.amplitude, 0.0) for b in self.bumps)
        if len(self._tops):
            hi = max(hi, float(self._tops.max()))
        return lo, hi

    def mean_terrain(self, n: int = 64) -> float:
        xmin, ymin, xmax, ymax = self.extent
        xs = np.linspace(xmin, xmax, n)
        ys = np.linspace(ymin, ymax, n)
        gx, gy = np.meshgrid(xs, ys)
        return float(np.mean(self.terrain(gx, gy)))

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent),
            "base": list(self.base),
            "bumps": [[b.cx, b.cy, b.sigma, b.amplitude] for b in self.bumps],
            "buildings": [[b.xmin, b.ymin, b.xmax, b.ymax, b.height] for b in self.buildings],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc) -> "SceneSpec":
        return cls(
            extent=tuple(doc["extent"]),
            base=tuple(doc.get("base", (0.0, 0.0, 0.0))),
            bumps=tuple(Bump(*b) for b in doc.get("bumps", ())),
            buildings=tuple(Building(*b) for b in doc.get("buildings", ())),
            seed=int(doc.get("seed", 0)),
        )

    def _packed(self):
        bumps = np.array([[b.cx, b.cy, b.sigma, b.amplitude] for b in self.bumps],
                         dtype=np.float64).reshape(-1, 4)
        boxes = np.array([[b.xmin, b.ymin, b.xmax, b.ymax, t]
                          for b, t in zip(self.buildings, self._tops)],
                         dtype=np.float64).reshape(-1, 5)
        return (np.array(self.extent, dtype=np.float64), np.array(self.base, dtype=np.float64),
                bumps, boxes)


def elevation(scene: SceneSpec, x, y):
    """Surface elevation: terrain, raised to the roof inside building footprints.

    Raises:
        OutOfExtent: if any ``(x, y)`` lies outside the scene extent.
    """
    if not np.all(scene.contains(x, y)):
        raise OutOfExtent(f"({x}, {y}) outside scene extent {scene.extent}")
    z = scene.surface(x, y)
    return float(z) if np.ndim(z) == 0 else z


def random_scene(
    seed: int,
    extent=(0.0, 0.0, 400.0, 400.0),
    n_bumps: int = 4,
    n_buildings: int = 8,
    amplitude=(-15.0, 30.0),
    sigma=(40.0, 120.0),
    building_size=(10.0, 40.0),
    building_height=(8.0, 25.0),
    slope: float = 0.02,
) -> SceneSpec:
    """Seeded random terrain with bumps and non-overlapping buildings."""
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = extent
    base = (0.0, float(rng.uniform(-slope, slope)), float(rng.uniform(-slope, slope)))
    bumps = tuple(
        Bump(float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)),
             float(rng.uniform(*sigma)), float(rng.uniform(*amplitude)))
        for _ in range(n_bumps)
    )
    buildings = []
    for _ in range(50 * max(n_buildings, 1)):
        if len(buildings) >= n_buildings:
            break
        w, h = rng.uniform(*building_size, size=2)
        x0 = rng.uniform(xmin + 5, xmax - 5 - w)
        y0 = rng.uniform(ymin + 5, ymax - 5 - h)
        cand = Building(float(x0), float(y0), float(x0 + w), float(y0 + h),
                        float(rng.uniform(*building_height)))
        # keep a street between buildings
        if all(cand.xmin > b.xmax + 4 or cand.xmax < b.xmin - 4 or
               cand.ymin > b.ymax + 4 or cand.ymax < b.ymin - 4 for b in buildings):
            buildings.append(cand)
    return SceneSpec(tuple(extent), base, bumps, tuple(buildings), seed)


@numba.njit(cache=True, nogil=True)
def _surface(x, y, base, bumps, boxes):
    z = base[0] + base[1] * x + base[2] * y
    for k in range(bumps.shape[0]):
        dx = x - bumps[k, 0]
        dy = y - bumps[k, 1]
        s = bumps[k, 2]
        z += bumps[k, 3] * math.exp(-(dx * dx + dy * dy) / (2.0 * s * s))
    for k in range(boxes.shape[0]):
        if boxes[k, 0] <= x <= boxes[k, 2] and boxes[k, 1] <= y <= boxes[k, 3]:
            if boxes[k, 4] > z:
                z = boxes[k, 4]
    return z


@numba.njit(cache=True, nogil=True)
def _box_entry(ox, oy, oz, dx, dy, dz, boxes):
    """Smallest ray parameter entering any box volume (footprint x below roof)."""
    best = np.inf
    for k in range(boxes.shape[0]):
        near = (boxes[k, 4] - oz) / dz
        far = np.inf
        ok = True
        for lo, hi, o, d in ((boxes[k, 0], boxes[k, 2], ox, dx), (boxes[k, 1], boxes[k, 3], oy, dy)):
            if d == 0.0:
                if o < lo or o > hi:
                    ok = False
                continue
            t1 = (lo - o) / d
            t2 = (hi - o) / d
            near = max(near, min(t1, t2))
            far = min(far, max(t1, t2))
        if ok and near <= far and near >= 0.0 and near < best:
            best = near
    return best


@numba.njit(cache=True, nogil=True)
def _march(origin, dirs, extent, base, bumps, boxes, zmax, zmin, step, n_bisect):
    """Terrain is ray marched and bisected; boxes are intersected exactly, so
    rays grazing a roof edge for less than one step are not missed."""
    n = dirs.shape[0]
    out = np.full(n, np.nan)
    no_boxes = boxes[:0]
    ox, oy, oz = origin[0], origin[1], origin[2]
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        if not dz < 0.0:
            continue
        s_box = _box_entry(ox, oy, oz, dx, dy, dz, boxes)
        s = (oz - zmax) / (-dz)
        if s < 0.0:
            s = 0.0
        ds = step / math.sqrt(dx * dx + dy * dy + dz * dz)
        prev = s
        hit = False
        while True:
            if s >= s_box:
                # final probe at the box entry catches terrain crossed in the last partial step
                s = s_box
            x = ox + s * dx
            y = oy + s * dy
            z = oz + s * dz
            if x < extent[0] or x > extent[2] or y < extent[1] or y > extent[3] or z < zmin:
                break
            if z - _surface(x, y, base, bumps, no_boxes) <= 0.0:
                hit = True
                break
            if s == s_box:
                break
            prev = s
            s += ds
        if not hit:
            if s_box < np.inf:
                out[i] = s_box
            continue
        lo = prev
        hi = s
        if hi > lo:
            for _ in range(n_bisect):
                mid = 0.5 * (lo + hi)
                x = ox + mid * dx
                y = oy + mid * dy
                z = oz + mid * dz
                if z - _surface(x, y, base, bumps, no_boxes) <= 0.0:
                    hi = mid
                else:
                    lo = mid
            out[i] = min(0.5 * (lo + hi), s_box)
        else:
            out[i] = min(hi, s_box)
    return out


def cast_rays(scene: SceneSpec, pose: CameraPose, k: CameraIntrinsics, uv) -> np.ndarray:
    """Ray-marched camera-frame depth at arbitrary pixel coordinates; NaN
    where the ray leaves the scene extent before hitting the surface."""
    uv = np.asarray(uv, dtype=np.float64)
    shape = uv.shape[:-1]
    origin, dirs = pixel_rays(k, pose, uv.reshape(-1, 2))
    extent, base, bumps, boxes = scene._packed()
    lo, hi = scene.elevation_bounds()
    depth = _march(origin, np.ascontiguousarray(dirs), extent, base, bumps, boxes,
                   hi + 1e-6, lo - 1.0, MARCH_STEP, BISECTIONS)
    return depth.reshape(shape)


def _pixel_grid(k: CameraIntrinsics) -> np.ndarray:
    vv, uu = np.meshgrid(np.arange(k.height, dtype=np.float64),
                         np.arange(k.width, dtype=np.float64), indexing="ij")
    return np.stack([uu, vv], axis=-1)


def render_depth(scene: SceneSpec, pose: CameraPose, k: CameraIntrinsics,
                 width: int | None = None, height: int | None = None) -> DepthMap:
    """Ground-truth metric depth map; misses are invalid.

    A ``width``/``height`` different from the camera's renders the same view on
    a corner-aligned coarser or finer pixel lattice.
    """
    if width is not None and height is not None and (width, height) != (k.width, k.height):
        k = k.scaled(width, height)
    depth = cast_rays(scene, pose, k, _pixel_grid(k))
    valid = np.isfinite(depth) & (depth > 0)
    return DepthMap(np.where(valid, depth, np.nan), valid, "metric")


def texture(scene: SceneSpec, x, y, z) -> np.ndarray:
    """Smooth procedural RGB albedo in [0, 255] (float), tinted on roofs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    r = 120 + 60 * np.sin(2 * np.pi * x / 47.0 + 0.3) * np.cos(2 * np.pi * y / 61.0)
    g = 130 + 50 * np.sin(2 * np.pi * (x + y) / 83.0 + 1.1)
    b = 100 + 40 * np.cos(2 * np.pi * (x - 0.5 * y) / 71.0)
    roof = z > scene.terrain(x, y) + 0.5
    r = np.where(roof, r * 0.6 + 90, r)
    b = np.where(roof, b * 0.6 + 20, b)
    return np.clip(np.stack([r, g, b], axis=-1), 0, 255)


def render_image(scene: SceneSpec, pose: CameraPose, k: CameraIntrinsics):
    """Depth map and color image of one view (misses are black)."""
    uv = _pixel_grid(k)
    depth = cast_rays(scene, pose, k, uv)
    valid = np.isfinite(depth) & (depth > 0)
    origin, dirs = pixel_rays(k, pose, uv)
    hit = origin + np.where(valid, depth, 0.0)[..., None] * dirs
    rgb = texture(scene, hit[..., 0], hit[..., 1], hit[..., 2])
    rgb = np.where(valid[..., None], np.rint(rgb), 0).astype(np.uint8)
    return DepthMap(np.where(valid, depth, np.nan), valid, "metric"), ColorImage(rgb)


def footprint(k: CameraIntrinsics, height_above_ground: float) -> tuple[float, float]:
    """Ground size (across, along) of a nadir image: image width maps to
    world x (across track), image height to world y (along track)."""
    return k.width * height_above_ground / k.fx, k.height * height_above_ground / k.fy


def _centers(lo, hi, size, spacing):
    span = hi - lo
    n = 1 if span <= size else int(math.ceil((span - size) / spacing - 1e-9)) + 1
    mid = 0.5 * (lo + hi)
    return mid + (np.arange(n) - (n - 1) / 2.0) * spacing


def plan_flight(
    scene: SceneSpec,
    forward_overlap: float,
    side_overlap: float,
    k: CameraIntrinsics,
    altitude: float,
    region=None,
    jitter_deg: float = 0.0,
    seed: int = 0,
) -> list[CameraPose]:
    """Boustrophedon nadir strips covering ``region`` (default: scene extent).

    Strips run along world y; the pattern is centered on the region. Spacing
    uses the footprint at the mean terrain elevation. Return strips are flown
    with 180 degrees of yaw.

    Raises:
        InfeasibleOverlap: if an overlap is outside (0, 1).
    """
    for name, ov in (("forward", forward_overlap), ("side", side_overlap)):
        if not 0 < ov < 1:
            raise InfeasibleOverlap(f"{name} overlap {ov} must be in (0, 1)")
    _, zmax = scene.elevation_bounds()
    if not altitude > zmax:
        raise ValueError(f"altitude {altitude} is not above the highest surface {zmax:.2f}")
    xmin, ymin, xmax, ymax = scene.extent if region is None else region
    across, along = footprint(k, altitude - scene.mean_terrain())
    xs = _centers(xmin, xmax, across, across * (1 - side_overlap))
    ys = _centers(ymin, ymax, along, along * (1 - forward_overlap))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x666C]))
    poses = []
    for strip, x in enumerate(xs):
        forward = strip % 2 == 0
        for y in (ys if forward else ys[::-1]):
            rot = nadir_rotation(0.0 if forward else 180.0)
            if jitter_deg > 0:
                jitter = Rotation.from_euler("xyz", rng.normal(0.0, jitter_deg, 3), degrees=True)
                rot = jitter.as_matrix() @ rot
            poses.append(CameraPose.from_center(rot, [x, y, altitude]))
    return poses


def make_tiepoints(
    scene: SceneSpec,
    poses,
    k,
    n_points: int,
    pixel_noise_sigma: float = 0.0,
    seed: int = 0,
    region=None,
    image_ids=None,
) -> TiePointTable:
    """Sample surface points and keep their visible observations.

    An observation is kept when the point projects in bounds and the
    ray-marched depth at that pixel matches the point's depth within 0.1 m.
    Pixel noise is added afterwards from a per-image seeded stream. Points
    seen by fewer than two images are dropped.

    ``k`` is one :class:`CameraIntrinsics` or one per pose.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    ks = list(k) if isinstance(k, (list, tuple)) else [k] * len(poses)
    image_ids = list(range(1, len(poses) + 1)) if image_ids is None else list(image_ids)
    xmin, ymin, xmax, ymax = scene.extent if region is None else region
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E]))
    xs = rng.uniform(xmin, xmax, n_points)
    ys = rng.uniform(ymin, ymax, n_points)
    xyz = np.column_stack([xs, ys, scene.surface(xs, ys)])

    obs_point, obs_image, obs_uv = [], [], []
    for image_id, pose, ki in zip(image_ids, poses, ks):
        cam = world_to_camera(pose, xyz)
        uv, front = project_points(ki, cam)
        cand = np.flatnonzero(front & ki.in_bounds(np.nan_to_num(uv, nan=-1.0)))
        if len(cand) == 0:
            continue
        oracle = cast_rays(scene, pose, ki, uv[cand])
        visible = cand[np.abs(oracle - cam[cand, 2]) <= OCCLUSION_TOL]
        noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7F, int(image_id)]))
        noisy = uv[visible] + noise_rng.normal(0.0, pixel_noise_sigma, (len(visible), 2)) \
            if pixel_noise_sigma > 0 else uv[visible]
        obs_point.append(visible)
        obs_image.append(np.full(len(visible), image_id, np.int64))
        obs_uv.append(noisy)

    if not obs_point:
        return TiePointTable()
    obs_point = np.concatenate(obs_point)
    obs_image = np.concatenate(obs_image)
    obs_uv = np.concatenate(obs_uv)
    counts = np.bincount(obs_point, minlength=n_points)
    keep_points = np.flatnonzero(counts >= 2)
    remap = np.full(n_points, -1, np.int64)
    remap[keep_points] = np.arange(len(keep_points))
    sel = remap[obs_point] >= 0
    order = np.lexsort((obs_image[sel], remap[obs_point[sel]]))
    rgb = np.rint(texture(scene, *xyz[keep_points].T)).astype(np.uint8).reshape(-1, 3)
    return TiePointTable(
        point_ids=np.arange(1, len(keep_points) + 1, dtype=np.int64),
        xyz=xyz[keep_points],
        obs_point=remap[obs_point[sel]][order],
        obs_image=obs_image[sel][order],
        obs_uv=obs_uv[sel][order],
        rgb=rgb,
    )


@dataclass(frozen=True)
class MonoDegradeSpec:
    """Hidden warp from metric depth to monocular values.

    ``family="rational"``: ``m = (alpha*z + beta) / (gamma*z + delta)``.
    ``family="power"``: ``m = scale * z**exponent + offset`` (outside the
    rational family, used to measure model mismatch).
    """

    warp: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 1.0)
    kind: str = "relative"
    noise_sigma: float = 0.0
    seed: int = 0
    family: str = "rational"
    scale: float = 1.0
    offset: float = 0.0
    exponent: float = 0.9

    def __post_init__(self):
        if self.family not in ("rational", "power"):
            raise ValueError(f"unknown warp family {self.family!r}")
        if self.kind not in ("relative", "disparity", "metric"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.family == "power":
            return self.scale * z**self.exponent + self.offset
        a, b, c, d = self.warp
        return (a * z + b) / (c * z + d)

    def slope(self, z):
        """dm/dz of the warp."""
        z = np.asarray(z, dtype=np.float64)
        if self.family == "power":
            return self.scale * self.exponent * z ** (self.exponent - 1)
        a, b, c, d = self.warp
        return (a * d - b * c) / (c * z + d) ** 2

    def check_range(self, zmin: float, zmax: float) -> None:
        """Raise :class:`PoleInRange` unless the warp is pole-free and monotone on
        ``[zmin, zmax]``."""
        if self.family == "power":
            if zmin <= 0 or self.scale == 0:
                raise PoleInRange("power warp needs positive depths and nonzero scale")
            return
        a, b, c, d = self.warp
        d_lo, d_hi = c * zmin + d, c * zmax + d
        if d_lo * d_hi <= 0:
            pole = -d / c if c else float("nan")
            raise PoleInRange(
                f"warp pole at z={pole:.6g} lies inside the depth range [{zmin:.6g}, {zmax:.6g}]"
            )
        if abs(a * d - b * c) <= 1e-12 * (abs(a * d) + abs(b * c)):
            raise PoleInRange("warp is constant (alpha*delta - beta*gamma == 0)")

    def with_noise_for_depth_sigma(self, sigma_z: float, z_ref: float) -> "MonoDegradeSpec":
        """Copy whose mono noise propagates to about ``sigma_z`` meters at ``z_ref``."""
        return replace(self, noise_sigma=float(abs(self.slope(z_ref)) * sigma_z))


def degrade_to_mono(gt: DepthMap, spec: MonoDegradeSpec, image_id: int = 0) -> DepthMap:
    """Warp a metric map into monocular values and add seeded Gaussian noise.

    Raises:
        PoleInRange: if the warp has a pole within the map's depth range.
    """
    vals = gt.filled(np.nan)
    if gt.valid.any():
        spec.check_range(float(np.min(vals[gt.valid])), float(np.max(vals[gt.valid])))
    m = np.where(gt.valid, spec(np.where(gt.valid, vals, 1.0)), np.nan)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x4D, int(image_id)]))
        m = m + rng.normal(0.0, spec.noise_sigma, m.shape)
    valid = gt.valid & np.isfinite(m)
    return DepthMap(np.where(valid, m, np.nan), valid, spec.kind)


def ground_truth_dsm(scene: SceneSpec, grid: RasterGrid) -> RasterGrid:
    """Surface elevation sampled at every cell center (nodata outside the extent)."""
    x, y = grid.cell_centers()
    inside = scene.contains(x, y)
    return grid.with_values(np.where(inside, scene.surface(x, y), np.nan))


def _scene_from_config(doc, seed: int) -> SceneSpec:
    if "random" in doc:
        opts = dict(doc["random"])
        return random_scene(int(opts.pop("seed", seed)), extent=tuple(doc["extent"]), **opts)
    return SceneSpec.from_dict({"seed": seed, **doc})


def _camera_from_config(doc) -> CameraIntrinsics:
    w, h = int(doc["width"]), int(doc["height"])
    return CameraIntrinsics(float(doc["fx"]), float(doc.get("fy", doc["fx"])),
                            float(doc.get("cx", (w - 1) / 2.0)), float(doc.get("cy", (h - 1) / 2.0)), w, h)


def _image_warp(base: MonoDegradeSpec, jitter: float, seed: int, image_id: int) -> MonoDegradeSpec:
    if jitter <= 0 or base.family != "rational":
        return base
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57, image_id]))
    factors = 1.0 + jitter * rng.standard_normal(4)
    return replace(base, warp=tuple(float(w * f) for w, f in zip(base.warp, factors)))


def generate_dataset(doc: dict, out_dir) -> Path:
    """Write a complete synthetic dataset and return the manifest path.

    Layout under ``out_dir``: ``manifest.json``, ``scene.json``,
    ``sparse/{cameras,images,points3D}.txt``, ``images/<name>.png``,
    ``mono/<name>.pfm``, ``gt_depth/<name>.pfm`` and ``gt_dsm.asc``.

    Raises:
        PoleInRange: if the hidden warp has a pole within an image's depth range.
        InfeasibleOverlap: for overlaps outside (0, 1).
    """
    from .ingest import write_asc_grid, write_depth_pfm, write_png, write_sparse_model
    from .ingest.manifest import DatasetManifest, manifest_to_dict
    from .ingest.sfm import ImageEntry
    from .products import dataset_cell_size

    out = Path(out_dir)
    seed = int(doc.get("seed", 0))
    scene = _scene_from_config(doc["scene"], seed)
    k = _camera_from_config(doc["camera"])
    flight = doc["flight"]
    aoi = tuple(doc.get("aoi", scene.extent))
    poses = plan_flight(
        scene, float(flight["forward_overlap"]), float(flight["side_overlap"]), k,
        float(flight["altitude"]), region=tuple(flight.get("region", aoi)),
        jitter_deg=float(flight.get("jitter_deg", 0.0)), seed=seed,
    )
    tp = doc.get("tie_points", {})
    mono_doc = dict(doc.get("mono", {}))
    depth_sigma = mono_doc.pop("depth_noise_sigma", None)
    warp_jitter = float(mono_doc.pop("warp_jitter", 0.0))
    if "warp" in mono_doc:
        mono_doc["warp"] = tuple(mono_doc["warp"])
    base_warp = MonoDegradeSpec(seed=seed, **mono_doc)

    for sub in ("sparse", "images", "mono", "gt_depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for image_id, pose in enumerate(poses, start=1):
        name = f"img_{image_id:04d}"
        depth, color = render_image(scene, pose, k)
        warp = _image_warp(base_warp, warp_jitter, seed, image_id)
        if depth_sigma is not None and depth.valid.any():
            warp = warp.with_noise_for_depth_sigma(float(depth_sigma), float(np.median(depth.values[depth.valid])))
        mono = degrade_to_mono(depth, warp, image_id)
        write_png(color.rgb, out / "images" / f"{name}.png")
        write_depth_pfm(mono, out / "mono" / f"{name}.pfm")
        write_depth_pfm(depth, out / "gt_depth" / f"{name}.pfm")
        entries.append(ImageEntry(image_id, name, 1, pose, out / "images" / f"{name}.png"))
        logger.debug("rendered %s (%.1f%% valid)", name, 100 * depth.valid.mean())

    table = make_tiepoints(
        scene, poses, k, int(tp.get("n_points", 1000)), float(tp.get("pixel_noise", 0.0)),
        seed=seed, region=tuple(tp["region"]) if "region" in tp else None,
    )
    write_sparse_model(out / "sparse", {1: k}, entries, table)

    manifest = DatasetManifest(
        cameras={1: k},
        images=entries,
        root=out,
        tie_point_files=(out / "sparse" / "cameras.txt", out / "sparse" / "images.txt",
                         out / "sparse" / "points3D.txt"),
        depth_pattern="mono/{name}.pfm",
        depth_kind=base_warp.kind,
        gt_depth_pattern="gt_depth/{name}.pfm",
        gt_dsm=out / "gt_dsm.asc",
        aoi=aoi,
    )
    cell = float(doc.get("dsm_cell_size") or dataset_cell_size(manifest, table))
    gt_grid = ground_truth_dsm(scene, RasterGrid.covering(*aoi, cell))
    write_asc_grid(gt_grid, out / "gt_dsm.asc")
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2) + "\n")
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest_to_dict(manifest, out), indent=2) + "\n")
    return path
