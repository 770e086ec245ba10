"""SfM sparse-model text triad (cameras / images / points files).

Accepted grammar (``#`` starts a comment line, blank lines are ignored):

``cameras`` file, one camera per line::

    CAMERA_ID MODEL WIDTH HEIGHT PARAMS...

where ``MODEL`` is ``PINHOLE`` (params ``fx fy cx cy``) or
``SIMPLE_PINHOLE`` (params ``f cx cy``). Any model carrying distortion
parameters is rejected.

``images`` file, two lines per image::

    IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME
    X Y POINT3D_ID  X Y POINT3D_ID ...

The quaternion and translation map world to camera
(``x_cam = R(q) x_world + t``). The second line lists 2-D observations;
``POINT3D_ID`` is -1 for untriangulated keypoints. The second line may be
empty.

``points`` file, one 3-D point per line::

    POINT3D_ID X Y Z R G B ERROR IMAGE_ID POINT2D_IDX ...

``POINT2D_IDX`` indexes the observation list of that image.

Pixel coordinates are read in this package's convention (center of the
top-left pixel at 0, 0). Exports that put that center at (0.5, 0.5) are
handled with ``pixel_offset=-0.5``, applied to principal points and
observations alike.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import (
    DanglingReference,
    InvalidPose,
    MalformedLine,
    UnsupportedCameraModel,
)
from ..geometry import CameraIntrinsics, CameraPose, project_points, world_to_camera

logger = logging.getLogger(__name__)

_PARAM_COUNT = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


@dataclass(frozen=True)
class ImageEntry:
    id: int
    name: str
    camera_id: int
    pose: CameraPose
    path: Path | None = None


@dataclass(eq=False)
class TiePointTable:
    """Tie points with flattened observations.

    ``obs_point`` indexes into ``point_ids``/``xyz``; each point has at least
    two observations.
    """

    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    obs_point: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    obs_image: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    obs_uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    rgb: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.point_ids)

    def observations_for(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        """World points and pixel observations seen by one image."""
        sel = self.obs_image == image_id
        return self.xyz[self.obs_point[sel]], self.obs_uv[sel]

    def track(self, index: int) -> list[tuple[int, float, float]]:
        sel = np.flatnonzero(self.obs_point == index)
        return [(int(self.obs_image[i]), *map(float, self.obs_uv[i])) for i in sel]

    def track_lengths(self) -> np.ndarray:
        return np.bincount(self.obs_point, minlength=len(self.point_ids))


def _lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedLine(path, 0, f"not UTF-8 text ({exc.reason})") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        yield lineno, raw


def _content(path):
    for lineno, raw in _lines(path):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line.split()


def _num(path, lineno, token, kind=float):
    try:
        value = kind(token)
    except ValueError:
        raise MalformedLine(path, lineno, f"expected {kind.__name__}, got {token!r}") from None
    if kind is float and not np.isfinite(value):
        raise MalformedLine(path, lineno, f"non-finite value {token!r}")
    return value


def parse_cameras(path, pixel_offset: float = 0.0) -> dict[int, CameraIntrinsics]:
    cameras = {}
    for lineno, tok in _content(path):
        if len(tok) < 4:
            raise MalformedLine(path, lineno, "camera line needs id, model, width, height")
        cam_id = _num(path, lineno, tok[0], int)
        model = tok[1].upper()
        if model not in _PARAM_COUNT:
            raise UnsupportedCameraModel(
                f"{path}:{lineno}: camera model {tok[1]!r} is not supported "
                "(only undistorted PINHOLE / SIMPLE_PINHOLE)"
            )
        width = _num(path, lineno, tok[2], int)
        height = _num(path, lineno, tok[3], int)
        params = [_num(path, lineno, t) for t in tok[4:]]
        if len(params) != _PARAM_COUNT[model]:
            raise MalformedLine(path, lineno, f"{model} expects {_PARAM_COUNT[model]} params")
        if model == "SIMPLE_PINHOLE":
            params = [params[0], params[0], params[1], params[2]]
        fx, fy, cx, cy = params
        if cam_id in cameras:
            raise MalformedLine(path, lineno, f"duplicate camera id {cam_id}")
        try:
            cameras[cam_id] = CameraIntrinsics(
                fx, fy, cx + pixel_offset, cy + pixel_offset, width, height
            )
        except ValueError as exc:
            raise MalformedLine(path, lineno, str(exc)) from None
    return cameras


def parse_images(path, pixel_offset: float = 0.0):
    """Returns ``{image_id: (ImageEntry, uv array, point3d id array)}``."""
    images = {}
    content = list(_lines(path))
    i = 0
    while i < len(content):
        lineno, raw = content[i]
        line = raw.strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 10:
            raise MalformedLine(path, lineno, f"image line needs 10 fields, got {len(tok)}")
        image_id = _num(path, lineno, tok[0], int)
        qvec = [_num(path, lineno, t) for t in tok[1:5]]
        tvec = [_num(path, lineno, t) for t in tok[5:8]]
        cam_id = _num(path, lineno, tok[8], int)
        try:
            pose = CameraPose.from_quaternion(qvec, tvec)
        except InvalidPose as exc:
            raise MalformedLine(path, lineno, str(exc)) from None
        # observation line; may be blank but must exist
        if i < len(content):
            obs_lineno, obs_raw = content[i]
            i += 1
        else:
            obs_lineno, obs_raw = lineno + 1, ""
        obs = obs_raw.split()
        if len(obs) % 3:
            raise MalformedLine(path, obs_lineno, "observations must be (X, Y, POINT3D_ID) triples")
        uv = np.array([[_num(path, obs_lineno, obs[k]), _num(path, obs_lineno, obs[k + 1])]
                       for k in range(0, len(obs), 3)], dtype=np.float64).reshape(-1, 2)
        pids = np.array([_num(path, obs_lineno, obs[k + 2], int) for k in range(0, len(obs), 3)],
                        dtype=np.int64)
        if image_id in images:
            raise MalformedLine(path, lineno, f"duplicate image id {image_id}")
        entry = ImageEntry(image_id, tok[9], cam_id, pose)
        images[image_id] = (entry, uv + pixel_offset, pids)
    return images


def parse_points(path):
    """Returns a list of ``(point_id, xyz, rgb, [(image_id, point2d_idx), ...], lineno)``."""
    points = []
    seen = set()
    for lineno, tok in _content(path):
        if len(tok) < 8 or (len(tok) - 8) % 2:
            raise MalformedLine(path, lineno, "point line needs 8 fields plus (IMAGE_ID, IDX) pairs")
        pid = _num(path, lineno, tok[0], int)
        if pid in seen:
            raise MalformedLine(path, lineno, f"duplicate point id {pid}")
        seen.add(pid)
        xyz = [_num(path, lineno, t) for t in tok[1:4]]
        rgb = [_num(path, lineno, t, int) for t in tok[4:7]]
        if not all(0 <= c <= 255 for c in rgb):
            raise MalformedLine(path, lineno, "color components must be in [0, 255]")
        _num(path, lineno, tok[7])
        track = [(_num(path, lineno, tok[k], int), _num(path, lineno, tok[k + 1], int))
                 for k in range(8, len(tok), 2)]
        points.append((pid, xyz, rgb, track, lineno))
    return points


def parse_sparse_model(cameras_file, images_file, points_file, pixel_offset: float = 0.0):
    """Parse the text triad into a manifest skeleton and a tie-point table.

    Returns:
        ``(manifest, tie_points)`` where ``manifest`` has cameras and images
        but no depth or ground-truth configuration.

    Raises:
        MalformedLine, UnsupportedCameraModel, DanglingReference
    """
    from .manifest import DatasetManifest

    cameras = parse_cameras(cameras_file, pixel_offset)
    images = parse_images(images_file, pixel_offset)
    for entry, _, _ in images.values():
        if entry.camera_id not in cameras:
            raise DanglingReference(f"image {entry.id} references unknown camera {entry.camera_id}")
    points = parse_points(points_file)

    ids, xyzs, rgbs, obs_point, obs_image, obs_uv = [], [], [], [], [], []
    for pid, xyz, rgb, track, lineno in points:
        pairs = []
        for image_id, idx in track:
            if image_id not in images:
                raise DanglingReference(f"{points_file}:{lineno}: unknown image id {image_id}")
            uv = images[image_id][1]
            if not 0 <= idx < len(uv):
                raise DanglingReference(
                    f"{points_file}:{lineno}: observation index {idx} out of range for image {image_id}"
                )
            pairs.append((image_id, uv[idx]))
        if len({im for im, _ in pairs}) < 2:
            logger.warning("dropping point %d: track spans fewer than 2 images", pid)
            continue
        index = len(ids)
        ids.append(pid)
        xyzs.append(xyz)
        rgbs.append(rgb)
        for image_id, uv in pairs:
            obs_point.append(index)
            obs_image.append(image_id)
            obs_uv.append(uv)

    table = TiePointTable(
        np.array(ids, dtype=np.int64),
        np.array(xyzs, dtype=np.float64).reshape(-1, 3),
        np.array(obs_point, dtype=np.int64),
        np.array(obs_image, dtype=np.int64),
        np.array(obs_uv, dtype=np.float64).reshape(-1, 2),
        np.array(rgbs, dtype=np.uint8).reshape(-1, 3),
    )
    manifest = DatasetManifest(
        cameras=cameras,
        images=[entry for entry, _, _ in sorted(images.values(), key=lambda e: e[0].id)],
    )
    return manifest, table


def write_sparse_model(directory, cameras, images, tie_points: TiePointTable) -> None:
    """Write the triad ``cameras.txt``, ``images.txt``, ``points3D.txt``.

    ``images`` is a sequence of :class:`ImageEntry`; floats are written with
    ``repr`` so the files round-trip exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID MODEL WIDTH HEIGHT fx fy cx cy\n")
        for cam_id in sorted(cameras):
            k = cameras[cam_id]
            fh.write(f"{cam_id} PINHOLE {k.width} {k.height} {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n")

    # per-image observation lists, in point order
    per_image = {entry.id: [] for entry in images}
    tracks = [[] for _ in range(len(tie_points))]
    for obs in range(len(tie_points.obs_point)):
        image_id = int(tie_points.obs_image[obs])
        p = int(tie_points.obs_point[obs])
        idx = len(per_image[image_id])
        per_image[image_id].append((tie_points.obs_uv[obs], int(tie_points.point_ids[p])))
        tracks[p].append((image_id, idx))

    with open(directory / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for entry in images:
            q = entry.pose.quaternion
            t = entry.pose.translation
            fh.write(" ".join([str(entry.id), *(repr(float(x)) for x in q),
                               *(repr(float(x)) for x in t), str(entry.camera_id), entry.name]) + "\n")
            fh.write(" ".join(f"{float(uv[0])!r} {float(uv[1])!r} {pid}"
                              for uv, pid in per_image[entry.id]) + "\n")

    rgb = tie_points.rgb if tie_points.rgb is not None else np.zeros((len(tie_points), 3), np.uint8)
    with open(directory / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p in range(len(tie_points)):
            x, y, z = (repr(float(c)) for c in tie_points.xyz[p])
            r, g, b = (int(c) for c in rgb[p])
            track = " ".join(f"{im} {idx}" for im, idx in tracks[p])
            fh.write(f"{int(tie_points.point_ids[p])} {x} {y} {z} {r} {g} {b} 0.0 {track}\n")


def reprojection_violations(manifest, tie_points: TiePointTable, threshold: float = 3.0):
    """Observations whose tie point reprojects farther than ``threshold`` pixels
    from the stored pixel (or lands behind the camera).

    Returns a list of ``(point_id, image_id, error_px)``; ``inf`` marks points
    behind the camera.
    """
    out = []
    by_id = {entry.id: entry for entry in manifest.images}
    for image_id in np.unique(tie_points.obs_image):
        entry = by_id[int(image_id)]
        k = manifest.cameras[entry.camera_id]
        sel = np.flatnonzero(tie_points.obs_image == image_id)
        pts = tie_points.xyz[tie_points.obs_point[sel]]
        uv, front = project_points(k, world_to_camera(entry.pose, pts))
        err = np.where(front, np.linalg.norm(uv - tie_points.obs_uv[sel], axis=-1), np.inf)
        for j in np.flatnonzero(~(err <= threshold)):
            pid = int(tie_points.point_ids[tie_points.obs_point[sel[j]]])
            out.append((pid, int(image_id), float(err[j])))
    return out

