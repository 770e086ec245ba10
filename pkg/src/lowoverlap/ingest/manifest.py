"""Dataset manifest: cameras, posed images, and pointers to tie points and depth maps.

The manifest is a JSON document validated against ``manifest.schema.json``.
Relative paths resolve against the manifest's directory. Per-image path
patterns accept the placeholders ``{name}`` and ``{id}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from ..errors import InvalidPose, MissingFile, SchemaError
from ..geometry import CameraIntrinsics, CameraPose
from .sfm import ImageEntry, TiePointTable, parse_sparse_model


def _schema() -> dict:
    text = resources.files(__package__).joinpath("manifest.schema.json").read_text()
    return json.loads(text)


@dataclass
class DatasetManifest:
    cameras: dict[int, CameraIntrinsics]
    images: list[ImageEntry]
    root: Path = field(default_factory=Path)
    tie_point_files: tuple[Path, Path, Path] | None = None
    pixel_offset: float = 0.0
    depth_pattern: str | None = None
    depth_kind: str = "relative"
    gt_depth_pattern: str | None = None
    gt_dsm: Path | None = None
    aoi: tuple[float, float, float, float] | None = None

    def image(self, image_id: int) -> ImageEntry:
        for entry in self.images:
            if entry.id == image_id:
                return entry
        raise KeyError(image_id)

    def intrinsics(self, entry: ImageEntry) -> CameraIntrinsics:
        return self.cameras[entry.camera_id]

    def _expand(self, pattern: str, entry: ImageEntry) -> Path:
        return self.root / pattern.format(name=entry.name, id=entry.id)

    def depth_path(self, entry: ImageEntry) -> Path:
        if self.depth_pattern is None:
            raise ValueError("manifest has no depth pattern")
        return self._expand(self.depth_pattern, entry)

    def gt_depth_path(self, entry: ImageEntry) -> Path | None:
        return None if self.gt_depth_pattern is None else self._expand(self.gt_depth_pattern, entry)

    def load_tie_points(self) -> TiePointTable:
        """Parse the referenced sparse model; its image ids must exist here."""
        if self.tie_point_files is None:
            raise ValueError("manifest has no tie-point files")
        sparse, table = parse_sparse_model(*self.tie_point_files, pixel_offset=self.pixel_offset)
        known = {entry.id for entry in self.images}
        unknown = sorted({int(i) for i in table.obs_image} - known)
        if unknown:
            raise SchemaError("tie_points", f"observations reference unknown image ids {unknown}")
        return table


def _check_pattern(pattern: str, where: str) -> None:
    try:
        pattern.format(name="x", id=0)
    except (KeyError, IndexError, ValueError) as exc:
        raise SchemaError(where, f"bad path pattern {pattern!r}: {exc}") from None


def manifest_from_dict(doc, root=".") -> DatasetManifest:
    """Validate a parsed manifest document and build a :class:`DatasetManifest`.

    Raises:
        SchemaError: with the offending field path.
        MissingFile: for referenced files that do not exist.
    """
    root = Path(root)
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path)
        raise SchemaError(path, exc.message) from None

    cameras = {}
    for i, cam in enumerate(doc["cameras"]):
        where = f"cameras.{i}"
        if cam["id"] in cameras:
            raise SchemaError(f"{where}.id", f"duplicate camera id {cam['id']}")
        try:
            cameras[cam["id"]] = CameraIntrinsics(
                cam["fx"], cam["fy"], cam["cx"], cam["cy"], cam["width"], cam["height"]
            )
        except ValueError as exc:
            raise SchemaError(where, str(exc)) from None

    images = []
    seen_ids, seen_names = set(), set()
    for i, img in enumerate(doc["images"]):
        where = f"images.{i}"
        if img["id"] in seen_ids:
            raise SchemaError(f"{where}.id", f"duplicate image id {img['id']}")
        if img["name"] in seen_names:
            raise SchemaError(f"{where}.name", f"duplicate image name {img['name']!r}")
        if img["camera_id"] not in cameras:
            raise SchemaError(f"{where}.camera_id", f"unknown camera id {img['camera_id']}")
        try:
            pose = CameraPose.from_quaternion(img["qvec"], img["tvec"])
        except InvalidPose as exc:
            raise SchemaError(f"{where}.qvec", str(exc)) from None
        path = root / img["path"] if "path" in img else None
        if path is not None and not path.is_file():
            raise MissingFile(f"{where}.path: {path} does not exist")
        seen_ids.add(img["id"])
        seen_names.add(img["name"])
        images.append(ImageEntry(img["id"], img["name"], img["camera_id"], pose, path))

    tp = doc["tie_points"]
    tie_files = tuple(root / tp[key] for key in ("cameras", "images", "points"))
    for key, path in zip(("cameras", "images", "points"), tie_files):
        if not path.is_file():
            raise MissingFile(f"tie_points.{key}: {path} does not exist")

    _check_pattern(doc["depth"]["pattern"], "depth.pattern")
    gt = doc.get("ground_truth", {})
    gt_dsm = None
    if "depth_pattern" in gt:
        _check_pattern(gt["depth_pattern"], "ground_truth.depth_pattern")
    if "dsm" in gt:
        gt_dsm = root / gt["dsm"]
        if not gt_dsm.is_file():
            raise MissingFile(f"ground_truth.dsm: {gt_dsm} does not exist")

    aoi = None
    if "aoi" in doc:
        aoi = tuple(float(v) for v in doc["aoi"])
        if not (aoi[2] > aoi[0] and aoi[3] > aoi[1]):
            raise SchemaError("aoi", "expected [xmin, ymin, xmax, ymax] with max > min")

    return DatasetManifest(
        cameras=cameras,
        images=sorted(images, key=lambda e: e.id),
        root=root,
        tie_point_files=tie_files,
        pixel_offset=float(tp.get("pixel_offset", 0.0)),
        depth_pattern=doc["depth"]["pattern"],
        depth_kind=doc["depth"]["kind"],
        gt_depth_pattern=gt.get("depth_pattern"),
        gt_dsm=gt_dsm,
        aoi=aoi,
    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError("", f"not valid JSON: {exc}") from None
    return manifest_from_dict(doc, path.parent)


def manifest_to_dict(manifest: DatasetManifest, root=None) -> dict:
    """Inverse of :func:`manifest_from_dict`; paths are made relative to ``root``."""
    root = Path(root) if root is not None else manifest.root

    def rel(p: Path) -> str:
        try:
            return Path(p).relative_to(root).as_posix()
        except ValueError:
            return str(p)

    doc = {
        "version": 1,
        "units": {"length": "m", "pixel": "px"},
        "cameras": [
            {"id": cid, "model": "PINHOLE", "width": k.width, "height": k.height,
             "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}
            for cid, k in sorted(manifest.cameras.items())
        ],
        "images": [],
        "tie_points": dict(zip(("cameras", "images", "points"), map(rel, manifest.tie_point_files))),
        "depth": {"pattern": manifest.depth_pattern, "kind": manifest.depth_kind},
    }
    if manifest.pixel_offset:
        doc["tie_points"]["pixel_offset"] = manifest.pixel_offset
    for entry in manifest.images:
        img = {"id": entry.id, "name": entry.name, "camera_id": entry.camera_id}
        if entry.path is not None:
            img["path"] = rel(entry.path)
        img["qvec"] = [float(q) for q in entry.pose.quaternion]
        img["tvec"] = [float(t) for t in entry.pose.translation]
        doc["images"].append(img)
    gt = {}
    if manifest.gt_depth_pattern:
        gt["depth_pattern"] = manifest.gt_depth_pattern
    if manifest.gt_dsm is not None:
        gt["dsm"] = rel(manifest.gt_dsm)
    if gt:
        doc["ground_truth"] = gt
    if manifest.aoi is not None:
        doc["aoi"] = list(manifest.aoi)
    return doc
