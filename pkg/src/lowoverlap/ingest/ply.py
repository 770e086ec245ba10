"""Binary little-endian PLY point clouds (x y z double, red green blue uchar)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import MalformedHeader, TruncatedData, UnsupportedPlyVariant
from ..fusion import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}
_KNOWN = {"x", "y", "z", "red", "green", "blue"}

_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                   ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def encode_ply(cloud: PointCloud) -> bytes:
    n = len(cloud)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")
    body = np.empty(n, dtype=_DTYPE)
    body["x"], body["y"], body["z"] = cloud.xyz.T if n else (0, 0, 0)
    rgb = cloud.rgb if cloud.rgb is not None else np.zeros((n, 3), np.uint8)
    body["red"], body["green"], body["blue"] = rgb.T if n else (0, 0, 0)
    return header + body.tobytes()


def write_ply(cloud: PointCloud, path) -> None:
    if not np.all(np.isfinite(cloud.xyz)):
        raise ValueError("cloud contains non-finite coordinates")
    Path(path).write_bytes(encode_ply(cloud))


def parse_ply(data: bytes) -> PointCloud:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MalformedHeader("not a PLY file (missing 'ply' magic or 'end_header')")
    try:
        lines = data[4:end].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise MalformedHeader("PLY header is not ASCII") from None
    fmt = None
    count = None
    fields = []
    for line in lines:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1:]
        elif parts[0] == "element":
            if count is not None or len(parts) != 3 or parts[1] != "vertex":
                raise UnsupportedPlyVariant(f"unsupported element declaration {line!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise MalformedHeader(f"bad vertex count {parts[2]!r}") from None
            if count < 0:
                raise MalformedHeader("negative vertex count")
        elif parts[0] == "property":
            if count is None:
                raise MalformedHeader("property before element")
            if len(parts) != 3 or parts[1] not in _PLY_TYPES or parts[2] not in _KNOWN:
                raise UnsupportedPlyVariant(f"unsupported property {line!r}")
            if parts[2] in (name for name, _ in fields):
                raise MalformedHeader(f"duplicate property {parts[2]!r}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise MalformedHeader(f"unknown header line {line!r}")
    if fmt != ["binary_little_endian", "1.0"]:
        raise UnsupportedPlyVariant(f"unsupported PLY format {fmt}")
    if count is None:
        raise MalformedHeader("missing vertex element")
    names = {name for name, _ in fields}
    if not {"x", "y", "z"} <= names:
        raise MalformedHeader("vertex element lacks x, y, z")
    dtype = np.dtype(fields)
    payload = data[end + len(b"end_header\n"):]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedData(f"PLY payload too short for {count} vertices")
    body = np.frombuffer(payload[:count * dtype.itemsize], dtype=dtype, count=count)
    xyz = np.stack([body["x"], body["y"], body["z"]], axis=-1).astype(np.float64)
    rgb = None
    if {"red", "green", "blue"} <= names:
        rgb = np.stack([body["red"], body["green"], body["blue"]], axis=-1)
        if rgb.dtype != np.uint8:
            raise UnsupportedPlyVariant("colors must be uchar")
    if not np.all(np.isfinite(xyz)):
        raise MalformedHeader("PLY holds non-finite coordinates")
    return PointCloud(xyz, rgb, np.full(count, -1, dtype=np.int64))


def read_ply(path) -> PointCloud:
    """Read a PLY written by :func:`write_ply`; source ids come back as -1."""
    return parse_ply(Path(path).read_bytes())
