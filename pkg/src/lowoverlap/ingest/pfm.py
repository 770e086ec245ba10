"""PFM (portable float map) depth rasters, grayscale variant only."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from ..errors import MalformedHeader, TruncatedData
from ..rasters import DepthMap

_TOKEN = re.compile(rb"[ \t\r\n]*([^ \t\r\n]+)")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens; returns them and the
    payload offset (one whitespace byte after the last token)."""
    tokens = []
    pos = 0
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeader("PFM header ended early")
        tokens.append(m.group(1))
        pos = m.end()
    if data[pos:pos + 1] not in (b" ", b"\t", b"\r", b"\n"):
        raise MalformedHeader("PFM header must end with a whitespace byte")
    return tokens, pos + 1


def parse_pfm(data: bytes, kind: str = "relative") -> DepthMap:
    tokens, offset = _header_tokens(data, 4)
    magic, w_tok, h_tok, scale_tok = tokens
    if magic == b"PF":
        raise MalformedHeader("color PFM ('PF') is not supported; expected 'Pf'")
    if magic != b"Pf":
        raise MalformedHeader(f"bad PFM magic {magic[:8]!r}")
    try:
        width, height = int(w_tok), int(h_tok)
        scale = float(scale_tok)
    except ValueError as exc:
        raise MalformedHeader(f"bad PFM dimensions or scale: {exc}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"non-positive PFM dimensions {width}x{height}")
    if scale == 0 or not np.isfinite(scale):
        raise MalformedHeader("PFM scale must be finite and nonzero")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    needed = width * height * 4
    payload = data[offset:offset + needed]
    if len(payload) < needed:
        raise TruncatedData(f"PFM payload has {len(payload)} bytes, expected {needed}")
    # rows are stored bottom to top
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width)[::-1].astype(np.float32)
    valid = np.isfinite(values)
    if kind == "metric":
        valid &= np.where(valid, values, 1.0) > 0
    return DepthMap(values, valid, kind)


def read_depth_pfm(path, kind: str = "relative") -> DepthMap:
    """Read a grayscale PFM. Non-finite values become invalid pixels."""
    return parse_pfm(Path(path).read_bytes(), kind)


def encode_pfm(depth: DepthMap) -> bytes:
    values = np.where(depth.valid, depth.values, np.nan).astype("<f4")
    header = f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(values[::-1]).tobytes()


def write_depth_pfm(depth: DepthMap, path) -> None:
    """Write little-endian float32 PFM; invalid pixels are stored as NaN."""
    Path(path).write_bytes(encode_pfm(depth))
