"""Readers/writers for PFM depth maps, PPM images, and PLY point clouds."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FileFormatError(Exception):
    pass


def _read_token(buf: bytes, off: int, path) -> tuple[bytes, int]:
    while off < len(buf) and buf[off:off + 1].isspace():
        off += 1
    start = off
    while off < len(buf) and not buf[off:off + 1].isspace():
        off += 1
    if start == off:
        raise FileFormatError(f"{path}: truncated header at byte {start}")
    return buf[start:off], off


# ---------------------------------------------------------------------------
# PFM: "Pf" grayscale, rows bottom-up, negative scale marks little-endian

def save_pfm(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype="<f4")
    if d.ndim == 3 and d.shape[0] == 1:
        d = d[0]
    if d.ndim != 2:
        raise FileFormatError("save_pfm expects a single-channel map")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.flipud(d).tobytes())


def load_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tag, off = _read_token(buf, 0, path)
    if tag != b"Pf":
        raise FileFormatError(f"{path}: bad PFM magic {tag!r} at byte 0")
    wtok, off = _read_token(buf, off, path)
    htok, off = _read_token(buf, off, path)
    stok, off = _read_token(buf, off, path)
    w, h, scale = int(wtok), int(htok), float(stok)
    off += 1  # single whitespace byte after the scale line
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    if len(buf) - off < need:
        raise FileFormatError(f"{path}: truncated payload at byte {off} (need {need} bytes)")
    data = np.frombuffer(buf[off:off + need], dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(np.flipud(data)).astype(np.float32)


# ---------------------------------------------------------------------------
# PPM: binary P6, maxval 255

def save_ppm(path, image: np.ndarray) -> None:
    """image: (3, H, W) float in [0, 1] or (H, W, 3) uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(img.transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def load_ppm(path) -> np.ndarray:
    """Returns (3, H, W) float32 in [0, 1]."""
    buf = Path(path).read_bytes()
    tag, off = _read_token(buf, 0, path)
    if tag != b"P6":
        raise FileFormatError(f"{path}: bad PPM magic {tag!r} at byte 0")
    wtok, off = _read_token(buf, off, path)
    htok, off = _read_token(buf, off, path)
    mtok, off = _read_token(buf, off, path)
    w, h, maxval = int(wtok), int(htok), int(mtok)
    if maxval != 255:
        raise FileFormatError(f"{path}: unsupported maxval {maxval}")
    off += 1
    need = w * h * 3
    if len(buf) - off < need:
        raise FileFormatError(f"{path}: truncated payload at byte {off} (need {need} bytes)")
    img = np.frombuffer(buf[off:off + need], dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# PLY: ASCII, x y z r g b per vertex

def save_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.uint8)
    if len(points) != len(colors):
        raise FileFormatError("points and colors must have equal length")
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for (x, y, z), (r, g, b) in zip(points, colors):
            f.write(f"{x:.6g} {y:.6g} {z:.6g} {r} {g} {b}\n")
