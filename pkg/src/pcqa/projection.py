"""Orthographic multi-view rendering of unit-cube point clouds into paired
color and depth maps, patch cropping, and PPM/PCQT view storage."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .pointcloud import PointCloud
from .tensorio import BadMagic

try:  # compiled kernel; PCQA_PURE_PYTHON=1 forces the numpy path
    if os.environ.get("PCQA_PURE_PYTHON") == "1":
        raise ImportError
    from ._splat import splat_zbuffer as _splat_compiled
except ImportError:
    _splat_compiled = None
from ._splat_py import splat_zbuffer as _splat_numpy

BACKEND = "cython" if _splat_compiled is not None else "numpy"
FAR = np.float32(1.0)
NEAREST_BELOW_FAR = np.nextafter(np.float32(1.0), np.float32(0.0))


class EmptyCloud(ValueError):
    pass


class SizeTooLarge(ValueError):
    pass


@dataclass
class ViewImage:
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32, 1.0 = background
    mask: np.ndarray  # (H, W) bool
    view_index: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, ViewImage):
            return NotImplemented
        return (self.view_index == other.view_index
                and np.array_equal(self.color, other.color)
                and np.array_equal(self.depth, other.depth)
                and np.array_equal(self.mask, other.mask))


@dataclass
class ViewSet:
    views: list[ViewImage]

    @property
    def m_count(self) -> int:
        return len(self.views)

    def colors(self) -> np.ndarray:
        return np.stack([v.color for v in self.views])

    def depths(self) -> np.ndarray:
        return np.stack([v.depth for v in self.views])


def splat_backend(name: str | None = None):
    """Return the splat kernel: ``"cython"``, ``"numpy"`` or None for the default."""
    if name is None:
        name = BACKEND
    if name == "cython":
        if _splat_compiled is None:
            raise RuntimeError("compiled splat kernel is not built")
        return _splat_compiled
    if name == "numpy":
        return _splat_numpy
    raise ValueError(f"unknown splat backend {name!r}")


def auto_splat_radius(n_points: int, size: int = 256) -> int:
    """ceil(size / cbrt(n)) clamped to [1, 4], computed exactly: the smallest
    k with k^3 n >= size^3 (a float cube root misses perfect cubes)."""
    k = 1
    while k < 4 and k ** 3 * n_points < size ** 3:
        k += 1
    return k


def disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= r * r
    return np.ascontiguousarray(np.stack([dy[keep], dx[keep]], axis=1).astype(np.int64))


_AXIS_FRAMES = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


def axis_view_coords(positions: np.ndarray, view: int):
    """(u, v, depth) in [0,1] for the six axis views +X, -X, +Y, -Y, +Z, -Z.

    The camera of view +A sits on the A = 0 face looking toward increasing A,
    so depth is the coordinate itself; the -A camera mirrors it.
    """
    axis, negative = divmod(view, 2)
    right, up = _AXIS_FRAMES[axis]
    p = positions
    if negative:
        return 1.0 - p[:, right], p[:, up], 1.0 - p[:, axis]
    return p[:, right], p[:, up], p[:, axis]


def fibonacci_directions(m: int) -> np.ndarray:
    i = np.arange(m) + 0.5
    z = 1.0 - 2.0 * i / m
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_view_coords(positions: np.ndarray, direction: np.ndarray):
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(ref, d)
    right /= np.linalg.norm(right)
    up = np.cross(d, right)
    c = positions - 0.5
    k = 1.0 / math.sqrt(3.0)
    return c @ right * k + 0.5, c @ up * k + 0.5, c @ d * k + 0.5


def render_views(cloud: PointCloud, m: int = 6, h: int = 256, w: int = 256,
                 splat_radius: int | str = "auto", backend: str | None = None) -> ViewSet:
    """Z-buffer splat a unit-cube cloud into ``m`` orthographic views.

    Six views use the cube axes; any other count uses a Fibonacci sphere.
    Each point covers a filled disc of ``splat_radius`` pixels and the point
    with the smallest depth wins a pixel (lowest index on ties).
    """
    if cloud is None or len(cloud) == 0:
        raise EmptyCloud("nothing to render")
    if m < 1 or h < 8 or w < 8:
        raise ValueError("need m >= 1 and images of at least 8x8")
    if splat_radius == "auto":
        splat_radius = auto_splat_radius(len(cloud), max(h, w))
    offsets = disc_offsets(int(splat_radius))
    kernel = splat_backend(backend)
    dirs = fibonacci_directions(m) if m != 6 else None
    views = []
    for v in range(m):
        if m == 6:
            u, vv, z = axis_view_coords(cloud.positions, v)
        else:
            u, vv, z = sphere_view_coords(cloud.positions, dirs[v])
        cols = np.minimum(np.floor(np.clip(u, 0.0, 1.0) * w), w - 1).astype(np.int64)
        rows = np.minimum(np.floor(np.clip(vv, 0.0, 1.0) * h), h - 1).astype(np.int64)
        z = np.ascontiguousarray(np.clip(z, 0.0, 1.0), dtype=np.float64)
        winner, zbuf = kernel(cols, rows, z, offsets, h, w)
        mask = winner >= 0
        color = np.zeros((h, w, 3), dtype=np.uint8)
        color[mask] = cloud.colors[winner[mask]]
        depth = np.full((h, w), FAR, dtype=np.float32)
        depth[mask] = np.minimum(zbuf[mask].astype(np.float32), NEAREST_BELOW_FAR)
        views.append(ViewImage(color, depth, mask, v))
    return ViewSet(views)


def crop_window(h: int, w: int, size: int, mode: str = "center", seed=None) -> tuple[int, int]:
    if size > min(h, w):
        raise SizeTooLarge(f"crop {size} exceeds image {h}x{w}")
    if mode == "center":
        return (h - size) // 2, (w - size) // 2
    if mode == "random":
        rng = np.random.default_rng(seed)
        return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    raise ValueError(f"unknown crop mode {mode!r}")


def crop_patch(view: ViewImage, size: int, mode: str = "center", seed=None) -> ViewImage:
    h, w = view.depth.shape
    top, left = crop_window(h, w, size, mode, seed)
    sl = (slice(top, top + size), slice(left, left + size))
    return ViewImage(view.color[sl].copy(), view.depth[sl].copy(), view.mask[sl].copy(), view.view_index)


# -- storage -----------------------------------------------------------------


def ppm_bytes(color: np.ndarray) -> bytes:
    h, w, _ = color.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(color, np.uint8).tobytes()


def parse_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise BadMagic("not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise BadMagic("only 8-bit PPM is supported")
    pixels = np.frombuffer(data, np.uint8, h * w * 3, pos)
    return pixels.reshape(h, w, 3).copy()


def save_view(view: ViewImage, color_path, depth_path) -> None:
    Path(color_path).write_bytes(ppm_bytes(view.color))
    tensorio.save(depth_path, view.depth, dtype="f4")


def load_view(color_path, depth_path, view_index: int = 0) -> ViewImage:
    color = parse_ppm(Path(color_path).read_bytes())
    depth = tensorio.load(depth_path).astype(np.float32)
    if depth.shape != color.shape[:2]:
        raise BadMagic("color and depth sizes differ")
    return ViewImage(color, depth, depth < FAR, view_index)


def view_paths(root, sample_id: int, view: int) -> tuple[Path, Path]:
    base = Path(root) / f"{sample_id:05d}"
    return base / f"view{view}_color.ppm", base / f"view{view}_depth.pcqt"


def save_viewset(views: ViewSet, root, sample_id: int) -> None:
    (Path(root) / f"{sample_id:05d}").mkdir(parents=True, exist_ok=True)
    for v in views.views:
        save_view(v, *view_paths(root, sample_id, v.view_index))


def load_viewset(root, sample_id: int, m: int) -> ViewSet:
    return ViewSet([load_view(*view_paths(root, sample_id, v), view_index=v) for v in range(m)])


__all__ = [
    "BACKEND", "EmptyCloud", "SizeTooLarge", "ViewImage", "ViewSet", "auto_splat_radius",
    "crop_patch", "crop_window", "disc_offsets", "load_view", "load_viewset", "render_views",
    "save_view", "save_viewset", "splat_backend",
]
