"""Line-of-sight lifting of multi-scale 2D features into a voxel grid.

Each voxel centroid is projected into the image; the 2D maps are sampled at
the projected point (divided by the scale factor) and summed over scales into
one feature row per voxel. The whole operator is linear in the map values, and
`flosp_adjoint` is its exact transpose, so gradients can flow back to the 2D
features.

Sampling convention: the center of pixel (0, 0) is coordinate (0, 0); bilinear
neighbors falling outside the map contribute zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .grid import CameraModel, SemanticGrid

_SSCF_MAGIC = b"SSCF"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PyramidShape:
    """Static description of a feature pyramid: base size, scales, channels."""

    width: int
    height: int
    scales: tuple[int, ...]
    channels: int

    def level_size(self, scale: int) -> tuple[int, int]:
        return math.ceil(self.width / scale), math.ceil(self.height / scale)


@dataclass(frozen=True)
class FeaturePyramid:
    """Multi-scale 2D feature maps over a common base image size.

    entries maps scale -> array of shape (height_s, width_s, E) where
    width_s = ceil(W / s) and height_s = ceil(H / s).
    """

    width: int
    height: int
    entries: tuple[tuple[int, np.ndarray], ...]

    def __post_init__(self):
        entries = tuple(
            (int(s), np.asarray(m, dtype=np.float64)) for s, m in self.entries
        )
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ValueError("pyramid needs at least one scale")
        scales = [s for s, _ in entries]
        if any(s < 1 for s in scales) or any(
            a >= b for a, b in zip(scales, scales[1:])
        ):
            raise ValueError(f"scales must be strictly increasing and >= 1: {scales}")
        channels = {m.shape[2] for _, m in entries if m.ndim == 3}
        if len(channels) != 1 or any(m.ndim != 3 for _, m in entries):
            raise ShapeError("all maps must be (h, w, E) with a shared channel count")
        for s, m in entries:
            expect = (math.ceil(self.height / s), math.ceil(self.width / s))
            if m.shape[:2] != expect:
                raise ShapeError(
                    f"scale {s} map is {m.shape[:2]}, expected {expect} "
                    f"for base {self.width}x{self.height}"
                )

    @property
    def channels(self) -> int:
        return self.entries[0][1].shape[2]

    @property
    def shape(self) -> PyramidShape:
        return PyramidShape(
            self.width, self.height, tuple(s for s, _ in self.entries), self.channels
        )


@dataclass(frozen=True)
class ProjectionTable:
    """Continuous scale-1 pixel coordinates per voxel plus a validity flag."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=np.float64))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))
        if not (self.u.shape == self.v.shape == self.valid.shape):
            raise ShapeError("u, v, valid must share one shape")

    @property
    def voxel_count(self) -> int:
        return self.u.size


def project_centroids(camera: CameraModel, grid: SemanticGrid) -> ProjectionTable:
    """Pinhole-project every voxel centroid; valid iff in front and on-image."""
    cam = camera.world_to_camera(grid.centroids())
    z = cam[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    valid = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return ProjectionTable(u, v, valid)


def _bilinear_corners(x, y, w, h):
    """Corner indices, weights, and in-bounds masks for bilinear sampling."""
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    corners = []
    for dy, dx, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        corners.append((yi, xi, wt, inb))
    return corners


def _nearest_corner(x, y, w, h):
    xi = np.floor(x + 0.5).astype(np.int64)
    yi = np.floor(y + 0.5).astype(np.int64)
    inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    return [(yi, xi, np.ones_like(x), inb)]


def _corners(x, y, w, h, mode):
    if mode == "bilinear":
        return _bilinear_corners(x, y, w, h)
    if mode == "nearest":
        return _nearest_corner(x, y, w, h)
    raise ValueError(f"unknown sampling mode {mode!r}")


def flosp_forward(
    pyramid: FeaturePyramid, table: ProjectionTable, mode: str = "bilinear"
) -> np.ndarray:
    """Sum per-scale samples at each valid voxel; invalid voxels get zero rows.

    Returns the (N, E) 3D feature field in grid voxel order.
    """
    n = table.voxel_count
    out = np.zeros((n, pyramid.channels), dtype=np.float64)
    sel = np.flatnonzero(table.valid)
    if sel.size == 0:
        return out
    u = table.u[sel]
    v = table.v[sel]
    for s, fmap in pyramid.entries:  # ascending scales: deterministic sum order
        h, w, _ = fmap.shape
        for yi, xi, wt, inb in _corners(u / s, v / s, w, h, mode):
            if not inb.any():
                continue
            idx = sel[inb]
            out[idx] += wt[inb, None] * fmap[yi[inb], xi[inb]]
    return out


def flosp_adjoint(
    grad3d: np.ndarray,
    table: ProjectionTable,
    pyramid_shape: PyramidShape,
    mode: str = "bilinear",
) -> FeaturePyramid:
    """Exact transpose of `flosp_forward`: scatter-add voxel rows into the maps."""
    grad3d = np.asarray(grad3d, dtype=np.float64)
    if grad3d.ndim != 2 or grad3d.shape[0] != table.voxel_count:
        raise ShapeError(
            f"grad3d shape {grad3d.shape} does not match {table.voxel_count} voxels"
        )
    if grad3d.shape[1] != pyramid_shape.channels:
        raise ShapeError("grad3d channel count does not match the pyramid shape")
    sel = np.flatnonzero(table.valid)
    u = table.u[sel]
    v = table.v[sel]
    g = grad3d[sel]
    entries = []
    for s in pyramid_shape.scales:
        w, h = pyramid_shape.level_size(s)
        gmap = np.zeros((h, w, pyramid_shape.channels), dtype=np.float64)
        if sel.size:
            for yi, xi, wt, inb in _corners(u / s, v / s, w, h, mode):
                # np.add.at applies updates in voxel order: bit-stable scatter
                np.add.at(gmap, (yi[inb], xi[inb]), wt[inb, None] * g[inb])
        entries.append((s, gmap))
    return FeaturePyramid(pyramid_shape.width, pyramid_shape.height, tuple(entries))


# ---------------------------------------------------------------------------
# file I/O


def save_pyramid(pyramid: FeaturePyramid, path) -> None:
    head = _SSCF_MAGIC + struct.pack(
        "<BIIBI",
        _FORMAT_VERSION,
        pyramid.width,
        pyramid.height,
        len(pyramid.entries),
        pyramid.channels,
    )
    with open(path, "wb") as fh:
        fh.write(head)
        for s, fmap in pyramid.entries:
            fh.write(struct.pack("<I", s))
            fh.write(fmap.astype("<f4").tobytes())


def load_pyramid(path) -> FeaturePyramid:
    with open(path, "rb") as fh:
        data = fh.read()
    head_len = 4 + struct.calcsize("<BIIBI")
    if len(data) < head_len or data[:4] != _SSCF_MAGIC:
        raise FormatError(f"{path}: not an SSCF file")
    version, width, height, n_scales, channels = struct.unpack(
        "<BIIBI", data[4:head_len]
    )
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported SSCF version {version}")
    pos = head_len
    entries = []
    for _ in range(n_scales):
        if pos + 4 > len(data):
            raise FormatError(f"{path}: truncated scale header")
        (s,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        if s < 1:
            raise FormatError(f"{path}: invalid scale {s}")
        h = math.ceil(height / s)
        w = math.ceil(width / s)
        nbytes = h * w * channels * 4
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: truncated map for scale {s}")
        fmap = (
            np.frombuffer(data[pos : pos + nbytes], dtype="<f4")
            .astype(np.float64)
            .reshape(h, w, channels)
        )
        pos += nbytes
        entries.append((s, fmap))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    try:
        return FeaturePyramid(width, height, tuple(entries))
    except (ValueError, ShapeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
