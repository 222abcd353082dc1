"""Voxel-grid and camera data model, label derivations, class statistics, file I/O.

Conventions fixed here and relied on everywhere else:
  - flat voxel order is x-fastest: flat = i + Dx * (j + Dy * k)
  - voxel centroids sit at origin + (i+0.5, j+0.5, k+0.5) * voxel_size
  - UNKNOWN ground truth is the sentinel byte 255
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, FormatError

UNKNOWN = 255

_SSCV_MAGIC = b"SSCV"
_SSCP_MAGIC = b"SSCP"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SemanticGrid:
    """Dense 3D class-label grid with UNKNOWN sentinel.

    labels is a flat uint8 array of Dx*Dy*Dz entries in x-fastest order.
    Class 0 is free space; classes 1..class_count-1 are semantic.
    """

    dims: tuple[int, int, int]
    origin: np.ndarray
    voxel_size: float
    class_count: int
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float32).copy())
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.uint8).copy())
        self.labels.setflags(write=False)
        self.origin.setflags(write=False)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        if not (self.voxel_size > 0):
            raise ValueError("voxel_size must be positive")
        if not (2 <= self.class_count <= 255):
            raise ValueError(f"class_count must be in [2, 255], got {self.class_count}")
        if self.labels.shape != (self.voxel_count,):
            raise ValueError(
                f"labels length {self.labels.shape} does not match dims {self.dims}"
            )
        bad = (self.labels != UNKNOWN) & (self.labels >= self.class_count)
        if bad.any():
            raise ValueError("labels must be UNKNOWN or < class_count")

    @property
    def voxel_count(self) -> int:
        dx, dy, dz = self.dims
        return dx * dy * dz

    def defined_mask(self) -> np.ndarray:
        return self.labels != UNKNOWN

    def centroids(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (N, 3), x-fastest order."""
        dx, dy, dz = self.dims
        i = np.arange(dx)
        j = np.arange(dy)
        k = np.arange(dz)
        ii, jj, kk = np.meshgrid(i, j, k, indexing="ij")
        idx = np.stack(
            [ii.ravel(order="F"), jj.ravel(order="F"), kk.ravel(order="F")], axis=1
        )
        return self.origin[None, :].astype(np.float64) + (idx + 0.5) * self.voxel_size


@dataclass(frozen=True)
class ProbGrid:
    """Per-voxel class probability vectors, rows summing to 1."""

    dims: tuple[int, int, int]
    class_count: int
    values: np.ndarray

    _ROW_SUM_TOL = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).copy())
        self.values.setflags(write=False)
        n = self.dims[0] * self.dims[1] * self.dims[2]
        if self.values.shape != (n, self.class_count):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"({n}, {self.class_count})"
            )
        if (self.values < 0).any():
            raise ValueError("probabilities must be non-negative")
        sums = self.values.sum(axis=1)
        if np.abs(sums - 1.0).max(initial=0.0) > self._ROW_SUM_TOL:
            raise ValueError("probability rows must sum to 1")


@dataclass(frozen=True)
class LogitGrid:
    """Unconstrained per-voxel class scores (pre-softmax)."""

    dims: tuple[int, int, int]
    class_count: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).copy())
        n = self.dims[0] * self.dims[1] * self.dims[2]
        if self.values.shape != (n, self.class_count):
            raise ValueError(f"values shape {self.values.shape} does not match grid")
        if not np.isfinite(self.values).all():
            raise ValueError("logits must be finite")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))

    _ORTHO_TOL = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "extrinsic", np.asarray(self.extrinsic, dtype=np.float64).copy())
        self.extrinsic.setflags(write=False)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.extrinsic.shape != (4, 4):
            raise ValueError("extrinsic must be 4x4")
        r = self.extrinsic[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > self._ORTHO_TOL:
            raise ValueError("extrinsic rotation block is not orthonormal")
        if np.abs(self.extrinsic[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 0:
            raise ValueError("extrinsic bottom row must be (0, 0, 0, 1)")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.extrinsic[:3, :3].T + self.extrinsic[:3, 3]


@dataclass(frozen=True)
class ClassWeights:
    """Positive per-class weights for the cross-entropy loss."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64).copy())
        self.weights.setflags(write=False)
        if self.weights.ndim != 1:
            raise ValueError("weights must be a 1-D array")
        if not (np.isfinite(self.weights).all() and (self.weights > 0).all()):
            raise ValueError("weights must be finite and positive")


# ---------------------------------------------------------------------------
# label derivations and class statistics


def derive_geometric_labels(grid: SemanticGrid) -> SemanticGrid:
    """Collapse semantics to binary occupancy: free->0, occupied->1, UNKNOWN kept."""
    out = np.where(grid.labels == UNKNOWN, UNKNOWN, (grid.labels != 0).astype(np.uint8))
    return SemanticGrid(grid.dims, grid.origin, grid.voxel_size, 2, out.astype(np.uint8))


def class_frequencies(grid: SemanticGrid) -> np.ndarray:
    """Fraction of defined voxels per class; raises on an all-UNKNOWN grid."""
    defined = grid.labels[grid.labels != UNKNOWN]
    if defined.size == 0:
        raise DegenerateInput("all voxels are UNKNOWN; class frequencies undefined")
    counts = np.bincount(defined, minlength=grid.class_count).astype(np.float64)
    return counts / defined.size


def class_weights(frequencies: np.ndarray) -> ClassWeights:
    """Inverse-log-frequency weighting w_c = 1 / ln(1.02 + f_c)."""
    f = np.asarray(frequencies, dtype=np.float64)
    if ((f < 0) | (f > 1)).any():
        raise ValueError("frequencies must lie in [0, 1]")
    return ClassWeights(1.0 / np.log(1.02 + f))


# ---------------------------------------------------------------------------
# file I/O


def save_grid(grid: SemanticGrid, path) -> None:
    header = _SSCV_MAGIC + struct.pack(
        "<BIII3ffB",
        _FORMAT_VERSION,
        *grid.dims,
        *(float(v) for v in grid.origin),
        float(grid.voxel_size),
        grid.class_count,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.labels.tobytes())


def load_grid(path) -> SemanticGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    head_len = 4 + struct.calcsize("<BIII3ffB")
    if len(data) < head_len or data[:4] != _SSCV_MAGIC:
        raise FormatError(f"{path}: not an SSCV file")
    version, dx, dy, dz, ox, oy, oz, vs, cc = struct.unpack(
        "<BIII3ffB", data[4:head_len]
    )
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported SSCV version {version}")
    n = dx * dy * dz
    if n > len(data):  # cheap overflow guard before slicing
        raise FormatError(f"{path}: declared dims exceed file size")
    payload = data[head_len:]
    if len(payload) != n:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {n}"
        )
    labels = np.frombuffer(payload, dtype=np.uint8)
    try:
        return SemanticGrid((dx, dy, dz), (ox, oy, oz), vs, cc, labels)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_probs(probs: ProbGrid, path) -> None:
    header = _SSCP_MAGIC + struct.pack(
        "<BIIIB", _FORMAT_VERSION, *probs.dims, probs.class_count
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(probs.values.astype("<f4").tobytes())


def load_probs(path) -> ProbGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    head_len = 4 + struct.calcsize("<BIIIB")
    if len(data) < head_len or data[:4] != _SSCP_MAGIC:
        raise FormatError(f"{path}: not an SSCP file")
    version, dx, dy, dz, cc = struct.unpack("<BIIIB", data[4:head_len])
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported SSCP version {version}")
    n = dx * dy * dz * cc
    payload = data[head_len:]
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dx * dy * dz, cc)
    try:
        return ProbGrid((dx, dy, dz), cc, values)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_camera(camera: CameraModel, path) -> None:
    doc = {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "width": camera.width,
        "height": camera.height,
        "extrinsic": [float(v) for v in camera.extrinsic.ravel()],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_camera(path) -> CameraModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: invalid camera JSON: {exc}") from exc
    try:
        extrinsic = np.asarray(doc["extrinsic"], dtype=np.float64).reshape(4, 4)
        return CameraModel(
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
            extrinsic=extrinsic,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid camera JSON: {exc}") from exc
