"""Supervoxel-to-voxel context relations: ground truth, loss, and aggregation.

A supervoxel is an s*s*s block of voxels. For every (voxel, supervoxel) cell
we record which of the four pair relations occur between the voxel and the
block members: free-similar, free-different, occupied-similar,
occupied-different. Pairs touching an UNKNOWN voxel never contribute; the
validity mask marks cells where at least one pair was observable.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, FormatError, ShapeError
from .grid import UNKNOWN, SemanticGrid

EPS = 1e-12

_SSCR_MAGIC = b"SSCR"
_FORMAT_VERSION = 1


class RelationKind(enum.IntEnum):
    F_S = 0  # both free
    F_D = 1  # exactly one free
    O_S = 2  # both occupied, same class
    O_D = 3  # both occupied, different classes


N_RELATIONS = len(RelationKind)


def pair_relation(label_a: int, label_b: int) -> RelationKind:
    """Classify an ordered voxel pair; callers must mask UNKNOWN labels first."""
    if label_a == UNKNOWN or label_b == UNKNOWN:
        raise ValueError("pair_relation is undefined for UNKNOWN labels")
    free_a = label_a == 0
    free_b = label_b == 0
    if free_a and free_b:
        return RelationKind.F_S
    if free_a or free_b:
        return RelationKind.F_D
    return RelationKind.O_S if label_a == label_b else RelationKind.O_D


@dataclass(frozen=True)
class RelationSet:
    """Four N x N/s^3 relation matrices plus a validity mask.

    matrices[m] is indexed [voxel, supervoxel] with RelationKind order on the
    first axis; binary {0,1} for ground truth, reals in (0,1) for predictions.
    Supervoxel columns follow x-fastest block order.
    """

    dims: tuple[int, int, int]
    supervoxel_size: int
    matrices: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "matrices", np.asarray(self.matrices, dtype=np.float64))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        s = self.supervoxel_size
        if s < 1 or any(d % s for d in self.dims):
            raise ShapeError(f"supervoxel size {s} does not divide dims {self.dims}")
        n = self.dims[0] * self.dims[1] * self.dims[2]
        j = n // s**3
        if self.matrices.shape != (N_RELATIONS, n, j):
            raise ShapeError(
                f"matrices shape {self.matrices.shape} != ({N_RELATIONS}, {n}, {j})"
            )
        if self.mask.shape != (n, j):
            raise ShapeError(f"mask shape {self.mask.shape} != ({n}, {j})")

    @property
    def voxel_count(self) -> int:
        return self.matrices.shape[1]

    @property
    def supervoxel_count(self) -> int:
        return self.matrices.shape[2]


def supervoxel_index(dims, s) -> np.ndarray:
    """Supervoxel column index of every voxel, x-fastest block order, shape (N,)."""
    dx, dy, dz = dims
    if s < 1 or dx % s or dy % s or dz % s:
        raise ShapeError(f"supervoxel size {s} does not divide dims {dims}")
    sx = dx // s
    i = np.arange(dx) // s
    j = np.arange(dy) // s
    k = np.arange(dz) // s
    ii, jj, kk = np.meshgrid(i, j, k, indexing="ij")
    flat = ii + sx * (jj + (dy // s) * kk)
    return flat.ravel(order="F").astype(np.int64)


def build_relation_ground_truth(grid: SemanticGrid, s: int) -> RelationSet:
    """Mark, per (voxel, supervoxel), which relations occur among defined pairs."""
    labels = grid.labels
    n = grid.voxel_count
    sv = supervoxel_index(grid.dims, s)
    j = n // s**3

    defined = labels != UNKNOWN
    free = defined & (labels == 0)
    occupied = defined & (labels != 0)

    # per-supervoxel membership counts
    sv_defined = np.bincount(sv[defined], minlength=j)
    sv_free = np.bincount(sv[free], minlength=j)
    sv_occ = np.bincount(sv[occupied], minlength=j)
    # class presence per supervoxel, semantic classes only
    present = np.zeros((j, grid.class_count), dtype=np.int64)
    occ_idx = np.flatnonzero(occupied)
    np.add.at(present, (sv[occ_idx], labels[occ_idx].astype(np.int64)), 1)

    mats = np.zeros((N_RELATIONS, n, j), dtype=np.float64)
    mask = defined[:, None] & (sv_defined > 0)[None, :]

    has_free = (sv_free > 0)[None, :]
    has_occ = (sv_occ > 0)[None, :]
    mats[RelationKind.F_S][free] = has_free.astype(np.float64)
    mats[RelationKind.F_D][free] = has_occ.astype(np.float64)
    mats[RelationKind.F_D][occupied] = has_free.astype(np.float64)
    occ_labels = labels[occupied].astype(np.int64)
    same = present[:, occ_labels].T > 0
    other = (sv_occ[None, :] - present[:, occ_labels].T) > 0
    mats[RelationKind.O_S][occupied] = same.astype(np.float64)
    mats[RelationKind.O_D][occupied] = other.astype(np.float64)

    mats *= mask[None, :, :]
    return RelationSet(grid.dims, s, mats, mask)


def supervoxel_pool(features: np.ndarray, dims, s: int) -> np.ndarray:
    """Mean of the s^3 member rows per supervoxel; (N, E) -> (N/s^3, E)."""
    features = np.asarray(features, dtype=np.float64)
    n = dims[0] * dims[1] * dims[2]
    if features.ndim != 2 or features.shape[0] != n:
        raise ShapeError(f"features shape {features.shape} does not match dims {dims}")
    sv = supervoxel_index(dims, s)
    j = n // s**3
    out = np.zeros((j, features.shape[1]), dtype=np.float64)
    np.add.at(out, sv, features)
    return out / s**3


def relation_aggregate(predictions: RelationSet, sv_features: np.ndarray) -> np.ndarray:
    """Gather context per relation: concat of masked-matrix x supervoxel-features.

    Returns (N, 4E) with blocks in RelationKind order.
    """
    sv_features = np.asarray(sv_features, dtype=np.float64)
    if sv_features.ndim != 2 or sv_features.shape[0] != predictions.supervoxel_count:
        raise ShapeError(
            f"supervoxel features shape {sv_features.shape} does not match "
            f"{predictions.supervoxel_count} supervoxels"
        )
    blocks = [
        (predictions.matrices[m] * predictions.mask) @ sv_features
        for m in range(N_RELATIONS)
    ]
    return np.concatenate(blocks, axis=1)


def _relation_weights(truth: RelationSet):
    """Per-relation positive weight w_m over masked entries; None when no positives."""
    weights = []
    for m in range(N_RELATIONS):
        a = truth.matrices[m][truth.mask]
        pos = a.sum()
        weights.append(None if pos == 0 else (a.size - pos) / pos)
    return weights


def relation_loss(predictions: RelationSet, truth: RelationSet):
    """Weighted multi-label BCE over masked cells.

    Per relation m: mean over masked entries of
    -[(1-A) ln(1-Ahat) + w_m A ln Ahat], with w_m = sum(1-A)/sum(A); relations
    without a masked positive are skipped. Returns (loss, gradient) where the
    gradient matches predictions.matrices in shape and is zero off-mask.
    """
    if predictions.matrices.shape != truth.matrices.shape:
        raise ShapeError("prediction and truth shapes differ")
    if not np.array_equal(predictions.mask, truth.mask):
        raise ShapeError("prediction and truth masks differ")
    mask = truth.mask
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise DegenerateInput("relation loss undefined: empty mask")

    weights = _relation_weights(truth)
    grad = np.zeros_like(predictions.matrices)
    loss = 0.0
    for m in range(N_RELATIONS):
        if weights[m] is None:
            continue
        a = truth.matrices[m][mask]
        p = np.clip(predictions.matrices[m][mask], EPS, 1.0 - EPS)
        w = weights[m]
        loss += float(np.sum(-((1.0 - a) * np.log1p(-p) + w * a * np.log(p)))) / n_masked
        g = ((1.0 - a) / (1.0 - p) - w * a / p) / n_masked
        gm = np.zeros(mask.shape, dtype=np.float64)
        gm[mask] = g
        grad[m] = gm
    return loss, grad


def relation_loss_from_logits(logits: np.ndarray, truth: RelationSet):
    """Numerically stable variant taking raw relation logits.

    Predictions are sigmoid(logits); the returned gradient is with respect to
    the logits. Equivalent to `relation_loss` after squashing, without the
    catastrophic cancellation near 0 and 1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != truth.matrices.shape:
        raise ShapeError("logit block shape does not match truth")
    mask = truth.mask
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise DegenerateInput("relation loss undefined: empty mask")

    weights = _relation_weights(truth)
    grad = np.zeros_like(logits)
    loss = 0.0
    for m in range(N_RELATIONS):
        if weights[m] is None:
            continue
        a = truth.matrices[m][mask]
        z = logits[m][mask]
        w = weights[m]
        # log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
        softplus = np.logaddexp(0.0, z)
        loss += float(np.sum((1.0 - a) * softplus + w * a * (softplus - z))) / n_masked
        sig = 1.0 / (1.0 + np.exp(-z))
        g = ((1.0 - a) * sig - w * a * (1.0 - sig)) / n_masked
        gm = np.zeros(mask.shape, dtype=np.float64)
        gm[mask] = g
        grad[m] = gm
    return loss, grad


# ---------------------------------------------------------------------------
# debug dump

def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def _unpack_bits(data: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[:count]


def save_relations(relations: RelationSet, path) -> None:
    n = relations.voxel_count
    j = relations.supervoxel_count
    head = _SSCR_MAGIC + struct.pack(
        "<BIIB", _FORMAT_VERSION, n, j, relations.supervoxel_size
    )
    with open(path, "wb") as fh:
        fh.write(head)
        for m in range(N_RELATIONS):
            fh.write(_pack_bits(relations.matrices[m] != 0))
        fh.write(_pack_bits(relations.mask))


def load_relations(path, dims) -> RelationSet:
    """Load an SSCR dump; the grid dims are not stored and must be supplied."""
    with open(path, "rb") as fh:
        data = fh.read()
    head_len = 4 + struct.calcsize("<BIIB")
    if len(data) < head_len or data[:4] != _SSCR_MAGIC:
        raise FormatError(f"{path}: not an SSCR file")
    version, n, j, s = struct.unpack("<BIIB", data[4:head_len])
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported SSCR version {version}")
    if n != dims[0] * dims[1] * dims[2]:
        raise FormatError(f"{path}: voxel count {n} does not match dims {dims}")
    bitmap_bytes = math.ceil(n * j / 8)
    if len(data) != head_len + 5 * bitmap_bytes:
        raise FormatError(f"{path}: expected 5 bitmaps of {bitmap_bytes} bytes")
    planes = []
    pos = head_len
    for _ in range(5):
        planes.append(_unpack_bits(data[pos : pos + bitmap_bytes], n * j).reshape(n, j))
        pos += bitmap_bytes
    try:
        return RelationSet(dims, s, np.stack(planes[:4]).astype(np.float64), planes[4])
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
