"""Deterministic synthetic scenes, ray-cast visibility, and a loss-descent demo.

Scenes are built from a 64-bit linear congruential generator (Knuth's MMIX
multiplier, see Lcg64) so the same spec yields bit-identical grids on every
platform. The ray caster emulates sparse real-world ground truth: occupied
voxels hidden behind a first hit can be blanked to UNKNOWN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, SpecError
from .flosp import FeaturePyramid
from .grid import UNKNOWN, CameraModel, LogitGrid, ProbGrid, SemanticGrid
from .losses import LossReport, TotalLossConfig, softmax, total_loss

_MASK64 = (1 << 64) - 1


class Lcg64:
    """64-bit LCG: state <- state * 6364136223846793005 + 1442695040888963407.

    Draws use the top 32 bits of each new state. Pinned here (and in the
    tests) so scenes reproduce bit-exactly everywhere.
    """

    MULTIPLIER = 6364136223846793005
    INCREMENT = 1442695040888963407

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u32(self) -> int:
        self.state = (self.state * self.MULTIPLIER + self.INCREMENT) & _MASK64
        return self.state >> 32

    def below(self, n: int) -> int:
        """Uniform draw in [0, n) by modulo; fine for scene-synthesis purposes."""
        return self.next_u32() % n


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to rebuild a synthetic scene bit-exactly."""

    seed: int = 0
    dims: tuple[int, int, int] = (8, 8, 4)
    voxel_size: float = 0.25
    class_count: int = 5
    n_boxes: int = 2
    camera_position: tuple[float, float, float] | None = None
    camera_look_at: tuple[float, float, float] | None = None
    focal: float = 64.0
    image_size: tuple[int, int] = (64, 64)


def look_at_extrinsic(position, target) -> np.ndarray:
    """World-to-camera transform with +z forward, +x right, +y down."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise SpecError("camera position coincides with its look-at target")
    forward = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:  # looking straight up/down
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    ext = np.eye(4)
    ext[:3, :3] = r
    ext[:3, 3] = -r @ position
    return ext


def generate_scene(spec: SceneSpec) -> tuple[SemanticGrid, CameraModel]:
    """Ground plane plus random boxes, viewed by a camera in front of the grid."""
    dx, dy, dz = spec.dims
    if spec.n_boxes > 0:
        if dz < 2:
            raise SpecError("boxes need at least one layer above the ground plane")
        if spec.class_count < 3:
            raise SpecError("boxes need a semantic class besides the ground class")
    if spec.class_count < 2:
        raise SpecError("need at least the free and ground classes")

    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[:, :, 0] = 1  # ground plane

    rng = Lcg64(spec.seed)
    for _ in range(spec.n_boxes):
        sx = 1 + rng.below(max(1, dx // 2))
        sy = 1 + rng.below(max(1, dy // 2))
        sz = 1 + rng.below(max(1, (dz - 1) // 2 + 1))
        sz = min(sz, dz - 1)
        x0 = rng.below(dx - sx + 1)
        y0 = rng.below(dy - sy + 1)
        z0 = 1 + rng.below(dz - sz)
        cls = 2 + rng.below(spec.class_count - 2)
        labels[x0 : x0 + sx, y0 : y0 + sy, z0 : z0 + sz] = cls

    grid = SemanticGrid(
        dims=spec.dims,
        origin=(0.0, 0.0, 0.0),
        voxel_size=spec.voxel_size,
        class_count=spec.class_count,
        labels=labels.ravel(order="F"),
    )

    extent = np.array(spec.dims) * spec.voxel_size
    center = extent / 2.0
    position = spec.camera_position
    if position is None:
        position = (center[0], -1.25 * extent[1], extent[2])
    target = spec.camera_look_at if spec.camera_look_at is not None else tuple(center)
    width, height = spec.image_size
    camera = CameraModel(
        fx=spec.focal,
        fy=spec.focal,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        extrinsic=look_at_extrinsic(position, target),
    )
    return grid, camera


# ---------------------------------------------------------------------------
# ray-cast visibility


def _camera_rays(camera: CameraModel):
    r = camera.extrinsic[:3, :3]
    t = camera.extrinsic[:3, 3]
    origin = -r.T @ t
    u = np.arange(camera.width) + 0.5
    v = np.arange(camera.height) + 0.5
    uu, vv = np.meshgrid(u, v)  # (H, W)
    dirs_cam = np.stack(
        [(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)],
        axis=-1,
    )
    dirs = dirs_cam @ r  # rotate back to world: R^T d
    return origin, dirs


def _march(origin, direction, dims, voxel_size, labels3d, visible):
    """Amanatides-Woo grid traversal; returns the first occupied class or 0.

    Marks every traversed voxel up to and including the first hit in
    `visible`.
    """
    dx, dy, dz = dims
    lo = np.zeros(3)
    hi = np.array(dims, dtype=np.float64) * voxel_size

    # slab clip of [t0, t1] against the grid box
    t0, t1 = 0.0, math.inf
    for a in range(3):
        d = direction[a]
        if d == 0.0:
            if origin[a] < lo[a] or origin[a] >= hi[a]:
                return 0
            continue
        ta = (lo[a] - origin[a]) / d
        tb = (hi[a] - origin[a]) / d
        ta, tb = min(ta, tb), max(ta, tb)
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t0 > t1:
        return 0

    eps = 1e-9
    start = origin + (t0 + eps) * direction
    cell = np.floor(start / voxel_size).astype(np.int64)
    cell = np.clip(cell, 0, np.array(dims) - 1)

    step = np.sign(direction).astype(np.int64)
    t_delta = np.where(direction != 0, voxel_size / np.abs(direction), math.inf)
    next_boundary = (cell + (step > 0)) * voxel_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = np.where(
            direction != 0, (next_boundary - origin) / direction, math.inf
        )

    while True:
        i, j, k = cell
        if not (0 <= i < dx and 0 <= j < dy and 0 <= k < dz):
            return 0
        visible[i, j, k] = True
        cls = labels3d[i, j, k]
        if cls != 0 and cls != UNKNOWN:
            return int(cls)
        axis = int(np.argmin(t_max))
        if t_max[axis] > t1:
            return 0
        cell[axis] += step[axis]
        t_max[axis] += t_delta[axis]


def raycast_visibility(
    grid: SemanticGrid, camera: CameraModel
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel first-hit semantic image plus a per-voxel visibility mask.

    A voxel is visible iff some pixel ray reaches it before (or as) its first
    occupied hit. Returns (image of shape (H, W), flat boolean mask of N).
    """
    labels3d = grid.labels.reshape(grid.dims, order="F")
    visible = np.zeros(grid.dims, dtype=bool)
    image = np.zeros((camera.height, camera.width), dtype=np.uint8)
    origin, dirs = _camera_rays(camera)
    for vv in range(camera.height):
        for uu in range(camera.width):
            image[vv, uu] = _march(
                origin, dirs[vv, uu], grid.dims, grid.voxel_size, labels3d, visible
            )
    return image, visible.ravel(order="F")


def mask_occluded(grid: SemanticGrid, camera: CameraModel) -> SemanticGrid:
    """Blank occluded occupied voxels to UNKNOWN, emulating sparse ground truth."""
    _, visible = raycast_visibility(grid, camera)
    occupied = (grid.labels != 0) & (grid.labels != UNKNOWN)
    labels = np.where(occupied & ~visible, UNKNOWN, grid.labels).astype(np.uint8)
    return SemanticGrid(grid.dims, grid.origin, grid.voxel_size, grid.class_count, labels)


# ---------------------------------------------------------------------------
# 2D feature rendering


def render_feature_pyramid(
    image: np.ndarray, class_count: int, scales, channels: int
) -> FeaturePyramid:
    """One-hot class features at scale 1, area-averaged at coarser scales."""
    if channels < class_count:
        raise SpecError(
            f"need at least {class_count} channels for a one-hot encoding"
        )
    image = np.asarray(image)
    h, w = image.shape
    base = np.zeros((h, w, channels), dtype=np.float64)
    rows, cols = np.indices((h, w))
    base[rows, cols, image.astype(np.int64)] = 1.0

    entries = []
    for s in sorted(int(s) for s in scales):
        if s == 1:
            entries.append((1, base))
            continue
        hs = math.ceil(h / s)
        ws = math.ceil(w / s)
        coarse = np.zeros((hs, ws, channels), dtype=np.float64)
        for bi in range(hs):
            for bj in range(ws):
                block = base[bi * s : (bi + 1) * s, bj * s : (bj + 1) * s]
                coarse[bi, bj] = block.mean(axis=(0, 1))
        entries.append((s, coarse))
    return FeaturePyramid(w, h, tuple(entries))


# ---------------------------------------------------------------------------
# logit-descent demo


@dataclass
class OptimizeConfig:
    steps: int = 500
    step_size: float = 100.0
    ell: int = 2
    supervoxel: int = 2
    use_ce: bool = True
    use_rel: bool = True
    use_scal_sem: bool = True
    use_scal_geo: bool = True
    use_fp: bool = True
    max_halvings: int = 20


def optimize_logits(
    gt: SemanticGrid, camera: CameraModel, config: OptimizeConfig
) -> tuple[ProbGrid, list[dict]]:
    """Plain gradient descent on the total loss with backtracking line search.

    Logits start at zero (uniform probabilities); when the relation term is
    enabled a second block of relation logits is optimized jointly. The step
    is halved (up to max_halvings) whenever the trial loss increases, so the
    recorded trace is non-increasing. Returns the final probabilities and the
    per-step component trace.
    """
    if config.step_size <= 0:
        raise SpecError("step_size must be positive")
    n = gt.voxel_count
    c = gt.class_count
    z = np.zeros((n, c))
    rel_logits = None
    if config.use_rel:
        s3 = config.supervoxel**3
        rel_logits = np.zeros((4, n, n // s3))

    def evaluate(zv, rv) -> LossReport:
        cfg = TotalLossConfig(
            ell=config.ell,
            supervoxel=config.supervoxel,
            relation_logits=rv,
            use_ce=config.use_ce,
            use_rel=config.use_rel,
            use_scal_sem=config.use_scal_sem,
            use_scal_geo=config.use_scal_geo,
            use_fp=config.use_fp,
        )
        return total_loss(LogitGrid(gt.dims, c, zv), gt, camera, cfg)

    report = evaluate(z, rel_logits)
    if not math.isfinite(report.total):
        raise NumericalError("non-finite initial loss", step=0)
    trace = [{"step": 0, "total": report.total, "components": dict(report.components)}]

    for step in range(1, config.steps + 1):
        lr = config.step_size
        accepted = None
        for _ in range(config.max_halvings + 1):
            z_try = z - lr * report.gradient
            r_try = None
            if rel_logits is not None and report.relation_gradient is not None:
                r_try = rel_logits - lr * report.relation_gradient
            elif rel_logits is not None:
                r_try = rel_logits
            trial = evaluate(z_try, r_try)
            if not math.isfinite(trial.total):
                raise NumericalError("non-finite loss during descent", step=step)
            if trial.total <= report.total:
                accepted = (z_try, r_try, trial)
                break
            lr /= 2.0
        if accepted is None:
            # no decrease found: keep the iterate, record the stalled value
            trace.append(
                {
                    "step": step,
                    "total": report.total,
                    "components": dict(report.components),
                }
            )
            continue
        z, rel_logits, report = accepted
        trace.append(
            {"step": step, "total": report.total, "components": dict(report.components)}
        )

    probs = softmax(LogitGrid(gt.dims, c, z))
    return probs, trace
