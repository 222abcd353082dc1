"""Central finite-difference verification of every analytic loss gradient.

Shared by the test suite and the `ssckit gradcheck` CLI command. Instances
are kept tiny (grids up to 4x4x4, at most 5 classes) so a full sweep over
every logit stays fast in double precision.
"""

from __future__ import annotations

import numpy as np

from . import crp, losses
from .grid import (
    UNKNOWN,
    CameraModel,
    LogitGrid,
    SemanticGrid,
    class_frequencies,
    class_weights,
)
from .synth import look_at_extrinsic

DEFAULT_STEP = 1e-5

LOSS_NAMES = ("ce", "rel", "scal_sem", "scal_geo", "fp", "total")


def central_difference(f, x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Two-sided difference quotient of scalar f at every entry of x."""
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + h
        hi = f(x)
        xf[i] = old - h
        lo = f(x)
        xf[i] = old
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(
        float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12
    )
    return float(np.linalg.norm(analytic - numeric)) / scale


def random_instance(rng: np.random.Generator):
    """Small random labelled scene with UNKNOWN holes plus random logits."""
    dims = tuple(int(rng.choice([2, 4])) for _ in range(3))
    class_count = int(rng.integers(2, 6))
    n = dims[0] * dims[1] * dims[2]
    labels = rng.integers(0, class_count, size=n).astype(np.uint8)
    holes = rng.random(n) < 0.2
    labels[holes] = UNKNOWN
    if (labels == UNKNOWN).all():
        labels[0] = 0
    grid = SemanticGrid(dims, (0.0, 0.0, 0.0), 0.25, class_count, labels)
    center = np.array(dims) * 0.25 / 2.0
    position = center + np.array([0.1, -1.5, 0.6]) + rng.uniform(-0.2, 0.2, size=3)
    camera = CameraModel(
        fx=48.0,
        fy=48.0,
        cx=24.0,
        cy=24.0,
        width=48,
        height=48,
        extrinsic=look_at_extrinsic(position, center),
    )
    logits = rng.uniform(-2.0, 2.0, size=(n, class_count))
    s = 2
    rel_logits = rng.uniform(-2.0, 2.0, size=(4, n, n // s**3))
    return grid, camera, logits, rel_logits, s


def _loss_fns(name, grid, camera, rel_logits, supervoxel):
    """Builds value/gradient closures over the logit block for one loss."""
    weights = class_weights(class_frequencies(grid))
    ell = 2

    def as_probs(z):
        return losses.softmax(LogitGrid(grid.dims, grid.class_count, z))

    if name == "ce":
        def full(z):
            return losses.weighted_cross_entropy(as_probs(z), grid, weights)
    elif name == "scal_sem":
        def full(z):
            return losses.scal_loss(as_probs(z), grid)
    elif name == "scal_geo":
        def full(z):
            return losses.scal_geo_from_semantic(as_probs(z), grid)
    elif name == "fp":
        assign = losses.frustum_assignment(camera, grid, ell)
        def full(z):
            return losses.frustum_proportion_loss(as_probs(z), grid, assign)
    elif name == "total":
        cfg = losses.TotalLossConfig(
            ell=ell, supervoxel=supervoxel, relation_logits=rel_logits, weights=weights
        )
        def full(z):
            report = losses.total_loss(
                LogitGrid(grid.dims, grid.class_count, z), grid, camera, cfg
            )
            return report.total, report.gradient
    else:
        raise ValueError(name)
    return full


def check_loss(name: str, rng: np.random.Generator, h: float = DEFAULT_STEP) -> float:
    """Max relative error between analytic and numeric gradient, one instance."""
    grid, camera, logits, rel_logits, s = random_instance(rng)

    if name == "rel":
        truth = crp.build_relation_ground_truth(grid, s)
        _, analytic = crp.relation_loss_from_logits(rel_logits, truth)
        numeric = central_difference(
            lambda r: crp.relation_loss_from_logits(r, truth)[0], rel_logits, h
        )
        return relative_error(analytic, numeric)

    full = _loss_fns(name, grid, camera, rel_logits, s)
    _, analytic = full(logits)
    numeric = central_difference(lambda z: full(z)[0], logits, h)
    err = relative_error(analytic, numeric)

    if name == "total":
        # the relation block is part of the total objective too
        truth = crp.build_relation_ground_truth(grid, s)
        _, rel_analytic = crp.relation_loss_from_logits(rel_logits, truth)
        rel_numeric = central_difference(
            lambda r: crp.relation_loss_from_logits(r, truth)[0], rel_logits, h
        )
        err = max(err, relative_error(rel_analytic, rel_numeric))
    return err


def run(seed: int, trials: int = 20, h: float = DEFAULT_STEP) -> dict:
    """Per-loss worst relative error over `trials` random instances."""
    results = {}
    for name in LOSS_NAMES:
        rng = np.random.default_rng(seed)
        results[name] = max(check_loss(name, rng, h) for _ in range(trials))
    return results
