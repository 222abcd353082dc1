"""Differentiable scene-completion losses with analytic gradients.

All losses ignore UNKNOWN-labelled voxels entirely: those voxels appear in no
sum, so perturbing predictions there changes nothing, bit for bit. Gradients
are returned with respect to the per-voxel logits (softmax inputs) so the
pieces compose into one total objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import crp
from .errors import DegenerateInput, ShapeError
from .flosp import ProjectionTable, project_centroids
from .grid import (
    UNKNOWN,
    CameraModel,
    ClassWeights,
    LogitGrid,
    ProbGrid,
    SemanticGrid,
    class_frequencies,
    class_weights,
)

EPS = 1e-12

FRUSTUM_NONE = -1


def softmax(logits: LogitGrid) -> ProbGrid:
    """Row-wise softmax, max-subtracted for stability."""
    z = logits.values
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return ProbGrid(logits.dims, logits.class_count, e / e.sum(axis=1, keepdims=True))


def softmax_chain(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a probability-space gradient back through the softmax Jacobian."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def _check_pair(probs: ProbGrid, labels: SemanticGrid) -> None:
    if probs.dims != labels.dims or probs.class_count != labels.class_count:
        raise ShapeError(
            f"probs ({probs.dims}, {probs.class_count} classes) does not match "
            f"labels ({labels.dims}, {labels.class_count} classes)"
        )


def weighted_cross_entropy(
    probs: ProbGrid, labels: SemanticGrid, weights: ClassWeights
):
    """Class-weighted mean negative log-likelihood over defined voxels.

    Returns (loss, gradient w.r.t. logits); the gradient assumes probs came
    from a softmax over those logits.
    """
    _check_pair(probs, labels)
    if weights.weights.shape != (probs.class_count,):
        raise ShapeError("weight vector length does not match class count")
    defined = np.flatnonzero(labels.labels != UNKNOWN)
    if defined.size == 0:
        raise DegenerateInput("cross-entropy undefined: no defined voxels")
    y = labels.labels[defined].astype(np.int64)
    w = weights.weights[y]
    w_total = w.sum()
    p_true = np.clip(probs.values[defined, y], EPS, None)
    loss = float((w * -np.log(p_true)).sum() / w_total)

    grad = np.zeros_like(probs.values)
    grad[defined] = (w / w_total)[:, None] * probs.values[defined]
    grad[defined, y] -= w / w_total
    return loss, grad


def _scal_core(p: np.ndarray, y: np.ndarray, classes) -> tuple[float, np.ndarray]:
    """Precision/recall/specificity log terms over one defined-voxel batch.

    Returns (loss, grad in probability space over that batch). Terms with a
    zero denominator are skipped; the remainder is averaged so that a perfect
    prediction scores exactly 0.
    """
    included = 0
    total = 0.0
    grad = np.zeros_like(p)
    for c in classes:
        is_c = y == c
        p_c = p[:, c]
        num = float(p_c[is_c].sum())
        den = float(p_c.sum())
        n_c = int(is_c.sum())
        n_not = p.shape[0] - n_c
        spec_num = float((1.0 - p_c)[~is_c].sum())

        if den > 0:  # precision
            ratio = num / den
            total += np.log(max(ratio, EPS))
            if ratio > EPS:
                grad[is_c, c] += 1.0 / num
                grad[:, c] -= 1.0 / den
            included += 1
        if n_c > 0:  # recall
            ratio = num / n_c
            total += np.log(max(ratio, EPS))
            if ratio > EPS:
                grad[is_c, c] += 1.0 / num
            included += 1
        if n_not > 0:  # specificity
            ratio = spec_num / n_not
            total += np.log(max(ratio, EPS))
            if ratio > EPS:
                grad[~is_c, c] -= 1.0 / spec_num
            included += 1

    if included == 0:
        raise DegenerateInput("affinity loss undefined: every term degenerate")
    scale = -3.0 / included
    return scale * total, scale * grad


def scal_loss(probs: ProbGrid, labels: SemanticGrid, include_free: bool = True):
    """Scene-class affinity loss: negated average of log precision, recall,
    and specificity per class, over defined voxels.

    With include_free=False the free class contributes no terms. Returns
    (loss, gradient w.r.t. logits).
    """
    _check_pair(probs, labels)
    defined = np.flatnonzero(labels.labels != UNKNOWN)
    if defined.size == 0:
        raise DegenerateInput("affinity loss undefined: no defined voxels")
    p = probs.values[defined]
    y = labels.labels[defined].astype(np.int64)
    start = 0 if include_free else 1
    loss, g_batch = _scal_core(p, y, range(start, probs.class_count))
    g_p = np.zeros_like(probs.values)
    g_p[defined] = g_batch
    return loss, softmax_chain(probs.values, g_p)


def scal_geo(probs: ProbGrid, geo_labels: SemanticGrid):
    """Affinity loss on the binary free/occupied collapse (2-class inputs)."""
    if probs.class_count != 2 or geo_labels.class_count != 2:
        raise ShapeError("scal_geo expects 2-class probabilities and labels")
    return scal_loss(probs, geo_labels)


def scal_geo_from_semantic(probs: ProbGrid, labels: SemanticGrid):
    """Geometric affinity loss derived from semantic probabilities.

    Occupancy probability is 1 - p_free. Returns (loss, gradient w.r.t. the
    semantic logits).
    """
    _check_pair(probs, labels)
    defined = np.flatnonzero(labels.labels != UNKNOWN)
    if defined.size == 0:
        raise DegenerateInput("affinity loss undefined: no defined voxels")
    p_free = probs.values[defined, 0]
    p_geo = np.stack([p_free, 1.0 - p_free], axis=1)
    y_geo = (labels.labels[defined] != 0).astype(np.int64)
    loss, g_geo = _scal_core(p_geo, y_geo, range(2))
    g_p = np.zeros_like(probs.values)
    g_p[defined, 0] = g_geo[:, 0] - g_geo[:, 1]
    return loss, softmax_chain(probs.values, g_p)


@dataclass(frozen=True)
class FrustumAssignment:
    """Per-voxel local-frustum index on an ell x ell image patch grid.

    index is FRUSTUM_NONE for voxels whose projection is invalid.
    """

    ell: int
    index: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "index", np.asarray(self.index, dtype=np.int64))
        if self.ell < 1:
            raise ValueError("ell must be >= 1")
        inside = self.index != FRUSTUM_NONE
        if ((self.index[inside] < 0) | (self.index[inside] >= self.ell**2)).any():
            raise ValueError("frustum indices out of range")


def frustum_assignment_from_table(
    table: ProjectionTable, width: int, height: int, ell: int
) -> FrustumAssignment:
    col = np.floor(table.u / (width / ell)).astype(np.int64)
    row = np.floor(table.v / (height / ell)).astype(np.int64)
    index = np.where(table.valid, row * ell + col, FRUSTUM_NONE)
    return FrustumAssignment(ell, index)


def frustum_assignment(
    camera: CameraModel, grid: SemanticGrid, ell: int
) -> FrustumAssignment:
    """Assign each voxel to the image patch its centroid projects into."""
    table = project_centroids(camera, grid)
    return frustum_assignment_from_table(table, camera.width, camera.height, ell)


def frustum_proportion_loss(
    probs: ProbGrid, labels: SemanticGrid, assign: FrustumAssignment
):
    """Sum over frustums of KL(ground-truth class proportions || predicted).

    The KL runs only over classes present in each frustum's ground truth;
    predicted proportions are normalized over all classes so leaked mass is
    penalized. Empty frustums contribute zero. Returns (loss, gradient w.r.t.
    logits).
    """
    _check_pair(probs, labels)
    if assign.index.shape != labels.labels.shape:
        raise ShapeError("frustum assignment does not match the grid")
    defined = labels.labels != UNKNOWN
    loss = 0.0
    g_p = np.zeros_like(probs.values)
    for k in range(assign.ell**2):
        members = np.flatnonzero((assign.index == k) & defined)
        if members.size == 0:
            continue
        y = labels.labels[members].astype(np.int64)
        counts = np.bincount(y, minlength=probs.class_count).astype(np.float64)
        p_true = counts / members.size
        s = probs.values[members].sum(axis=0)
        t = float(s.sum())
        p_hat = s / t
        active = (counts > 0) & (p_hat > EPS)
        clamped = (counts > 0) & ~active
        loss += float(
            (p_true[active] * (np.log(p_true[active]) - np.log(p_hat[active]))).sum()
        )
        loss += float((p_true[clamped] * (np.log(p_true[clamped]) - np.log(EPS))).sum())
        # dL/dS_c = -[c active] p_true_c / (p_hat_c T) + sum_active(p_true) / T
        ds = np.full(probs.class_count, p_true[active].sum() / t)
        ds[active] -= p_true[active] / (p_hat[active] * t)
        ds[clamped] = 0.0  # clamp is flat; its normalizer term vanishes too
        g_p[members] += ds[None, :]
    return loss, softmax_chain(probs.values, g_p)


@dataclass(frozen=True)
class LossReport:
    """Total objective value, per-component values, and gradients."""

    total: float
    components: dict
    gradient: np.ndarray
    relation_gradient: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {"total": self.total, "components": dict(self.components)}


@dataclass
class TotalLossConfig:
    ell: int = 2
    supervoxel: int = 2
    relation_logits: np.ndarray | None = None
    relation_predictions: "crp.RelationSet | None" = None
    use_ce: bool = True
    use_rel: bool = True
    use_scal_sem: bool = True
    use_scal_geo: bool = True
    use_fp: bool = True
    include_free_in_scal: bool = True
    weights: ClassWeights | None = None


def total_loss(
    logits: LogitGrid,
    labels: SemanticGrid,
    camera: CameraModel,
    config: TotalLossConfig,
) -> LossReport:
    """Unweighted sum of the enabled loss components with summed gradients.

    The relation term is included only when relation predictions (or raw
    relation logits) are supplied in the config.
    """
    probs = softmax(logits)
    components: dict[str, float] = {}
    grad = np.zeros_like(logits.values)
    relation_gradient = None

    if config.use_ce:
        w = config.weights or class_weights(class_frequencies(labels))
        value, g = weighted_cross_entropy(probs, labels, w)
        components["ce"] = value
        grad += g
    if config.use_rel and (
        config.relation_logits is not None or config.relation_predictions is not None
    ):
        truth = crp.build_relation_ground_truth(labels, config.supervoxel)
        if config.relation_logits is not None:
            value, relation_gradient = crp.relation_loss_from_logits(
                config.relation_logits, truth
            )
        else:
            value, relation_gradient = crp.relation_loss(
                config.relation_predictions, truth
            )
        components["rel"] = value
    if config.use_scal_sem:
        value, g = scal_loss(probs, labels, include_free=config.include_free_in_scal)
        components["scal_sem"] = value
        grad += g
    if config.use_scal_geo:
        value, g = scal_geo_from_semantic(probs, labels)
        components["scal_geo"] = value
        grad += g
    if config.use_fp:
        assign = frustum_assignment(camera, labels, config.ell)
        value, g = frustum_proportion_loss(probs, labels, assign)
        components["fp"] = value
        grad += g

    total = float(sum(components.values()))
    return LossReport(total, components, grad, relation_gradient)
