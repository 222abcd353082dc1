"""Gradient-verified kernels for monocular semantic scene completion."""

from .errors import (
    DegenerateInput,
    FormatError,
    NumericalError,
    ShapeError,
    SpecError,
    SSCKitError,
)
from .grid import (
    UNKNOWN,
    CameraModel,
    ClassWeights,
    LogitGrid,
    ProbGrid,
    SemanticGrid,
    class_frequencies,
    class_weights,
    derive_geometric_labels,
    load_camera,
    load_grid,
    load_probs,
    save_camera,
    save_grid,
    save_probs,
)
from .flosp import (
    FeaturePyramid,
    ProjectionTable,
    PyramidShape,
    flosp_adjoint,
    flosp_forward,
    load_pyramid,
    project_centroids,
    save_pyramid,
)
from .crp import (
    RelationKind,
    RelationSet,
    build_relation_ground_truth,
    pair_relation,
    relation_aggregate,
    relation_loss,
    relation_loss_from_logits,
    supervoxel_pool,
)
from .losses import (
    FrustumAssignment,
    LossReport,
    TotalLossConfig,
    frustum_assignment,
    frustum_proportion_loss,
    scal_geo,
    scal_geo_from_semantic,
    scal_loss,
    softmax,
    total_loss,
    weighted_cross_entropy,
)
from .metrics import ConfusionMatrix, accumulate, iou_report, scope_masks
from .synth import (
    Lcg64,
    OptimizeConfig,
    SceneSpec,
    generate_scene,
    mask_occluded,
    optimize_logits,
    raycast_visibility,
    render_feature_pyramid,
)

__version__ = "0.1.0"
