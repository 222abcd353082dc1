import numpy as np
import pytest

from ssckit import (
    UNKNOWN,
    CameraModel,
    ConfusionMatrix,
    DegenerateInput,
    SemanticGrid,
    accumulate,
    iou_report,
    scope_masks,
)
from ssckit.synth import SceneSpec, generate_scene, look_at_extrinsic


def make_grid(labels, dims=None, class_count=3):
    labels = np.asarray(labels, dtype=np.uint8)
    if dims is None:
        dims = (labels.size, 1, 1)
    return SemanticGrid(dims, (0.0, 0.0, 0.0), 0.5, class_count, labels)


class TestScopeMasks:
    def test_partition(self):
        grid, camera = generate_scene(SceneSpec(seed=1))
        masks = scope_masks(camera, grid)
        assert masks["whole"].all()
        assert np.array_equal(masks["in_fov"] | masks["out_fov"], masks["whole"])
        assert not (masks["in_fov"] & masks["out_fov"]).any()

    def test_everything_behind_camera(self):
        grid = make_grid([0], dims=(1, 1, 1))
        # camera sits past the voxel looking away (+y), so z_cam < 0
        camera = CameraModel(
            10, 10, 5, 5, 10, 10, look_at_extrinsic([0.25, 5.0, 0.25], [0.25, 10.0, 0.25])
        )
        masks = scope_masks(camera, grid)
        assert not masks["in_fov"].any()

    def test_single_voxel_in_front(self):
        grid = make_grid([0], dims=(1, 1, 1))
        camera = CameraModel(
            10, 10, 5, 5, 10, 10, look_at_extrinsic([0.25, -2.0, 0.25], [0.25, 0.25, 0.25])
        )
        assert scope_masks(camera, grid)["in_fov"].all()


class TestAccumulate:
    def test_perfect_is_diagonal(self):
        gt = make_grid([0, 1, 2, 1])
        cm = accumulate(gt, gt, np.ones(4, bool))
        assert np.array_equal(cm.counts, np.diag([1, 2, 1]))

    def test_all_unknown_gt(self):
        gt = make_grid([UNKNOWN] * 3)
        pred = make_grid([0, 1, 2])
        cm = accumulate(pred, gt, np.ones(3, bool))
        assert not cm.counts.any()

    def test_direct_tally(self):
        gt = make_grid([0, 1, 1], class_count=2)
        pred = make_grid([0, 1, 0], class_count=2)
        cm = accumulate(pred, gt, np.ones(3, bool))
        assert cm.counts[0, 0] == 1
        assert cm.counts[1, 1] == 1
        assert cm.counts[1, 0] == 1
        assert cm.counts.sum() == 3

    def test_scope_restriction(self):
        gt = make_grid([0, 1, 1], class_count=2)
        pred = make_grid([0, 1, 0], class_count=2)
        cm = accumulate(pred, gt, np.array([True, True, False]))
        assert cm.counts.sum() == 2


class TestIouReport:
    def test_perfect(self):
        cm = ConfusionMatrix(np.diag([4, 3, 2]))
        report = iou_report(cm)
        assert report["per_class_iou"] == [1.0, 1.0, 1.0]
        assert report["miou"] == 1.0
        assert report["sc_iou"] == 1.0

    def test_all_free_prediction_zero_sc_iou(self):
        gt = make_grid([1, 1, 0, 0], class_count=2)
        pred = make_grid([0, 0, 0, 0], class_count=2)
        report = iou_report(accumulate(pred, gt, np.ones(4, bool)))
        assert report["sc_iou"] == 0.0

    def test_three_voxel_example(self):
        gt = make_grid([0, 1, 1], class_count=2)
        pred = make_grid([0, 1, 0], class_count=2)
        report = iou_report(accumulate(pred, gt, np.ones(3, bool)))
        assert report["per_class_iou"][1] == pytest.approx(0.5)
        assert report["sc_iou"] == pytest.approx(0.5)

    def test_absent_classes_excluded_from_miou(self):
        cm = ConfusionMatrix(np.diag([5, 2, 0]))
        report = iou_report(cm)
        assert np.isnan(report["per_class_iou"][2])
        assert report["miou"] == 1.0

    def test_empty_degenerate(self):
        with pytest.raises(DegenerateInput):
            iou_report(ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    def test_semantic_permutation_invariance(self):
        rng = np.random.default_rng(0)
        gt_labels = rng.integers(0, 4, size=27).astype(np.uint8)
        pred_labels = rng.integers(0, 4, size=27).astype(np.uint8)
        gt = make_grid(gt_labels, dims=(3, 3, 3), class_count=4)
        pred = make_grid(pred_labels, dims=(3, 3, 3), class_count=4)
        base = iou_report(accumulate(pred, gt, np.ones(27, bool)))

        perm = np.array([0, 3, 1, 2])  # permute semantic classes, keep free
        gt_p = make_grid(perm[gt_labels], dims=(3, 3, 3), class_count=4)
        pred_p = make_grid(perm[pred_labels], dims=(3, 3, 3), class_count=4)
        permuted = iou_report(accumulate(pred_p, gt_p, np.ones(27, bool)))
        assert permuted["miou"] == pytest.approx(base["miou"], rel=1e-12)
        assert permuted["sc_iou"] == pytest.approx(base["sc_iou"], rel=1e-12)


class TestScopeAdditivity:
    @pytest.mark.parametrize("seed", range(5))
    def test_in_plus_out_equals_whole(self, seed):
        grid, camera = generate_scene(SceneSpec(seed=seed, n_boxes=3))
        rng = np.random.default_rng(seed)
        pred_labels = rng.integers(0, grid.class_count, size=grid.voxel_count)
        pred = SemanticGrid(
            grid.dims, grid.origin, grid.voxel_size, grid.class_count,
            pred_labels.astype(np.uint8),
        )
        masks = scope_masks(camera, grid)
        combined = accumulate(pred, grid, masks["in_fov"]) + accumulate(
            pred, grid, masks["out_fov"]
        )
        whole = accumulate(pred, grid, masks["whole"])
        assert np.array_equal(combined.counts, whole.counts)
