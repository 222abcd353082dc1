import numpy as np
import pytest

from ssckit import (
    UNKNOWN,
    DegenerateInput,
    RelationKind,
    RelationSet,
    SemanticGrid,
    ShapeError,
    build_relation_ground_truth,
    pair_relation,
    relation_aggregate,
    relation_loss,
    relation_loss_from_logits,
    supervoxel_pool,
)
from ssckit.crp import load_relations, save_relations


def make_grid(labels, dims, class_count=4):
    return SemanticGrid(dims, (0.0, 0.0, 0.0), 1.0, class_count, labels)


def oracle_relations(grid, s):
    """All-pairs enumeration, independent of the vectorized implementation.

    For every voxel and every supervoxel, collect the distinct relations over
    defined pairs by walking the raw label array with index arithmetic only.
    """
    dx, dy, dz = grid.dims
    n = grid.voxel_count
    labels = grid.labels
    sx, sy = dx // s, dy // s
    j_count = n // s**3

    members = [[] for _ in range(j_count)]
    for k in range(dz):
        for j in range(dy):
            for i in range(dx):
                sv = (i // s) + sx * ((j // s) + sy * (k // s))
                members[sv].append(i + dx * (j + dy * k))

    mats = np.zeros((4, n, j_count))
    mask = np.zeros((n, j_count), dtype=bool)
    for v in range(n):
        a = int(labels[v])
        if a == UNKNOWN:
            continue
        for sv in range(j_count):
            kinds = set()
            for u in members[sv]:
                b = int(labels[u])
                if b == UNKNOWN:
                    continue
                if a == 0 and b == 0:
                    kinds.add(0)
                elif a == 0 or b == 0:
                    kinds.add(1)
                elif a == b:
                    kinds.add(2)
                else:
                    kinds.add(3)
            if kinds:
                mask[v, sv] = True
                for m in kinds:
                    mats[m, v, sv] = 1.0
    return mats, mask


class TestPairRelation:
    def test_both_free(self):
        assert pair_relation(0, 0) is RelationKind.F_S

    def test_one_free(self):
        assert pair_relation(0, 2) is RelationKind.F_D
        assert pair_relation(2, 0) is RelationKind.F_D

    def test_occupied(self):
        assert pair_relation(2, 3) is RelationKind.O_D
        assert pair_relation(2, 2) is RelationKind.O_S

    def test_unknown_rejected(self):
        with pytest.raises(ValueError):
            pair_relation(UNKNOWN, 0)


class TestGroundTruth:
    def test_all_free_single_supervoxel(self):
        grid = make_grid([0] * 8, (2, 2, 2))
        rels = build_relation_ground_truth(grid, 2)
        assert (rels.matrices[RelationKind.F_S] == 1).all()
        assert not rels.matrices[[RelationKind.F_D, RelationKind.O_S, RelationKind.O_D]].any()
        assert rels.mask.all()

    def test_half_free_half_car(self):
        labels = np.array([0, 0, 0, 0, 2, 2, 2, 2], dtype=np.uint8)
        grid = make_grid(labels, (2, 2, 2))
        rels = build_relation_ground_truth(grid, 2)
        free_rows = labels == 0
        assert (rels.matrices[RelationKind.F_S][free_rows] == 1).all()
        assert (rels.matrices[RelationKind.F_D][free_rows] == 1).all()
        assert not rels.matrices[RelationKind.O_S][free_rows].any()
        car_rows = labels == 2
        assert (rels.matrices[RelationKind.F_D][car_rows] == 1).all()
        assert (rels.matrices[RelationKind.O_S][car_rows] == 1).all()
        assert not rels.matrices[RelationKind.O_D][car_rows].any()

    def test_all_unknown(self):
        grid = make_grid([UNKNOWN] * 8, (2, 2, 2))
        rels = build_relation_ground_truth(grid, 2)
        assert not rels.mask.any()
        assert not rels.matrices.any()

    def test_non_dividing_supervoxel(self):
        with pytest.raises(ShapeError):
            build_relation_ground_truth(make_grid([0] * 8, (2, 2, 2)), 3)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(int(rng.choice([2, 4])) for _ in range(3))
        n = dims[0] * dims[1] * dims[2]
        labels = rng.integers(0, 4, size=n).astype(np.uint8)
        labels[rng.random(n) < 0.25] = UNKNOWN
        grid = make_grid(labels, dims)
        s = int(rng.choice([1, 2]))
        rels = build_relation_ground_truth(grid, s)
        mats, mask = oracle_relations(grid, s)
        assert np.array_equal(rels.matrices, mats)
        assert np.array_equal(rels.mask, mask)


class TestSupervoxelPool:
    def test_constant_field(self):
        feats = np.tile([1.5, -2.0], (8, 1))
        out = supervoxel_pool(feats, (2, 2, 2), 2)
        assert out.shape == (1, 2)
        assert np.allclose(out[0], [1.5, -2.0])

    def test_single_nonzero_member(self):
        feats = np.zeros((8, 3))
        feats[5] = [8.0, 16.0, 24.0]
        out = supervoxel_pool(feats, (2, 2, 2), 2)
        assert np.allclose(out[0], [1.0, 2.0, 3.0])

    def test_s1_identity(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((8, 2))
        assert np.array_equal(supervoxel_pool(feats, (2, 2, 2), 1), feats)


def relation_set(dims, s, matrices, mask):
    return RelationSet(dims, s, matrices, mask)


class TestAggregate:
    def setup_method(self):
        self.dims = (2, 2, 2)

    def test_zero_matrices(self):
        rels = relation_set(self.dims, 2, np.zeros((4, 8, 1)), np.ones((8, 1), bool))
        out = relation_aggregate(rels, np.ones((1, 3)))
        assert out.shape == (8, 12)
        assert not out.any()

    def test_single_supervoxel_broadcast(self):
        rels = relation_set(self.dims, 2, np.ones((4, 8, 1)), np.ones((8, 1), bool))
        r = np.array([[2.0, -1.0]])
        out = relation_aggregate(rels, r)
        for m in range(4):
            assert np.allclose(out[:, 2 * m : 2 * m + 2], np.tile(r, (8, 1)))

    def test_column_selection(self):
        mats = np.zeros((4, 8, 8))
        mats[0, 3, 0] = 1.0  # voxel 3 attends supervoxel 0 only
        rels = relation_set(self.dims, 1, mats, np.ones((8, 8), bool))
        sv = np.zeros((8, 2))
        sv[0] = [5.0, 6.0]
        sv[1] = [7.0, 8.0]
        out = relation_aggregate(rels, sv)
        assert np.allclose(out[3, :2], [5.0, 6.0])

    def test_masked_entries_ignored(self):
        mats = np.ones((4, 8, 1))
        mask = np.zeros((8, 1), bool)
        rels = relation_set(self.dims, 2, mats, mask)
        out = relation_aggregate(rels, np.ones((1, 2)))
        assert not out.any()

    def test_bilinearity(self):
        rng = np.random.default_rng(9)
        dims = (4, 2, 2)
        mask = np.ones((16, 2), bool)
        m1 = rng.random((4, 16, 2))
        m2 = rng.random((4, 16, 2))
        sv = rng.standard_normal((2, 3))
        lhs = relation_aggregate(relation_set(dims, 2, m1 + 2 * m2, mask), sv)
        rhs = relation_aggregate(
            relation_set(dims, 2, m1, mask), sv
        ) + 2 * relation_aggregate(relation_set(dims, 2, m2, mask), sv)
        assert np.allclose(lhs, rhs)


def bce_oracle(pred, truth, mask):
    """Scalar-loop weighted BCE over masked entries, mean per relation."""
    eps = 1e-12
    total = 0.0
    n_masked = int(mask.sum())
    for m in range(4):
        pos = neg = 0
        for v in range(mask.shape[0]):
            for sv in range(mask.shape[1]):
                if mask[v, sv]:
                    pos += truth[m, v, sv]
                    neg += 1 - truth[m, v, sv]
        if pos == 0:
            continue
        w = neg / pos
        acc = 0.0
        for v in range(mask.shape[0]):
            for sv in range(mask.shape[1]):
                if not mask[v, sv]:
                    continue
                a = truth[m, v, sv]
                p = min(max(pred[m, v, sv], eps), 1 - eps)
                acc -= (1 - a) * np.log(1 - p) + w * a * np.log(p)
        total += acc / n_masked
    return total


class TestRelationLoss:
    def make_pair(self, seed=0):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, size=8).astype(np.uint8)
        labels[0] = UNKNOWN
        grid = make_grid(labels, (2, 2, 2))
        truth = build_relation_ground_truth(grid, 2)
        pred = RelationSet(
            (2, 2, 2), 2, rng.uniform(0.05, 0.95, size=(4, 8, 1)), truth.mask
        )
        return pred, truth

    def test_perfect_prediction_near_zero(self):
        _, truth = self.make_pair()
        loss, _ = relation_loss(truth, truth)
        assert 0.0 <= loss <= 4 * abs(np.log(1 - 1e-12)) + 1e-9

    def test_weight_three_on_single_positive(self):
        # 4 masked entries for relation 0, exactly one of them positive
        mats = np.zeros((4, 4, 4))
        mats[0, 0, 0] = 1.0
        mask = np.zeros((4, 4), bool)
        mask[:, 0] = True
        truth = relation_set((2, 2, 1), 1, mats, mask)
        from ssckit.crp import _relation_weights

        weights = _relation_weights(truth)
        assert weights[0] == pytest.approx(3.0)
        assert weights[1] is None

    def test_matches_scalar_oracle(self):
        pred, truth = self.make_pair(3)
        loss, _ = relation_loss(pred, truth)
        assert loss == pytest.approx(
            bce_oracle(pred.matrices, truth.matrices, truth.mask), rel=1e-12
        )

    def test_inverted_prediction_matches_oracle(self):
        _, truth = self.make_pair(4)
        inverted = RelationSet((2, 2, 2), 2, 1.0 - truth.matrices, truth.mask)
        loss, _ = relation_loss(inverted, truth)
        assert loss == pytest.approx(
            bce_oracle(inverted.matrices, truth.matrices, truth.mask), rel=1e-12
        )
        assert loss > 1.0  # catastrophically wrong predictions are punished

    def test_empty_mask_degenerate(self):
        empty = relation_set((2, 2, 2), 2, np.zeros((4, 8, 1)), np.zeros((8, 1), bool))
        with pytest.raises(DegenerateInput):
            relation_loss(empty, empty)

    def test_logit_path_matches_probability_path(self):
        rng = np.random.default_rng(6)
        _, truth = self.make_pair(5)
        logits = rng.uniform(-2, 2, size=(4, 8, 1))
        sig = 1.0 / (1.0 + np.exp(-logits))
        pred = RelationSet((2, 2, 2), 2, sig, truth.mask)
        loss_p, _ = relation_loss(pred, truth)
        loss_z, _ = relation_loss_from_logits(logits, truth)
        assert loss_z == pytest.approx(loss_p, rel=1e-10)


class TestRelationIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, size=8).astype(np.uint8)
        grid = make_grid(labels, (2, 2, 2))
        rels = build_relation_ground_truth(grid, 2)
        path = tmp_path / "r.sscr"
        save_relations(rels, path)
        back = load_relations(path, (2, 2, 2))
        assert back.supervoxel_size == rels.supervoxel_size
        assert np.array_equal(back.matrices, rels.matrices)
        assert np.array_equal(back.mask, rels.mask)
