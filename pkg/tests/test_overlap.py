"""Fine-stage tests: scoring, verification, and ground-truth masks."""

import numpy as np
import pytest

from bevloop.encoder import FeatureDb, FeatureVolume
from bevloop.dataset import Pose
from bevloop.errors import ContractError, DegeneratePairError, DimensionError
from bevloop.overlap import MatchDecision, OverlapHead, OverlapResult, gt_overlap, overlap_score
from bevloop.profiler import STAGE_OVERLAP, StageTimer
from bevloop.retrieval import CandidateSet
from bevloop.voxelizer import GridConfig, PointCloud


class TestOverlapScore:
    def test_hand_value(self):
        # Masked rates are 2/2 and 1/2; their average is 0.75. The 9.0
        # entries sit outside the masks and must not contribute.
        gamma_p = np.array([[1.0, 9.0], [9.0, 1.0]])
        gamma_q = np.array([[0.5, 9.0], [9.0, 0.5]])
        mask = np.array([[True, False], [False, True]])
        assert overlap_score(gamma_p, gamma_q, mask, mask) == 0.75

    def test_asymmetric_counts(self):
        # One masked cell at rate 1 against two at rate 0: tau = 0.5.
        gamma = np.array([[1.0, 0.0]])
        assert overlap_score(gamma, gamma * 0.0, np.array([[True, False]]), np.array([[True, True]])) == 0.5

    def test_empty_mask_is_degenerate(self):
        gamma = np.ones((2, 2))
        with pytest.raises(DegeneratePairError):
            overlap_score(gamma, gamma, np.zeros((2, 2), dtype=bool), np.ones((2, 2), dtype=bool))

    def test_shape_disagreement_rejected(self):
        with pytest.raises(DimensionError):
            overlap_score(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 3), dtype=bool), np.ones((2, 2), dtype=bool))


class TestResultAndDecision:
    def test_result_validates_counts_and_tau(self):
        g = np.ones((1, 1))
        with pytest.raises(ContractError):
            OverlapResult(g, g, 0, 1, 0.5)
        with pytest.raises(ContractError):
            OverlapResult(g, g, 1, 1, 1.5)

    def test_decision_matched_property(self):
        assert not MatchDecision(3, None, None, ()).matched
        assert MatchDecision(3, 1, 0.9, ((1, 0.9),)).matched


def small_head(seed=9):
    return OverlapHead(channels=4, rng=np.random.default_rng(seed))


def random_volume(rng, scan_id):
    return FeatureVolume(rng.normal(size=(4, 4, 4)), scan_id)


class TestOverlapHead:
    def test_pair_score_symmetric(self):
        rng = np.random.default_rng(0)
        head = small_head()
        p, q = random_volume(rng, 0), random_volume(rng, 1)
        assert head.pair_score(p, q).tau == pytest.approx(head.pair_score(q, p).tau, abs=1e-12)

    def test_tau_in_unit_interval(self):
        rng = np.random.default_rng(1)
        head = small_head()
        for i in range(5):
            tau = head.pair_score(random_volume(rng, 0), random_volume(rng, 1)).tau
            assert 0.0 <= tau <= 1.0

    def test_all_zero_volume_is_degenerate(self):
        head = small_head()
        zero = FeatureVolume(np.zeros((4, 4, 4)), 0)
        other = random_volume(np.random.default_rng(2), 1)
        with pytest.raises(DegeneratePairError):
            head.pair_score(zero, other)

    def test_call_counter_increments_once_per_pair(self):
        rng = np.random.default_rng(3)
        head = small_head()
        p, q = random_volume(rng, 0), random_volume(rng, 1)
        assert head.overlap_calls == 0
        head.pair_score(p, q)
        head.pair_score(p, q)
        assert head.overlap_calls == 2

    def test_cross_fuse_shape_validation(self):
        head = small_head()
        good = np.ones((4, 2, 2))
        import bevloop.tensor as T
        with pytest.raises(DimensionError):
            head.cross_fuse(T.Tensor(good), T.Tensor(np.ones((4, 2, 3))))
        with pytest.raises(DimensionError):
            head.cross_fuse(T.Tensor(np.ones((3, 2, 2))), T.Tensor(np.ones((3, 2, 2))))

    def test_parameter_names_unique(self):
        names = [p.name for p in small_head().parameters()]
        assert len(names) == len(set(names))


class TestVerify:
    def test_empty_candidates_yield_no_match(self):
        head = small_head()
        decision = head.verify(
            random_volume(np.random.default_rng(4), 10),
            CandidateSet(10, (), k=5),
            FeatureDb(),
        )
        assert decision == MatchDecision(10, None, None, ())
        assert not decision.matched

    def test_picks_highest_tau_with_ties_to_smaller_id(self):
        # Ids 3 and 7 hold the same volume, so their taus are bit-equal
        # and the smaller id must win even though 7 is scored first.
        rng = np.random.default_rng(5)
        head = small_head()
        shared = rng.normal(size=(4, 4, 4))
        fdb = FeatureDb()
        fdb.add(FeatureVolume(shared, 7))
        fdb.add(FeatureVolume(shared, 3))
        query = random_volume(rng, 10)
        decision = head.verify(query, CandidateSet(10, ((7, 0.1), (3, 0.2)), k=2), fdb)
        assert decision.best_id == 3
        assert [sid for sid, _ in decision.scores] == [7, 3]
        assert decision.scores[0][1] == decision.scores[1][1]

    def test_one_estimation_per_candidate(self):
        rng = np.random.default_rng(6)
        head = small_head()
        fdb = FeatureDb()
        for sid in range(4):
            fdb.add(random_volume(rng, sid))
        timer = StageTimer()
        candidates = CandidateSet(9, tuple((sid, 0.1 * (sid + 1)) for sid in range(4)), k=4)
        head.verify(random_volume(rng, 9), candidates, fdb, timer=timer)
        assert head.overlap_calls == 4
        assert timer.count(STAGE_OVERLAP) == 4


def coarse_cfg(h_cells=8, w_cells=8):
    return GridConfig(
        x_range=(0.0, 8.0), y_range=(0.0, 8.0), z_range=(0.0, 1.0),
        h_cells=h_cells, w_cells=w_cells, layers=1,
    )


def cloud(*points):
    return PointCloud(np.array(points, dtype=np.float64))


IDENT = Pose(np.eye(3), np.zeros(3))


class TestGtOverlap:
    def test_identity_poses_intersect_occupancy(self):
        # Coarse cells are 4x4. P occupies (0,0) and (1,1); Q occupies
        # (0,0) and (0,1); the shared cell is (0,0) in both frames.
        mask_p, mask_q = gt_overlap(
            cloud((1, 1, 0.5), (5, 5, 0.5)),
            cloud((1, 1, 0.5), (1, 5, 0.5)),
            IDENT, IDENT, coarse_cfg(), feature_stride=4,
        )
        expected = np.array([[True, False], [False, False]])
        np.testing.assert_array_equal(mask_p, expected)
        np.testing.assert_array_equal(mask_q, expected)

    def test_translated_pair_maps_to_own_frames(self):
        # The same world region lands in coarse cell (1,0) for P but
        # (0,0) for Q, whose sensor sits 4 m further along x. P's second
        # point leaves Q's crop window entirely.
        pose_q = Pose(np.eye(3), np.array([4.0, 0.0, 0.0]))
        mask_p, mask_q = gt_overlap(
            cloud((5, 1, 0.5), (1, 1, 0.5)),
            cloud((1, 1, 0.5)),
            IDENT, pose_q, coarse_cfg(), feature_stride=4,
        )
        np.testing.assert_array_equal(mask_p, np.array([[False, False], [True, False]]))
        np.testing.assert_array_equal(mask_q, np.array([[True, False], [False, False]]))

    def test_points_outside_crop_ignored(self):
        base_p = cloud((1, 1, 0.5), (5, 5, 0.5))
        with_far = cloud((1, 1, 0.5), (5, 5, 0.5), (100.0, 100.0, 0.5))
        q = cloud((1, 1, 0.5))
        a = gt_overlap(base_p, q, IDENT, IDENT, coarse_cfg(), feature_stride=4)
        b = gt_overlap(with_far, q, IDENT, IDENT, coarse_cfg(), feature_stride=4)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ContractError):
            gt_overlap(cloud((1, 1, 0.5)), cloud((1, 1, 0.5)), IDENT, IDENT, coarse_cfg(h_cells=6), feature_stride=4)
