import math

import numpy as np
import pytest
import torch

from slap.augment import rotational_randomization
from slap.errors import TargetNotInP
from slap.geometry import PointCloud, grid_downsample, read_ply, rotate_points_z
from slap.ipm import (
    InteractionPrediction,
    export_attention,
    ipm_loss,
    ipm_loss_terms,
    locality_loss,
    predict_interaction,
    snap_index,
    top_fraction_indices,
)


class NearestPointScorer:
    """Rotation-equivariant stub: score = -||token - target||^2."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def score(self, cloud, command, proprio, rng=None):
        points = grid_downsample(cloud, 0.005).positions
        d2 = np.sum((points - self.target) ** 2, axis=1)
        return torch.from_numpy(-d2), points


class ForcedScorer:
    """Base scores with one token's logit forced to +inf (argmax test hook)."""

    def __init__(self, forced_index):
        self.forced_index = forced_index

    def score(self, cloud, command, proprio, rng=None):
        points = grid_downsample(cloud, 0.005).positions
        scores = np.zeros(points.shape[0])
        scores[self.forced_index] = np.inf
        return torch.from_numpy(scores), points


def brute_force_locality(scores, points, target):
    exps = [math.exp(s) for s in scores]
    z = sum(exps)
    return sum((e / z) * float(np.sum((np.asarray(p) - np.asarray(target)) ** 2))
               for e, p in zip(exps, points))


def brute_force_ipm(scores, points, target_idx, target, w):
    exps = [math.exp(s) for s in scores]
    z = sum(exps)
    ce = -math.log(exps[target_idx] / z)
    return ce + (w / len(scores)) * brute_force_locality(scores, points, target)


class TestPredictInteraction:
    def test_forced_logit_wins(self, demo_bottle):
        pred = predict_interaction(demo_bottle, ForcedScorer(17))
        assert pred.argmax_index == 17
        np.testing.assert_array_equal(pred.point, pred.points[17])

    def test_all_equal_scores_lowest_index(self, demo_bottle):
        class Flat:
            def score(self, cloud, command, proprio, rng=None):
                points = grid_downsample(cloud, 0.005).positions
                return torch.zeros(points.shape[0], dtype=torch.float64), points

        pred = predict_interaction(demo_bottle, Flat())
        assert pred.argmax_index == 0

    def test_top_mask_size(self, demo_bottle):
        pred = predict_interaction(demo_bottle, ForcedScorer(0))
        n = pred.points.shape[0]
        assert len(pred.top_mask) == int(np.ceil(0.05 * n))
        assert pred.argmax_index in pred.top_mask

    def test_stub_rotation_equivariance(self, demo_drawer):
        stub = NearestPointScorer(demo_drawer.interaction_point)
        pred = predict_interaction(demo_drawer, stub)
        rotated = rotational_randomization(demo_drawer, seed=5)
        stub_rot = NearestPointScorer(rotated.interaction_point)
        pred_rot = predict_interaction(rotated, stub_rot)
        pivot = np.asarray(demo_drawer.meta["workspace_center"])
        rng = np.random.default_rng(5)
        angle = rng.uniform(-np.pi / 4, np.pi / 4)
        expected = rotate_points_z(pred.point, angle, pivot)
        # Voxel grids do not commute with rotation; match within one diagonal.
        assert np.linalg.norm(pred_rot.point - expected) <= 0.005 * np.sqrt(3)


class TestLocalityLoss:
    def test_uniform_scores_give_mean_square_distance(self, rng):
        points = rng.uniform(-1, 1, (20, 3))
        target = rng.uniform(-1, 1, 3)
        scores = torch.full((20,), 1.7, dtype=torch.float64)
        expected = np.mean(np.sum((points - target) ** 2, axis=1))
        assert locality_loss(scores, points, target).item() == pytest.approx(expected, rel=1e-12)

    def test_target_logit_to_infinity_drives_loss_to_zero(self, rng):
        points = rng.uniform(-1, 1, (10, 3))
        target = points[4]
        scores = torch.zeros(10, dtype=torch.float64)
        scores[4] = 200.0
        assert locality_loss(scores, points, target).item() < 1e-12

    def test_matches_brute_force_oracle(self, rng):
        points = rng.uniform(-0.5, 0.5, (5, 3))
        scores_np = np.array([0.3, -1.2, 2.0, 0.0, 0.7])
        target = points[2]
        got = locality_loss(torch.from_numpy(scores_np), points, target).item()
        assert got == pytest.approx(brute_force_locality(scores_np, points, target), abs=1e-9)

    def test_shift_invariance(self, rng):
        points = rng.uniform(-1, 1, (15, 3))
        scores = torch.from_numpy(rng.normal(size=15))
        target = points[0]
        a = locality_loss(scores, points, target).item()
        b = locality_loss(scores + 123.4, points, target).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_nonnegative(self, rng):
        points = rng.uniform(-1, 1, (8, 3))
        scores = torch.from_numpy(rng.normal(size=8))
        assert locality_loss(scores, points, points[3]).item() >= 0.0


class TestIpmLoss:
    def test_w_zero_is_pure_cross_entropy(self, rng):
        points = rng.uniform(-1, 1, (12, 3))
        scores = torch.from_numpy(rng.normal(size=12))
        target = points[7]
        total, ce, _ = ipm_loss_terms(scores, points, target, w=0.0, resolution=1.0)
        assert total.item() == pytest.approx(ce.item(), abs=1e-12)
        expected_ce = -torch.log_softmax(scores, dim=0)[7].item()
        assert ce.item() == pytest.approx(expected_ce, abs=1e-12)

    def test_perfect_prediction_limit(self, rng):
        points = rng.uniform(-1, 1, (6, 3))
        scores = torch.zeros(6, dtype=torch.float64)
        scores[2] = 500.0
        loss = ipm_loss(scores, points, points[2], w=1.0, resolution=1.0)
        assert loss.item() < 1e-9

    def test_matches_oracle_random_instances(self, rng):
        for _ in range(25):
            n = int(rng.integers(3, 12))
            points = rng.uniform(-0.5, 0.5, (n, 3))
            scores_np = rng.normal(size=n)
            idx = int(rng.integers(n))
            w = float(rng.uniform(0, 3))
            got = ipm_loss(torch.from_numpy(scores_np), points, points[idx], w,
                           resolution=2.0).item()
            want = brute_force_ipm(scores_np, points, idx, points[idx], w)
            assert got == pytest.approx(want, abs=1e-9)

    def test_monotone_in_target_logit(self, rng):
        points = rng.uniform(-1, 1, (9, 3))
        base = rng.normal(size=9)
        target = points[4]
        values = []
        for bump in (0.0, 0.5, 1.0, 2.0, 4.0):
            s = base.copy()
            s[4] += bump
            values.append(ipm_loss(torch.from_numpy(s), points, target, w=1.0,
                                   resolution=1.0).item())
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_target_not_in_p(self, rng):
        points = rng.uniform(0, 0.01, (5, 3))
        scores = torch.zeros(5, dtype=torch.float64)
        with pytest.raises(TargetNotInP):
            ipm_loss(scores, points, np.array([1.0, 1.0, 1.0]), w=1.0)

    def test_snap_tie_breaks_lowest(self):
        points = np.array([[0.0, 0, 0], [0.0, 0, 0], [1, 1, 1]])
        assert snap_index(points, [0.0, 0, 0], 1.0) == 0

    def test_rejects_negative_weight(self, rng):
        points = rng.uniform(-1, 1, (4, 3))
        with pytest.raises(ValueError):
            ipm_loss(torch.zeros(4, dtype=torch.float64), points, points[0], w=-1.0,
                     resolution=1.0)

    def test_gradient_matches_finite_difference(self, rng):
        points = rng.uniform(-0.5, 0.5, (10, 3))
        base = rng.normal(size=10)
        target = points[3]
        scores = torch.tensor(base, requires_grad=True)
        loss = ipm_loss(scores, points, target, w=0.8, resolution=1.0)
        loss.backward()
        for j in (0, 3, 7):
            h = 1e-6
            sp, sm = base.copy(), base.copy()
            sp[j] += h
            sm[j] -= h
            num = (brute_force_ipm(sp, points, 3, target, 0.8)
                   - brute_force_ipm(sm, points, 3, target, 0.8)) / (2 * h)
            assert scores.grad[j].item() == pytest.approx(num, rel=1e-5, abs=1e-8)


class TestExportAttention:
    def test_red_count_and_roundtrip(self, tmp_path, rng):
        points = rng.uniform(0, 1, (100, 3))
        scores = rng.normal(size=100)
        pred = InteractionPrediction(scores, points,
                                     points[int(np.argmax(scores))].copy(),
                                     top_fraction_indices(scores, 0.05))
        cloud = PointCloud(rng.uniform(0, 1, (50, 3)), np.full((50, 3), 0.4))
        path = tmp_path / "attn.ply"
        export_attention(pred, cloud, path)
        back = read_ply(path)
        red = np.all(back.colors == [1.0, 0.0, 0.0], axis=1)
        yellow = np.all(back.colors == [1.0, 1.0, 0.0], axis=1)
        assert red.sum() == 5
        assert yellow.sum() > 10
        # The argmax sphere surrounds the predicted point.
        centroid = back.positions[yellow].mean(axis=0)
        np.testing.assert_allclose(centroid, pred.point, atol=2e-3)
        # Scene points round-trip through the PLY reader.
        np.testing.assert_allclose(back.positions[:50], cloud.positions, atol=1e-7)
