import numpy as np
import pytest

import slap.augment as aug
from slap.augment import (
    AUGMENT_ORDER,
    AugmentConfig,
    additive_noise,
    apm_offset_jitter,
    augment_scene,
    elliptical_dropout,
    random_crop,
    rotational_randomization,
)
from slap.apm import ActionTriplet, relative_targets
from slap.geometry import PointCloud, rotate_points_z
from slap.scenegen import label_interaction_point


def plane_cloud(n_side=64, size=0.5):
    xs = np.linspace(0, size, n_side)
    xx, yy = np.meshgrid(xs, xs)
    pos = np.stack([xx.ravel(), yy.ravel(), np.zeros(n_side * n_side)], axis=1)
    return PointCloud(pos, np.full((n_side * n_side, 3), 0.5))


class TestEllipticalDropout:
    def test_zero_mean_is_identity(self):
        cloud = plane_cloud(20)
        out = elliptical_dropout(cloud, 0, AugmentConfig(dropout_mean=0.0))
        np.testing.assert_array_equal(out.positions, cloud.positions)

    def test_output_subset_of_input(self):
        cloud = plane_cloud(30)
        out = elliptical_dropout(cloud, 3)
        rows = {tuple(p) for p in cloud.positions}
        assert len(out) <= len(cloud)
        assert all(tuple(p) in rows for p in out.positions)

    def test_never_below_min_points(self):
        cloud = plane_cloud(17)  # 289 points, just above the floor
        for seed in range(30):
            out = elliptical_dropout(cloud, seed)
            assert len(out) >= 256

    def test_mean_removal_fraction_positive_and_bounded(self):
        cloud = plane_cloud(40)
        fractions = []
        for seed in range(1000):
            out = elliptical_dropout(cloud, seed)
            fractions.append(1.0 - len(out) / len(cloud))
        mean_frac = float(np.mean(fractions))
        # Monte-Carlo estimate, logged for the record.
        print(f"mean removal fraction over 1000 seeds: {mean_frac:.4f}")
        assert 0.0 < mean_frac < 0.5

    def test_deterministic(self):
        cloud = plane_cloud(25)
        a = elliptical_dropout(cloud, 77)
        b = elliptical_dropout(cloud, 77)
        np.testing.assert_array_equal(a.positions, b.positions)


class TestAdditiveNoise:
    def test_collapsed_range_identity(self):
        cloud = plane_cloud(10)
        out = additive_noise(cloud, 0, AugmentConfig(noise_std_range=(0.0, 0.0)))
        np.testing.assert_array_equal(out.positions, cloud.positions)

    def test_count_and_colors_unchanged(self):
        cloud = plane_cloud(15)
        out = additive_noise(cloud, 5)
        assert len(out) == len(cloud)
        np.testing.assert_array_equal(out.colors, cloud.colors)

    def test_offset_mean_near_zero(self, rng):
        n = 100_000
        cloud = PointCloud(rng.uniform(0, 1, (n, 3)), np.zeros((n, 3)))
        sigma = 0.002
        out = additive_noise(cloud, 123, AugmentConfig(noise_std_range=(sigma, sigma)))
        offsets = out.positions - cloud.positions
        bound = 3 * sigma / np.sqrt(n * 3)
        assert abs(offsets.mean()) < bound
        assert abs(offsets.std() - sigma) < 0.1 * sigma


class TestRotationalRandomization:
    def test_zero_range_identity(self, demo_bottle):
        out = rotational_randomization(demo_bottle, 0, AugmentConfig(rotation_max_deg=0.0))
        np.testing.assert_allclose(out.cloud.positions, demo_bottle.cloud.positions)
        np.testing.assert_allclose(out.interaction_point, demo_bottle.interaction_point)

    def test_labels_corotate(self, demo_drawer):
        out = rotational_randomization(demo_drawer, 9)
        idx, pos = label_interaction_point(out.keyframes)
        assert idx == out.interaction_index
        np.testing.assert_allclose(pos, out.interaction_point, atol=1e-12)

    def test_relative_actions_rotate_consistently(self, demo_drawer):
        seed = 4
        out = rotational_randomization(demo_drawer, seed)
        cfg = AugmentConfig()
        rng = np.random.default_rng(seed)
        angle = rng.uniform(-np.deg2rad(cfg.rotation_max_deg), np.deg2rad(cfg.rotation_max_deg))
        for kf_rot, kf_orig in zip(out.keyframes, demo_drawer.keyframes):
            dp_rot = kf_rot.position - out.interaction_point
            dp_expect = rotate_points_z(kf_orig.position - demo_drawer.interaction_point,
                                        angle, (0, 0, 0))
            np.testing.assert_allclose(dp_rot, dp_expect, atol=1e-9)

    def test_command_untouched(self, demo_bottle):
        assert rotational_randomization(demo_bottle, 2).command == demo_bottle.command


class TestRandomCrop:
    def test_p_zero_unchanged(self, demo_bottle):
        out = random_crop(demo_bottle, 0, p=0.0)
        assert out is demo_bottle

    def test_always_keeps_label_neighborhood(self, demo_bottle):
        for seed in range(1000):
            out = random_crop(demo_bottle, seed, p=1.0)
            d = np.linalg.norm(out.cloud.positions - out.interaction_point, axis=1)
            assert d.min() <= 0.005
            assert len(out.cloud) <= len(demo_bottle.cloud)

    def test_rejects_bad_probability(self, demo_bottle):
        with pytest.raises(ValueError):
            random_crop(demo_bottle, 0, p=1.5)


class TestApmOffsetJitter:
    def _crop_and_target(self, demo):
        crop = demo.cloud.translated(-demo.interaction_point)
        return crop, relative_targets(demo, demo.interaction_point)

    def test_zero_jitter_identity(self, demo_bottle):
        crop, target = self._crop_and_target(demo_bottle)
        out_crop, out_target = apm_offset_jitter(crop, target, 0, AugmentConfig(apm_jitter=0.0))
        np.testing.assert_array_equal(out_crop.positions, crop.positions)
        for a, b in zip(out_target.actions(), target.actions()):
            np.testing.assert_array_equal(a.delta_p, b.delta_p)

    def test_absolute_positions_preserved(self, demo_bottle):
        crop, target = self._crop_and_target(demo_bottle)
        center = demo_bottle.interaction_point
        for seed in range(50):
            _, jt = apm_offset_jitter(crop, target, seed)
            rng = np.random.default_rng(seed)
            dr = rng.uniform(-0.025, 0.025, size=3)
            for a, b in zip(jt.actions(), target.actions()):
                np.testing.assert_allclose((center + dr) + a.delta_p, center + b.delta_p,
                                           atol=1e-9)

    def test_jitter_bound(self, demo_bottle):
        crop, target = self._crop_and_target(demo_bottle)
        for seed in range(10_000):
            rng = np.random.default_rng(seed)
            dr = rng.uniform(-0.025, 0.025, size=3)
            assert np.abs(dr).max() <= 0.025


class TestComposition:
    def test_pinned_order(self, demo_bottle, monkeypatch):
        assert AUGMENT_ORDER == ("rotation", "crop", "dropout", "noise")
        calls = []
        monkeypatch.setattr(aug, "rotational_randomization",
                            lambda d, s, cfg: (calls.append("rotation"), d)[1])
        monkeypatch.setattr(aug, "random_crop",
                            lambda d, s, cfg: (calls.append("crop"), d)[1])
        monkeypatch.setattr(aug, "elliptical_dropout",
                            lambda c, s, cfg: (calls.append("dropout"), c)[1])
        monkeypatch.setattr(aug, "additive_noise",
                            lambda c, s, cfg: (calls.append("noise"), c)[1])
        augment_scene(demo_bottle, 0)
        assert calls == list(AUGMENT_ORDER)

    def test_disabled_returns_input(self, demo_bottle):
        assert augment_scene(demo_bottle, 0, AugmentConfig(enabled=False)) is demo_bottle

    def test_deterministic_given_seed(self, demo_bottle):
        a = augment_scene(demo_bottle, 42)
        b = augment_scene(demo_bottle, 42)
        np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)
        np.testing.assert_allclose(a.interaction_point, b.interaction_point)

    def test_command_never_changes(self, demo_bottle):
        for seed in range(5):
            assert augment_scene(demo_bottle, seed).command == demo_bottle.command
