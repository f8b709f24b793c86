import math

import numpy as np
import pytest
import torch

from slap.apm import (
    ActionModel,
    ActionTriplet,
    ApmLossWeights,
    apm_loss,
    apm_loss_torch,
    assemble_absolute,
    crop_input,
    gripper_head_inputs,
    predict_actions,
    relative_targets,
)
from slap.config import ApmConfig, SetAbstractionConfig
from slap.errors import EmptyCrop
from slap.geometry import Action, PointCloud, UnitQuaternion
from slap.scenegen import ProprioState


def small_apm_cfg(**kw):
    defaults = dict(
        fine=SetAbstractionConfig(0.01, 0.03, max_neighbors=16, mlp_widths=(16, 24)),
        coarse=SetAbstractionConfig(0.04, 0.1, max_neighbors=32, mlp_widths=(16, 24)),
        head_hidden=16,
    )
    defaults.update(kw)
    return ApmConfig(**defaults)


def make_model(seed=0, **kw):
    torch.manual_seed(seed)
    return ActionModel(small_apm_cfg(**kw), dtype=torch.float64)


def random_triplet(rng, with_logits=False):
    acts = [Action(rng.uniform(-0.08, 0.08, 3),
                   UnitQuaternion.from_array(rng.normal(size=4)),
                   int(rng.integers(2))) for _ in range(3)]
    proprio = tuple(ProprioState(int(rng.integers(2)), float(rng.uniform(0, 0.08)), k)
                    for k in range(3))
    trip = ActionTriplet(acts[0], acts[1], acts[2], proprio)
    if with_logits:
        return trip, rng.normal(size=3)
    return trip


def proprio3():
    return tuple(ProprioState(0, 0.08, k) for k in range(3))


class TestCropInput:
    def test_crop_contract(self, demo_bottle):
        crop = crop_input(demo_bottle, demo_bottle.interaction_point, 0.1)
        d = np.linalg.norm(crop.positions - demo_bottle.interaction_point, axis=1)
        assert len(crop) > 0 and d.max() <= 0.1 + 1e-12

    def test_empty_crop_raises(self, demo_bottle):
        with pytest.raises(EmptyCrop):
            crop_input(demo_bottle, demo_bottle.interaction_point + [0, 0, 5.0], 0.1)

    def test_center_must_be_finite(self, demo_bottle):
        with pytest.raises(ValueError):
            crop_input(demo_bottle, [np.nan, 0, 0], 0.1)

    def test_train_center_noise_within_three_sigma(self, rng):
        sigma = 0.01
        draws = rng.normal(0.0, sigma, (10_000, 3))
        frac = (np.linalg.norm(draws, axis=1) < 3 * sigma).mean()
        assert frac > 0.97


class TestForward:
    def test_unit_quaternions_canonical(self, rng, demo_bottle):
        model = make_model()
        crop = crop_input(demo_bottle, demo_bottle.interaction_point, 0.1)
        trip = predict_actions(crop.translated(-demo_bottle.interaction_point),
                               proprio3(), model, rng)
        for a in trip.actions():
            assert abs(np.linalg.norm(a.q.as_array()) - 1.0) < 1e-6
            assert a.q.w >= 0
            assert a.g in (0, 1)

    def test_deterministic(self, demo_bottle):
        model = make_model()
        crop = crop_input(demo_bottle, demo_bottle.interaction_point, 0.1)
        rel = crop.translated(-demo_bottle.interaction_point)
        t1 = predict_actions(rel, proprio3(), model, np.random.default_rng(3))
        t2 = predict_actions(rel, proprio3(), model, np.random.default_rng(3))
        for a, b in zip(t1.actions(), t2.actions()):
            np.testing.assert_array_equal(a.delta_p, b.delta_p)
            np.testing.assert_array_equal(a.q.as_array(), b.q.as_array())

    def test_frame_invariance(self, rng):
        """Crop expressed relative to its own center: translating the scene
        and the center together must not change the offsets."""
        model = make_model()
        pts = rng.uniform(-0.05, 0.05, (60, 3))
        cols = rng.uniform(0, 1, (60, 3))
        rel = PointCloud(pts, cols)
        out1 = model(rel, proprio3(), np.random.default_rng(0))
        shifted_scene = PointCloud(pts + np.array([1.0, -2.0, 0.5]), cols)
        rel2 = shifted_scene.translated(-np.array([1.0, -2.0, 0.5]))
        out2 = model(rel2, proprio3(), np.random.default_rng(0))
        np.testing.assert_allclose(out1["delta_p"].detach(), out2["delta_p"].detach(),
                                   atol=1e-12)

    def test_gripper_depends_only_on_proprio(self, rng):
        model = make_model()
        prop = proprio3()
        rel_a = PointCloud(rng.uniform(-0.05, 0.05, (40, 3)), rng.uniform(0, 1, (40, 3)))
        rel_b = PointCloud(rng.uniform(-0.05, 0.05, (70, 3)), rng.uniform(0, 1, (70, 3)))
        ga = model(rel_a, prop, np.random.default_rng(1))["grip_logits"]
        gb = model(rel_b, prop, np.random.default_rng(2))["grip_logits"]
        np.testing.assert_array_equal(ga.detach(), gb.detach())

    def test_empty_crop_raises(self):
        model = make_model()
        with pytest.raises(EmptyCrop):
            model(PointCloud.empty(), proprio3(), None)

    def test_separate_trunks_config(self, rng, demo_bottle):
        model = make_model(separate_trunks=True)
        assert len(model.trunks) == 3
        crop = crop_input(demo_bottle, demo_bottle.interaction_point, 0.1)
        out = model(crop.translated(-demo_bottle.interaction_point), proprio3(), rng)
        assert out["delta_p"].shape == (3, 3)


class TestApmLoss:
    def test_equal_triplets_zero(self, rng):
        trip = random_triplet(rng)
        assert apm_loss(trip, trip) == pytest.approx(0.0, abs=1e-12)

    def test_sign_flipped_quaternion_zero(self, rng):
        trip = random_triplet(rng)
        # The squared inner product ignores the double cover; construct the
        # flipped quaternion directly to bypass hemisphere canonicalization.
        flipped = []
        for a in trip.actions():
            q = a.q
            neg = UnitQuaternion.__new__(UnitQuaternion)
            object.__setattr__(neg, "w", -q.w)
            object.__setattr__(neg, "x", -q.x)
            object.__setattr__(neg, "y", -q.y)
            object.__setattr__(neg, "z", -q.z)
            flipped.append(Action(a.delta_p, neg, a.g))
        other = ActionTriplet(flipped[0], flipped[1], flipped[2], trip.proprio)
        assert apm_loss(other, trip) == pytest.approx(0.0, abs=1e-12)

    def test_hard_gripper_mismatch_is_infinite(self, rng):
        trip = random_triplet(rng)
        acts = list(trip.actions())
        acts[1] = Action(acts[1].delta_p, acts[1].q, 1 - acts[1].g)
        other = ActionTriplet(acts[0], acts[1], acts[2], trip.proprio)
        assert apm_loss(other, trip) == math.inf

    def test_matches_direct_formula_oracle(self, rng):
        w = ApmLossWeights(1.0, 1e-2, 1e-4)
        for _ in range(30):
            target = random_triplet(rng)
            pred, logits = random_triplet(rng, with_logits=True)
            got = apm_loss(pred, target, w, gripper_logits=logits)
            want = 0.0
            for k, (p, t) in enumerate(zip(pred.actions(), target.actions())):
                want += w.lambda_p * float(np.sum((p.delta_p - t.delta_p) ** 2))
                dot = float(np.dot(p.q.as_array(), t.q.as_array()))
                want += w.lambda_q * (1.0 - dot * dot)
                z, g = logits[k], t.g
                p1 = 1.0 / (1.0 + math.exp(-z))
                want += w.lambda_g * -(g * math.log(p1) + (1 - g) * math.log(1 - p1))
            assert got == pytest.approx(want, abs=1e-9)

    def test_torch_loss_agrees_with_dataclass_loss(self, rng):
        torch.manual_seed(0)
        target = random_triplet(rng)
        delta = torch.from_numpy(rng.uniform(-0.05, 0.05, (3, 3)))
        raw_q = torch.from_numpy(rng.normal(size=(3, 4)))
        quat = raw_q / torch.linalg.norm(raw_q, dim=1, keepdim=True)
        quat = quat * torch.where(quat[:, :1] < 0, -1.0, 1.0).to(quat.dtype)
        logits = torch.from_numpy(rng.normal(size=3))
        out = {"delta_p": delta, "quat": quat, "grip_logits": logits}
        total, _, _, _ = apm_loss_torch(out, target, ApmLossWeights())
        pred_acts = [Action(delta[k].numpy(), UnitQuaternion.from_array(quat[k].numpy()),
                            target.actions()[k].g) for k in range(3)]
        pred = ActionTriplet(pred_acts[0], pred_acts[1], pred_acts[2], target.proprio)
        want = apm_loss(pred, target, ApmLossWeights(), gripper_logits=logits.numpy())
        assert total.item() == pytest.approx(want, abs=1e-9)

    def test_orientation_term_bounded(self, rng):
        w = ApmLossWeights(0.0, 0.5, 0.0)
        for _ in range(20):
            a, b = random_triplet(rng), random_triplet(rng)
            val = apm_loss(a, b, w, gripper_logits=np.zeros(3))
            assert -1e-12 <= val <= 3 * 0.5 + 1e-12

    def test_printed_orientation_mode(self, rng):
        trip = random_triplet(rng)
        assert apm_loss(trip, trip, orientation_mode="printed") == pytest.approx(0.0, abs=1e-12)
        other = random_triplet(rng)
        dot = sum(float(np.dot(p.q.as_array(), t.q.as_array()))
                  for p, t in zip(other.actions(), trip.actions()))
        expected_ori = 3.0 - dot
        got = apm_loss(other, trip, ApmLossWeights(0.0, 1.0, 0.0), gripper_logits=np.zeros(3),
                       orientation_mode="printed")
        assert got == pytest.approx(expected_ori, abs=1e-9)


class TestAssembleAbsolute:
    def test_zero_offset_at_interaction_point(self, rng):
        trip = random_triplet(rng)
        acts = [Action(np.zeros(3), a.q, a.g) for a in trip.actions()]
        trip0 = ActionTriplet(acts[0], acts[1], acts[2], trip.proprio)
        p = rng.uniform(-1, 1, 3)
        poses = assemble_absolute(trip0, p)
        for pose in poses:
            np.testing.assert_allclose(pose.position, p)

    def test_assemble_then_rederive_is_identity(self, rng):
        trip = random_triplet(rng)
        p = rng.uniform(-1, 1, 3)
        poses = assemble_absolute(trip, p)
        for pose, act in zip(poses, trip.actions()):
            np.testing.assert_allclose(pose.position - p, act.delta_p, atol=1e-12)

    def test_stub_heads_recover_expert_keyframes(self, demo_bottle):
        """With the oracle interaction point and heads that return the exact
        targets, assembled poses equal the expert keyframes."""
        target = relative_targets(demo_bottle, demo_bottle.interaction_point)
        poses = assemble_absolute(target, demo_bottle.interaction_point)
        for pose, kf in zip(poses, demo_bottle.keyframes):
            np.testing.assert_allclose(pose.position, kf.position, atol=1e-9)
            np.testing.assert_allclose(pose.orientation.as_array(),
                                       kf.orientation.as_array(), atol=1e-12)
            assert pose.gripper == kf.gripper


class TestGripperInputs:
    def test_staging_from_initial_state(self, demo_bottle):
        props = gripper_head_inputs(demo_bottle)
        assert [p.ts for p in props] == [0, 1, 2]
        init = demo_bottle.initial_proprio()
        assert props[0].g_act == init.g_act and props[0].g_w == init.g_w
        assert props[1].g_w == demo_bottle.keyframes[0].proprio.g_w
        assert props[2].g_w == demo_bottle.keyframes[1].proprio.g_w
