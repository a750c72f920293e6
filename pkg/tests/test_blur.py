"""Tests for exposure trajectories, blur synthesis, and fusion."""

import numpy as np
import pytest

from blursplat import blur
from blursplat.articulation import Pose
from blursplat.blur import (
    ExposureTrajectory,
    blend_images,
    blend_images_backward,
    fusion_mask,
    fusion_mask_backward,
    positional_encoding,
    sample_virtual_poses,
    synthesize_blur,
    trajectory_gradients,
)
from blursplat.geom import quat_from_axis_angle
from blursplat.gradcheck import make_check_scene
from blursplat.model import render_avatar
from blursplat.render import GRADCHECK_SETTINGS
from blursplat.tinynet import DenseNet


def make_traj(n_joints=3, spread=0.4, seed=0):
    rng = np.random.default_rng(seed)
    start = Pose.rest(n_joints)
    end = Pose.rest(n_joints)
    end.root_translation[:] = rng.normal(size=3) * 0.2
    end.root_orientation = quat_from_axis_angle([0, 0, 1], spread)
    for j in range(n_joints):
        axis = rng.normal(size=3)
        end.joint_rotations[j] = quat_from_axis_angle(axis, spread * rng.uniform(0.5, 1.0))
    return ExposureTrajectory(start, end)


class TestSampling:
    def test_endpoints_exact(self):
        traj = make_traj()
        poses = sample_virtual_poses(traj, 5)
        assert len(poses) == 5
        np.testing.assert_array_equal(poses[0].root_translation,
                                      traj.start.root_translation)
        np.testing.assert_array_equal(poses[0].joint_rotations,
                                      traj.start.joint_rotations)
        np.testing.assert_allclose(poses[-1].root_translation,
                                   traj.end.root_translation, atol=1e-15)
        np.testing.assert_allclose(np.abs(poses[-1].joint_rotations),
                                   np.abs(traj.end.joint_rotations), atol=1e-12)

    def test_translation_is_linear(self):
        traj = make_traj()
        poses = sample_virtual_poses(traj, 5)
        for l, pose in enumerate(poses):
            u = l / 4.0
            np.testing.assert_allclose(
                pose.root_translation,
                (1 - u) * traj.start.root_translation + u * traj.end.root_translation,
                atol=1e-15)

    def test_rotations_sweep_uniformly(self):
        # successive samples are separated by a constant rotation angle
        traj = make_traj(spread=0.8)
        poses = sample_virtual_poses(traj, 9)
        for j in range(3):
            angles = []
            for a, b in zip(poses[:-1], poses[1:]):
                dot = abs(float(a.joint_rotations[j] @ b.joint_rotations[j]))
                angles.append(2.0 * np.arccos(min(dot, 1.0)))
            assert np.ptp(angles) < 1e-7

    def test_identical_endpoints_collapse(self):
        pose = Pose.rest(3)
        pose.root_translation[:] = [0.1, 0.2, 0.3]
        traj = ExposureTrajectory.from_pose(pose)
        for p in sample_virtual_poses(traj, 7):
            np.testing.assert_array_equal(p.root_translation, pose.root_translation)
            np.testing.assert_array_equal(p.root_orientation, pose.root_orientation)
            np.testing.assert_array_equal(p.joint_rotations, pose.joint_rotations)

    def test_single_sample_is_start(self):
        traj = make_traj()
        poses = sample_virtual_poses(traj, 1)
        np.testing.assert_array_equal(poses[0].root_translation,
                                      traj.start.root_translation)

    def test_zero_samples_rejected(self):
        with pytest.raises(ValueError):
            sample_virtual_poses(make_traj(), 0)

    def test_counter_increments(self):
        blur.reset_op_counts()
        sample_virtual_poses(make_traj(), 3)
        sample_virtual_poses(make_traj(), 3)
        assert blur.op_counts["sample_virtual_poses"] == 2
        blur.reset_op_counts()
        assert blur.op_counts["sample_virtual_poses"] == 0

    def test_dict_roundtrip(self):
        traj = make_traj()
        back = ExposureTrajectory.from_dict(traj.to_dict())
        np.testing.assert_array_equal(back.end.joint_rotations,
                                      traj.end.joint_rotations)


class TestSynthesizeBlur:
    def test_equals_brute_force_mean(self):
        rng = np.random.default_rng(0)
        images = [rng.uniform(size=(6, 7, 4)) for _ in range(9)]
        out = synthesize_blur(images)
        brute = sum(images) / 9.0
        np.testing.assert_allclose(out, brute, atol=1e-12)

    def test_identical_inputs_within_tolerance(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(5, 5, 4))
        out = synthesize_blur([img.copy() for _ in range(5)])
        assert np.abs(out - img).max() < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            synthesize_blur([np.zeros((4, 4, 4)), np.zeros((4, 5, 4))])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            synthesize_blur([])

    def test_blur_identity_through_renderer(self):
        # a degenerate trajectory produces virtual renders identical to the
        # sharp render, so their average matches it
        scene = make_check_scene(3)
        traj = ExposureTrajectory.from_pose(scene.pose)
        sharp, _ = render_avatar(scene.model, scene.pose, scene.camera,
                                 scene.background, GRADCHECK_SETTINGS)
        renders = []
        for pose in sample_virtual_poses(traj, 5):
            img, _ = render_avatar(scene.model, pose, scene.camera,
                                   scene.background, GRADCHECK_SETTINGS)
            renders.append(img)
        blurred = synthesize_blur(renders)
        assert np.abs(blurred - sharp).max() < 1e-6


class TestPositionalEncoding:
    def test_shape_and_range(self):
        enc = positional_encoding(8, 10)
        assert enc.shape == (8, 10, 16)
        assert enc.min() >= -1.0 and enc.max() <= 1.0

    def test_pixels_get_distinct_codes(self):
        enc = positional_encoding(16, 16)
        flat = enc.reshape(-1, 16)
        assert len(np.unique(flat.round(12), axis=0)) == 256

    def test_deterministic(self):
        np.testing.assert_array_equal(positional_encoding(4, 4),
                                      positional_encoding(4, 4))


class TestFusion:
    def make_net(self, rng, zero_last=True, pose_dim=6, frame_dim=5):
        return DenseNet.create([pose_dim + frame_dim + 16 + 3, 8, 8, 1], rng,
                               zero_last=zero_last)

    def test_zero_net_gives_half_mask(self):
        rng = np.random.default_rng(0)
        net = self.make_net(rng)
        mask, _ = fusion_mask(net, np.zeros(6), np.zeros(5),
                              positional_encoding(4, 4), rng.uniform(size=(4, 4, 3)))
        np.testing.assert_array_equal(mask, np.full((4, 4), 0.5))

    def test_width_mismatch_rejected(self):
        rng = np.random.default_rng(1)
        net = self.make_net(rng)
        with pytest.raises(ValueError):
            fusion_mask(net, np.zeros(7), np.zeros(5),
                        positional_encoding(4, 4), np.zeros((4, 4, 3)))

    def test_counter_increments(self):
        blur.reset_op_counts()
        rng = np.random.default_rng(2)
        net = self.make_net(rng)
        fusion_mask(net, np.zeros(6), np.zeros(5), positional_encoding(4, 4),
                    np.zeros((4, 4, 3)))
        assert blur.op_counts["fusion_mask"] == 1

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(3)
        net = self.make_net(rng, zero_last=False)
        l_pose = rng.normal(size=6)
        l_frame = rng.normal(size=5)
        l_pixel = positional_encoding(4, 4)
        rgb = rng.uniform(size=(4, 4, 3))
        upstream = rng.normal(size=(4, 4))

        def loss(lp, lf, im):
            m, _ = fusion_mask(net, lp, lf, l_pixel, im)
            return float(np.sum(upstream * m))

        mask, tape = fusion_mask(net, l_pose, l_frame, l_pixel, rgb)
        params, d_lp, d_lf, d_rgb = fusion_mask_backward(
            net, tape, mask, upstream, pose_dim=6, frame_dim=5)
        h = 1e-6
        for vec, analytic, apply in [
            (l_pose, d_lp, lambda v: loss(v, l_frame, rgb)),
            (l_frame, d_lf, lambda v: loss(l_pose, v, rgb)),
        ]:
            fd = np.zeros_like(vec)
            for i in range(vec.size):
                vp = vec.copy(); vp[i] += h
                vm = vec.copy(); vm[i] -= h
                fd[i] = (apply(vp) - apply(vm)) / (2 * h)
            np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-8)
        fd_rgb = np.zeros_like(rgb)
        for idx in np.ndindex(rgb.shape):
            rp = rgb.copy(); rp[idx] += h
            rm = rgb.copy(); rm[idx] -= h
            fd_rgb[idx] = (loss(l_pose, l_frame, rp) - loss(l_pose, l_frame, rm)) / (2 * h)
        np.testing.assert_allclose(d_rgb, fd_rgb, rtol=1e-5, atol=1e-8)


class TestBlend:
    def test_zero_mask_returns_sharp_bit_exact(self):
        rng = np.random.default_rng(0)
        sharp = rng.uniform(size=(5, 5, 4))
        blurred = rng.uniform(size=(5, 5, 4))
        out = blend_images(sharp, blurred, np.zeros((5, 5)))
        np.testing.assert_array_equal(out, sharp)

    def test_unit_mask_returns_blurred_bit_exact(self):
        rng = np.random.default_rng(1)
        sharp = rng.uniform(size=(5, 5, 4))
        blurred = rng.uniform(size=(5, 5, 4))
        out = blend_images(sharp, blurred, np.ones((5, 5)))
        np.testing.assert_array_equal(out, blurred)

    def test_intermediate_mask_is_convex(self):
        rng = np.random.default_rng(2)
        sharp = rng.uniform(size=(3, 3, 4))
        blurred = rng.uniform(size=(3, 3, 4))
        out = blend_images(sharp, blurred, np.full((3, 3), 0.25))
        np.testing.assert_allclose(out, 0.75 * sharp + 0.25 * blurred, atol=1e-15)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(3)
        sharp = rng.uniform(size=(3, 3, 4))
        blurred = rng.uniform(size=(3, 3, 4))
        mask = rng.uniform(size=(3, 3))
        upstream = rng.normal(size=(3, 3, 4))
        d_sharp, d_blurred, d_mask = blend_images_backward(sharp, blurred, mask,
                                                           upstream)
        h = 1e-6
        loss = lambda s, b, m: float(np.sum(upstream * blend_images(s, b, m)))
        fd = np.zeros_like(mask)
        for idx in np.ndindex(mask.shape):
            mp = mask.copy(); mp[idx] += h
            mm = mask.copy(); mm[idx] -= h
            fd[idx] = (loss(sharp, blurred, mp) - loss(sharp, blurred, mm)) / (2 * h)
        np.testing.assert_allclose(d_mask, fd, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(d_sharp, (1 - mask[..., None]) * upstream, atol=1e-15)
        np.testing.assert_allclose(d_blurred, mask[..., None] * upstream, atol=1e-15)


class TestTrajectoryGradients:
    def test_linear_translation_loss_exact(self):
        traj = make_traj()
        weights = np.array([1.5, -2.0, 0.5])

        def loss_fn(t):
            return float(weights @ t.start.root_translation
                         + 2.0 * weights @ t.end.root_translation)

        grads = trajectory_gradients(loss_fn, traj, h=1e-3)
        np.testing.assert_allclose(grads["start"][:3], weights, atol=1e-9)
        np.testing.assert_allclose(grads["end"][:3], 2.0 * weights, atol=1e-9)

    def test_quaternion_grads_are_tangential(self):
        # probes renormalize, so the measured gradient of any loss on the
        # normalized quaternion matches the projected analytic gradient
        traj = make_traj(seed=5)
        w = np.array([0.3, -0.7, 0.4, 0.9])

        def loss_fn(t):
            q = t.end.root_orientation
            return float(w @ (q / np.linalg.norm(q)))

        grads = trajectory_gradients(loss_fn, traj, h=1e-4)
        q = traj.end.root_orientation
        u = q / np.linalg.norm(q)
        expected = (w - u * (u @ w)) / np.linalg.norm(q)
        np.testing.assert_allclose(grads["end"][3:7], expected, atol=1e-6)
        # and it is orthogonal to the quaternion itself
        assert abs(grads["end"][3:7] @ u) < 1e-6

    def test_grad_layout_matches_flat_pose(self):
        traj = make_traj()
        calls = []

        def loss_fn(t):
            calls.append(1)
            return 0.0

        grads = trajectory_gradients(loss_fn, traj, h=1e-3)
        n_scalars = 7 + 4 * 3
        assert grads["start"].shape == (n_scalars,)
        assert grads["end"].shape == (n_scalars,)
        assert len(calls) == 2 * 2 * n_scalars
