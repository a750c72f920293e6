"""Tests for synthetic scene/motion generation and the blur oracle."""

import numpy as np
import pytest

from blursplat.articulation import capsule_segment_distance
from blursplat.synthdata import (
    MotionScript,
    blur_oracle,
    capsule_color,
    default_chain,
    make_motion,
    make_scene,
    read_dataset,
    render_ground_truth,
    write_dataset,
)


def small_scene(seed=0):
    return make_scene(seed, n_gaussians=80, image_size=24, focal=26.0)


class TestMakeScene:
    def test_same_seed_identical(self):
        a = make_scene(7, n_gaussians=50)
        b = make_scene(7, n_gaussians=50)
        np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)
        np.testing.assert_array_equal(a.cloud.color_features, b.cloud.color_features)

    def test_different_seed_differs(self):
        a = make_scene(1, n_gaussians=50)
        b = make_scene(2, n_gaussians=50)
        assert not np.array_equal(a.cloud.positions, b.cloud.positions)

    def test_gaussians_sit_on_capsule_shells(self):
        scene = small_scene()
        starts, ends = scene.chain.bone_segments()
        d = capsule_segment_distance(scene.cloud.positions, starts, ends)
        slack = (d - scene.chain.radii[None, :]).min(axis=1)
        assert slack.max() < 1e-9

    def test_eval_camera_differs_from_train(self):
        scene = small_scene()
        assert len(scene.eval_cameras) >= 1
        assert not np.allclose(scene.train_camera.position,
                               scene.eval_cameras[0].position)

    def test_capsule_colors_distinct(self):
        colors = np.stack([capsule_color(k) for k in range(6)])
        for i in range(6):
            for j in range(i + 1, 6):
                assert np.linalg.norm(colors[i] - colors[j]) > 0.15
        assert colors.min() >= 0.0 and colors.max() <= 1.0

    def test_figure_visible_from_both_cameras(self):
        scene = small_scene()
        from blursplat.articulation import Pose
        rest = Pose.rest(scene.chain.n_joints)
        for cam in [scene.train_camera] + scene.eval_cameras:
            img = render_ground_truth(scene, rest, cam)
            assert img[..., 3].max() > 0.5


class TestMakeMotion:
    def test_even_m_rejected(self):
        with pytest.raises(ValueError):
            make_motion(default_chain(), 0, frames=2, m=4)

    def test_script_shape(self):
        script = make_motion(default_chain(), 0, frames=3, m=5)
        assert script.n_frames == 3
        assert script.m == 5
        assert script.center_index == 2

    def test_zero_amplitude_is_static(self):
        script = make_motion(default_chain(), 3, frames=2, m=5, amplitude=0.0)
        ref = script.subframe_poses[0][0]
        for frame in script.subframe_poses:
            for pose in frame:
                np.testing.assert_array_equal(pose.as_flat(), ref.as_flat())

    def test_per_subframe_rotation_bounded(self):
        bound = 0.012
        script = make_motion(default_chain(), 5, frames=4, m=9,
                             amplitude=3.0, max_step=bound)
        flat = [p for frame in script.subframe_poses for p in frame]
        for a, b in zip(flat[:-1], flat[1:]):
            quats_a = np.vstack([a.root_orientation[None], a.joint_rotations])
            quats_b = np.vstack([b.root_orientation[None], b.joint_rotations])
            dots = np.abs(np.sum(quats_a * quats_b, axis=1)).clip(max=1.0)
            steps = 2.0 * np.arccos(dots)
            assert steps.max() <= bound + 1e-9

    def test_deterministic(self):
        a = make_motion(default_chain(), 11, frames=2, m=3)
        b = make_motion(default_chain(), 11, frames=2, m=3)
        for fa, fb in zip(a.subframe_poses, b.subframe_poses):
            for pa, pb in zip(fa, fb):
                np.testing.assert_array_equal(pa.as_flat(), pb.as_flat())

    def test_nonzero_amplitude_actually_moves(self):
        script = make_motion(default_chain(), 0, frames=2, m=9, amplitude=1.0)
        first = script.subframe_poses[0][0].as_flat()
        last = script.subframe_poses[-1][-1].as_flat()
        assert np.abs(first - last).max() > 1e-4

    def test_even_m_in_script_type_rejected(self):
        from blursplat.articulation import Pose
        with pytest.raises(ValueError):
            MotionScript(subframe_poses=[[Pose.rest(2)] * 4], m=4)


class TestBlurOracle:
    def test_static_script_blur_equals_sharp(self):
        scene = small_scene()
        script = make_motion(scene.chain, 0, frames=2, m=5, amplitude=0.0)
        ds = blur_oracle(scene, script, scene.train_camera, pose_noise=0.0)
        for f in range(2):
            assert np.abs(ds.blurred[f] - ds.sharp[f]).max() < 1e-6

    def test_m_equals_one_blur_is_sharp(self):
        scene = small_scene()
        script = make_motion(scene.chain, 1, frames=2, m=1, amplitude=1.0)
        ds = blur_oracle(scene, script, scene.train_camera, pose_noise=0.0)
        for f in range(2):
            np.testing.assert_array_equal(ds.blurred[f], ds.sharp[f])

    def test_mean_linearity(self):
        scene = small_scene()
        script = make_motion(scene.chain, 2, frames=1, m=5, amplitude=1.0)
        ds = blur_oracle(scene, script, scene.train_camera, pose_noise=0.0)
        renders = [render_ground_truth(scene, p, scene.train_camera)
                   for p in script.subframe_poses[0]]
        mean_of_means = np.mean([r[..., :3].mean() for r in renders])
        assert abs(ds.blurred[0].mean() - mean_of_means) < 1e-10

    def test_mask_is_center_alpha_threshold(self):
        scene = small_scene()
        script = make_motion(scene.chain, 3, frames=1, m=3, amplitude=1.0)
        ds = blur_oracle(scene, script, scene.train_camera, pose_noise=0.0)
        center = render_ground_truth(scene, script.center_pose(0),
                                     scene.train_camera)
        np.testing.assert_array_equal(ds.masks[0], center[..., 3] > 0.5)
        assert ds.masks[0].any() and not ds.masks[0].all()

    def test_noiseless_input_pose_is_center_pose(self):
        scene = small_scene()
        script = make_motion(scene.chain, 4, frames=2, m=3, amplitude=1.0)
        ds = blur_oracle(scene, script, scene.train_camera, pose_noise=0.0)
        for f in range(2):
            np.testing.assert_array_equal(ds.input_poses[f].as_flat(),
                                          script.center_pose(f).as_flat())

    def test_pose_noise_perturbs_but_normalizes(self):
        scene = small_scene()
        script = make_motion(scene.chain, 5, frames=1, m=3, amplitude=1.0)
        ds = blur_oracle(scene, script, scene.train_camera,
                         pose_noise=0.01, noise_seed=9)
        pose = ds.input_poses[0]
        assert not np.array_equal(pose.as_flat(), script.center_pose(0).as_flat())
        np.testing.assert_allclose(np.linalg.norm(pose.joint_rotations, axis=1),
                                   1.0, atol=1e-12)

    def test_motion_actually_blurs(self):
        scene = small_scene()
        script = make_motion(scene.chain, 6, frames=1, m=9, amplitude=2.0,
                             max_step=0.05)
        ds = blur_oracle(scene, script, scene.train_camera, pose_noise=0.0)
        assert np.abs(ds.blurred[0] - ds.sharp[0]).max() > 0.05


class TestDatasetIO:
    def make_ds(self):
        scene = small_scene()
        script = make_motion(scene.chain, 0, frames=2, m=3, amplitude=1.0)
        return blur_oracle(scene, script, scene.train_camera, pose_noise=0.0)

    def test_roundtrip(self, tmp_path):
        ds = self.make_ds()
        write_dataset(ds, str(tmp_path / "d1"))
        back = read_dataset(str(tmp_path / "d1"))
        assert back.n_frames == ds.n_frames
        assert back.m == ds.m and back.seed == ds.seed
        for f in range(ds.n_frames):
            np.testing.assert_array_equal(back.blurred[f],
                                          ds.blurred[f].astype(np.float32))
            np.testing.assert_array_equal(back.masks[f], ds.masks[f])
            np.testing.assert_array_equal(back.input_poses[f].as_flat(),
                                          ds.input_poses[f].as_flat())
        np.testing.assert_array_equal(back.camera.world_to_camera.rotation,
                                      ds.camera.world_to_camera.rotation)

    def test_second_roundtrip_bit_identical(self, tmp_path):
        ds = self.make_ds()
        write_dataset(ds, str(tmp_path / "a"))
        first = read_dataset(str(tmp_path / "a"))
        write_dataset(first, str(tmp_path / "b"))
        second = read_dataset(str(tmp_path / "b"))
        for f in range(first.n_frames):
            np.testing.assert_array_equal(first.blurred[f], second.blurred[f])
            np.testing.assert_array_equal(first.sharp[f], second.sharp[f])

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="manifest"):
            read_dataset(str(tmp_path))

    def test_corrupt_manifest_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(ValueError, match="corrupt"):
            read_dataset(str(tmp_path))

    def test_manifest_records_m_and_seed(self, tmp_path):
        import json
        ds = self.make_ds()
        write_dataset(ds, str(tmp_path / "d"))
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["m"] == ds.m
        assert manifest["seed"] == ds.seed
