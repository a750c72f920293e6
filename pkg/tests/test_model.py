"""Tests for the composed avatar pipeline (deformation + appearance)."""

import numpy as np
import pytest

from blursplat.articulation import KinematicChain, Pose
from blursplat.geom import quat_from_axis_angle
from blursplat.gradcheck import check_gradients, make_check_scene
from blursplat.model import (
    AvatarModel,
    AvatarNets,
    deform_forward,
    render_avatar,
    render_avatar_backward,
)
from blursplat.render import GRADCHECK_SETTINGS
from blursplat.scene import GaussianCloud, init_from_chain_surface


def make_model(seed=0, n=20, n_joints=3, feature_dim=4, zero_deform=True):
    rng = np.random.default_rng(seed)
    chain = KinematicChain(
        parents=[-1, 0, 1],
        offsets=[[0.0, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.4, 0.0]],
        radii=[0.15, 0.1, 0.08],
    )
    cloud = init_from_chain_surface(chain, n, rng, feature_dim=feature_dim)
    nets = AvatarNets.create(n_joints, feature_dim, rng, deform_hidden=8,
                             color_hidden=8, fusion_hidden=8)
    if not zero_deform:
        nets.nonrigid.weights[-1][:] = rng.uniform(-0.1, 0.1,
                                                   size=nets.nonrigid.weights[-1].shape)
    return AvatarModel(chain, cloud, nets)


class TestDeformInvariants:
    def test_rest_pose_with_zero_offsets_is_identity(self):
        model = make_model()
        ctx = deform_forward(model, Pose.rest(3))
        np.testing.assert_allclose(ctx.x_obs, model.cloud.positions, atol=1e-12)
        np.testing.assert_allclose(ctx.a_blend,
                                   np.tile(np.eye(3), (model.cloud.n, 1, 1)),
                                   atol=1e-12)

    def test_zero_rotation_delta_keeps_canonical_orientation(self):
        model = make_model()
        ctx = deform_forward(model, Pose.rest(3))
        np.testing.assert_allclose(ctx.q_nr, ctx.r_unit, atol=1e-15)

    def test_root_translation_is_exact_shift(self):
        model = make_model()
        pose = Pose.rest(3)
        base = deform_forward(model, pose)
        pose.root_translation[:] = [0.3, -0.2, 0.55]
        moved = deform_forward(model, pose)
        np.testing.assert_allclose(moved.x_obs - base.x_obs,
                                   np.tile(pose.root_translation, (model.cloud.n, 1)),
                                   atol=1e-12)
        np.testing.assert_allclose(moved.sigma_obs, base.sigma_obs, atol=1e-12)

    def test_root_rotation_rotates_covariances(self):
        model = make_model()
        pose = Pose.rest(3)
        base = deform_forward(model, pose)
        pose.root_orientation = quat_from_axis_angle([0, 0, 1], 0.8)
        rot = deform_forward(model, pose)
        from blursplat.geom import quat_to_rotmat
        rmat = quat_to_rotmat(pose.root_orientation)
        np.testing.assert_allclose(
            rot.sigma_obs, np.einsum("ab,nbc,dc->nad", rmat, base.sigma_obs, rmat),
            atol=1e-10)

    def test_blend_weights_rows_sum_to_one(self):
        model = make_model(zero_deform=False)
        rng = np.random.default_rng(5)
        pose = Pose(rng.normal(size=3) * 0.1,
                    np.array([1.0, 0.1, -0.05, 0.2]) / np.linalg.norm([1.0, 0.1, -0.05, 0.2]),
                    np.tile([1.0, 0.0, 0.0, 0.0], (3, 1)))
        ctx = deform_forward(model, pose)
        np.testing.assert_allclose(ctx.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_covariances_stay_symmetric_positive(self):
        model = make_model(seed=3, zero_deform=False)
        rng = np.random.default_rng(7)
        quats = np.concatenate([np.ones((3, 1)), rng.uniform(-0.4, 0.4, (3, 3))], axis=1)
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        pose = Pose(rng.normal(size=3) * 0.2, np.array([1.0, 0, 0, 0]), quats)
        ctx = deform_forward(model, pose)
        np.testing.assert_allclose(ctx.sigma_obs, np.swapaxes(ctx.sigma_obs, 1, 2),
                                   atol=1e-12)
        assert np.linalg.eigvalsh(ctx.sigma_obs).min() > 0.0

    def test_pose_joint_count_checked(self):
        model = make_model()
        with pytest.raises(ValueError):
            deform_forward(model, Pose.rest(5))


class TestAvatarRender:
    def test_explicit_colors_bypass_color_net(self):
        model = make_model(zero_deform=False)
        colors = np.tile([0.8, 0.1, 0.1], (model.cloud.n, 1))
        img, actx = render_avatar(model, Pose.rest(3), _camera(), np.zeros(3),
                                  GRADCHECK_SETTINGS, colors_override=colors)
        assert actx.explicit_colors
        assert img[..., 0].max() > img[..., 1].max()

    def test_render_is_deterministic(self):
        model = make_model(zero_deform=False)
        a, _ = render_avatar(model, Pose.rest(3), _camera(), np.zeros(3),
                             GRADCHECK_SETTINGS)
        b, _ = render_avatar(model, Pose.rest(3), _camera(), np.zeros(3),
                             GRADCHECK_SETTINGS)
        np.testing.assert_array_equal(a, b)

    def test_backward_returns_grads_for_all_active_params(self):
        scene = make_check_scene(0)
        img, actx = render_avatar(scene.model, scene.pose, scene.camera,
                                  scene.background, GRADCHECK_SETTINGS)
        diff = img - scene.target
        grads, rgrads = render_avatar_backward(scene.model, actx,
                                               diff[..., :3], diff[..., 3])
        expected = {name for name, _ in scene.model.named_params()
                    if not name.startswith("fusion.")}
        assert expected <= set(grads.keys())
        for name in expected:
            param = dict(scene.model.named_params())[name]
            assert np.asarray(grads[name]).shape == param.shape
        assert rgrads.mean2d_norm.shape == (scene.model.cloud.n,)


class TestGradcheckHarness:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_pipeline_fd(self, seed):
        scene = make_check_scene(seed)
        report = check_gradients(scene)
        worst = max(v[0] for v in report.values())
        compared = sum(v[1] for v in report.values())
        assert compared > 100
        assert worst < 1e-3, f"worst rel err {worst:.2e}"


def _camera():
    from blursplat.render import Camera
    return Camera.look_at([0, 0.2, -2.5], [0, 0.3, 0], [0, 1, 0], 12, 12, 14.0)
