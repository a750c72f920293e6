"""The differentiable avatar: deformation pipeline plus appearance.

Forward data flow for one pose:

1. Encode the pose's joint quaternions to a latent ``l_pose``.
2. Non-rigid net maps ``[x_canonical, l_pose]`` to offsets: position delta,
   log-scale delta, and a rotation delta applied as a quaternion product.
3. Skinning net (on warped positions) yields softmax blend weights over the
   chain's per-joint skinning transforms; the blended linear map carries
   positions and covariances from canonical to observation space.
4. Observation-space Gaussians are splatted; colors come from a net fed
   per-Gaussian features, the view direction pulled back through the blended
   linear map (canonicalized), and ``l_pose``.

Every stage records what its hand-written backward needs; gradients with
respect to the pose itself are intentionally not computed here (exposure
trajectories are differentiated by finite differences at a higher level).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .articulation import (KinematicChain, Pose, blend_transforms, fk_arrays,
                           softmax, softmax_grad)
from .geom import (build_covariance, build_covariance_grads, normalize_grad,
                   quat_mul, quat_mul_grads, quat_normalize)
from .render import RasterSettings, render_backward, render_splats, sigmoid
from .scene import GaussianCloud
from .tinynet import DenseNet

__all__ = ["AvatarNets", "AvatarModel", "DeformContext", "AvatarRenderContext",
           "deform_forward", "deform_backward", "render_avatar",
           "render_avatar_backward", "POSE_LATENT_DIM"]

POSE_LATENT_DIM = 16


@dataclass
class AvatarNets:
    pose_encoder: DenseNet   # flattened joint quats (4K) -> pose latent
    nonrigid: DenseNet       # [x_c, l_pose] -> [dx(3), dlog_scale(3), drot(3)]
    skinning: DenseNet       # x_nr -> K blend logits
    color: DenseNet          # [features, canonical view dir, l_pose] -> rgb logits
    fusion: DenseNet         # [l_pose, l_frame, l_pixel(16), rgb] -> mask logit

    @classmethod
    def create(cls, n_joints: int, feature_dim: int, rng,
               latent_dim: int = POSE_LATENT_DIM,
               deform_hidden: int = 128, color_hidden: int = 64,
               fusion_hidden: int = 64, frame_dim: int = 16,
               pixel_dim: int = 16) -> "AvatarNets":
        return cls(
            pose_encoder=DenseNet.create([4 * n_joints, latent_dim], rng,
                                         hidden_activation="none"),
            nonrigid=DenseNet.create(
                [3 + latent_dim] + [deform_hidden] * 3 + [9], rng, zero_last=True),
            skinning=DenseNet.create([3] + [deform_hidden] * 4 + [n_joints], rng),
            color=DenseNet.create([feature_dim + 3 + latent_dim, color_hidden, 3], rng),
            fusion=DenseNet.create(
                [latent_dim + frame_dim + pixel_dim + 3] + [fusion_hidden] * 4 + [1],
                rng, zero_last=True),
        )

    def named(self):
        yield "pose_encoder", self.pose_encoder
        yield "nonrigid", self.nonrigid
        yield "skinning", self.skinning
        yield "color", self.color
        yield "fusion", self.fusion

    def named_params(self):
        for net_name, net in self.named():
            for p_name, p in net.named_params():
                yield f"{net_name}.{p_name}", p


@dataclass
class AvatarModel:
    chain: KinematicChain
    cloud: GaussianCloud
    nets: AvatarNets

    def named_params(self):
        for name, p in self.cloud.named_params():
            yield f"cloud.{name}", p
        yield from self.nets.named_params()


@dataclass
class DeformContext:
    """Intermediates of deform_forward, consumed by deform_backward."""

    pose_vec: np.ndarray
    enc_tape: object
    l_pose: np.ndarray
    nr_tape: object
    x_nr: np.ndarray
    logs_nr: np.ndarray
    r_unit: np.ndarray        # normalized canonical rotations
    delta_raw: np.ndarray     # [1, drot] before normalization
    delta: np.ndarray
    q_nr: np.ndarray
    sigma_nr: np.ndarray
    skin_tape: object
    weights: np.ndarray       # (N, K) blend weights
    fk_rot: np.ndarray        # (K, 3, 3)
    fk_trans: np.ndarray      # (K, 3)
    a_blend: np.ndarray       # (N, 3, 3)
    x_obs: np.ndarray         # (N, 3)
    sigma_obs: np.ndarray     # (N, 3, 3)


def deform_forward(model: AvatarModel, pose: Pose) -> DeformContext:
    """Carry the canonical cloud to observation space under `pose`."""
    cloud = model.cloud
    nets = model.nets
    fk_rot, fk_trans = fk_arrays(model.chain, pose)

    pose_vec = pose.joint_rotations.ravel()
    l_pose, enc_tape = nets.pose_encoder.forward(pose_vec)

    n = cloud.n
    nr_in = np.concatenate(
        [cloud.positions, np.broadcast_to(l_pose, (n, l_pose.size))], axis=1)
    nr_out, nr_tape = nets.nonrigid.forward(nr_in)
    d_pos, d_logs, d_rot = nr_out[:, 0:3], nr_out[:, 3:6], nr_out[:, 6:9]

    x_nr = cloud.positions + d_pos
    logs_nr = cloud.log_scales + d_logs
    r_unit = quat_normalize(cloud.rotations)
    delta_raw = np.concatenate([np.ones((n, 1)), d_rot], axis=1)
    delta = delta_raw / np.linalg.norm(delta_raw, axis=1, keepdims=True)
    q_nr = quat_mul(r_unit, delta)
    sigma_nr = build_covariance(logs_nr, q_nr)

    skin_logits, skin_tape = nets.skinning.forward(x_nr)
    weights = softmax(skin_logits)
    a_blend, b_blend = blend_transforms(weights, fk_rot, fk_trans)
    x_obs = np.einsum("nij,nj->ni", a_blend, x_nr) + b_blend
    sigma_obs = np.einsum("nab,nbc,ndc->nad", a_blend, sigma_nr, a_blend)

    return DeformContext(
        pose_vec=pose_vec, enc_tape=enc_tape, l_pose=l_pose, nr_tape=nr_tape,
        x_nr=x_nr, logs_nr=logs_nr, r_unit=r_unit, delta_raw=delta_raw,
        delta=delta, q_nr=q_nr, sigma_nr=sigma_nr, skin_tape=skin_tape,
        weights=weights, fk_rot=fk_rot, fk_trans=fk_trans, a_blend=a_blend,
        x_obs=x_obs, sigma_obs=sigma_obs)


def _accumulate_net_grads(grads: dict, prefix: str, param_grads) -> None:
    for i, (dw, db) in enumerate(param_grads):
        grads[f"{prefix}.W{i}"] = grads.get(f"{prefix}.W{i}", 0.0) + dw
        grads[f"{prefix}.b{i}"] = grads.get(f"{prefix}.b{i}", 0.0) + db


def deform_backward(model: AvatarModel, ctx: DeformContext,
                    d_x_obs: np.ndarray, d_sigma_obs: np.ndarray,
                    d_a_extra: np.ndarray | None = None,
                    d_l_pose_extra: np.ndarray | None = None,
                    d_weights_extra: np.ndarray | None = None) -> dict:
    """Backprop through deform_forward.

    Extra gradient hooks let callers inject contributions that enter the
    blended map (view-direction canonicalization), the pose latent (color
    and fusion nets), or the blend weights (skinning supervision).
    Returns a dict of gradients keyed like AvatarModel.named_params.
    """
    nets = model.nets
    g_sym = d_sigma_obs + np.swapaxes(d_sigma_obs, 1, 2)

    # sigma_obs = A sigma_nr A^T and x_obs = A x_nr + b
    d_a = np.einsum("nab,nbc,ncd->nad", g_sym, ctx.a_blend, ctx.sigma_nr)
    d_a += np.einsum("ni,nj->nij", d_x_obs, ctx.x_nr)
    if d_a_extra is not None:
        d_a = d_a + d_a_extra
    d_b = d_x_obs
    d_sigma_nr = np.einsum("nba,nbc,ncd->nad", ctx.a_blend, d_sigma_obs, ctx.a_blend)
    d_x_nr = np.einsum("nij,ni->nj", ctx.a_blend, d_x_obs)

    # blend: A = sum_k w_k R_k, b = sum_k w_k t_k
    d_weights = (np.einsum("nij,kij->nk", d_a, ctx.fk_rot)
                 + d_b @ ctx.fk_trans.T)
    if d_weights_extra is not None:
        d_weights = d_weights + d_weights_extra
    d_skin_logits = softmax_grad(ctx.weights, d_weights)
    skin_params, d_x_nr_skin = nets.skinning.backward(ctx.skin_tape, d_skin_logits)
    d_x_nr = d_x_nr + d_x_nr_skin

    # covariance assembly in the warped frame
    d_logs_nr, d_q_nr = build_covariance_grads(ctx.logs_nr, ctx.q_nr, d_sigma_nr)
    d_r_unit, d_delta = quat_mul_grads(ctx.r_unit, ctx.delta, d_q_nr)
    d_rotations = normalize_grad(model.cloud.rotations, d_r_unit)
    d_delta_raw = normalize_grad(ctx.delta_raw, d_delta)

    # gather the nonrigid net output gradient [d_pos, d_logs, d_rot]
    d_nr_out = np.concatenate(
        [d_x_nr, d_logs_nr, d_delta_raw[:, 1:]], axis=1)
    nr_params, d_nr_in = nets.nonrigid.backward(ctx.nr_tape, d_nr_out)

    d_positions = d_x_nr + d_nr_in[:, :3]
    d_l_pose = d_nr_in[:, 3:].sum(axis=0)
    if d_l_pose_extra is not None:
        d_l_pose = d_l_pose + d_l_pose_extra
    enc_params, _ = nets.pose_encoder.backward(ctx.enc_tape, d_l_pose)

    grads = {
        "cloud.positions": d_positions,
        "cloud.log_scales": d_logs_nr,
        "cloud.rotations": d_rotations,
    }
    _accumulate_net_grads(grads, "skinning", skin_params)
    _accumulate_net_grads(grads, "nonrigid", nr_params)
    _accumulate_net_grads(grads, "pose_encoder", enc_params)
    return grads


@dataclass
class AvatarRenderContext:
    deform: DeformContext
    render: object            # RenderContext
    opacity: np.ndarray
    colors: np.ndarray
    color_tape: object | None
    view_rel: np.ndarray | None     # x_obs - camera center
    view_unit: np.ndarray | None
    canon_raw: np.ndarray | None    # A^T view_unit before normalization
    explicit_colors: bool


def render_avatar(model: AvatarModel, pose: Pose, camera, background,
                  settings: RasterSettings, colors_override=None):
    """Render the avatar at `pose`. Returns (image (H, W, 4), context).

    `colors_override` (N, 3) bypasses the color net; used for ground-truth
    clouds with fixed albedo.
    """
    dctx = deform_forward(model, pose)
    cloud = model.cloud
    opacity = sigmoid(cloud.opacity_logits)

    if colors_override is not None:
        colors = np.asarray(colors_override, dtype=np.float64)
        color_tape = view_rel = view_unit = canon_raw = None
    else:
        view_rel = dctx.x_obs - camera.position
        view_unit = view_rel / np.linalg.norm(view_rel, axis=1, keepdims=True)
        canon_raw = np.einsum("nij,ni->nj", dctx.a_blend, view_unit)
        canon = canon_raw / np.linalg.norm(canon_raw, axis=1, keepdims=True)
        col_in = np.concatenate(
            [cloud.color_features, canon,
             np.broadcast_to(dctx.l_pose, (cloud.n, dctx.l_pose.size))], axis=1)
        col_logits, color_tape = model.nets.color.forward(col_in)
        colors = sigmoid(col_logits)

    image, rctx = render_splats(dctx.x_obs, dctx.sigma_obs, colors, opacity,
                                camera, background, settings)
    return image, AvatarRenderContext(
        deform=dctx, render=rctx, opacity=opacity, colors=colors,
        color_tape=color_tape, view_rel=view_rel, view_unit=view_unit,
        canon_raw=canon_raw, explicit_colors=colors_override is not None)


def render_avatar_backward(model: AvatarModel, actx: AvatarRenderContext,
                           d_rgb, d_alpha,
                           d_x_obs_extra=None, d_sigma_obs_extra=None,
                           d_weights_extra=None, d_l_pose_extra=None):
    """Backprop a loss on the rendered image through the whole pipeline.

    Extra hooks admit regularizers defined directly on observation-space
    positions/covariances (isometric losses), blend weights (skinning
    supervision), or the pose latent (pose-conditioned consumers outside
    this render). Returns (grads dict, RenderGrads) where the second item
    carries view-space gradient magnitudes for density control.
    """
    rgrads = render_backward(actx.render, d_rgb, d_alpha)
    d_x_obs = rgrads.d_positions
    d_sigma_obs = rgrads.d_sigma
    if d_x_obs_extra is not None:
        d_x_obs = d_x_obs + d_x_obs_extra
    if d_sigma_obs_extra is not None:
        d_sigma_obs = d_sigma_obs + d_sigma_obs_extra

    d_logits = rgrads.d_opacities * actx.opacity * (1.0 - actx.opacity)
    feature_dim = model.cloud.feature_dim
    d_features = np.zeros((model.cloud.n, feature_dim))
    d_a_extra = None
    d_l_pose = None if d_l_pose_extra is None else np.asarray(
        d_l_pose_extra, dtype=np.float64)
    color_params = None

    if not actx.explicit_colors:
        d_col_logits = rgrads.d_colors * actx.colors * (1.0 - actx.colors)
        color_params, d_col_in = model.nets.color.backward(
            actx.color_tape, d_col_logits)
        d_features = d_col_in[:, :feature_dim]
        d_canon = d_col_in[:, feature_dim:feature_dim + 3]
        d_l_pose_color = d_col_in[:, feature_dim + 3:].sum(axis=0)
        d_l_pose = (d_l_pose_color if d_l_pose is None
                    else d_l_pose + d_l_pose_color)
        d_canon_raw = normalize_grad(actx.canon_raw, d_canon)
        # canon_raw = A^T v: gradient splits into the map and the view ray
        d_a_extra = np.einsum("ni,nj->nij", actx.view_unit, d_canon_raw)
        d_view_unit = np.einsum("nij,nj->ni", actx.deform.a_blend, d_canon_raw)
        d_x_obs = d_x_obs + normalize_grad(actx.view_rel, d_view_unit)

    grads = deform_backward(model, actx.deform, d_x_obs, d_sigma_obs,
                            d_a_extra=d_a_extra,
                            d_l_pose_extra=d_l_pose,
                            d_weights_extra=d_weights_extra)
    grads["cloud.opacity_logits"] = d_logits
    grads["cloud.color_features"] = d_features
    if color_params is not None:
        _accumulate_net_grads(grads, "color", color_params)
    return grads, rgrads
