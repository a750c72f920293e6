"""Losses, staged training schedule, and the end-to-end optimization loop.

Training proceeds in three stages: sharp single-pose fitting, exposure
trajectory recovery through the blur average, and per-pixel fusion.
Cloud and network parameters get analytic gradients; exposure
trajectories get central finite differences.
"""

import csv
import dataclasses
import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import blur as blur_ops
from .articulation import Pose, prior_skin_weights
from .blur import (
    ExposureTrajectory,
    blend_images,
    blend_images_backward,
    fusion_mask,
    fusion_mask_backward,
    interpolate_pose,
    positional_encoding,
    sample_virtual_poses,
    synthesize_blur,
    trajectory_gradients,
)
from .checkpoint import save_checkpoint
from .articulation import fk_arrays_batch
from .geom import build_covariance, quat_normalize, slerp
from .metrics import psnr, ssim
from .model import (
    POSE_LATENT_DIM,
    AvatarModel,
    AvatarNets,
    _accumulate_net_grads,
    render_avatar,
    render_avatar_backward,
)
from .render import RasterSettings
from .scene import (
    DensifyConfig,
    DensifyStats,
    densify_and_prune,
    init_from_chain_surface,
    knn_edges,
)
from .tinynet import AdamState

FRAME_EMBED_DIM = 16


# ---------------------------------------------------------------- losses

def _l1(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_rgb(pred, gt) -> float:
    """Mean absolute error over the full image."""
    return _l1(pred, gt)[0]


def loss_rgb_grad(pred, gt):
    return _l1(pred, gt)


def loss_mask(alpha, gt_mask) -> float:
    """Mean absolute error between accumulated alpha and the binary mask."""
    return _l1(alpha, gt_mask)[0]


def loss_mask_grad(alpha, gt_mask):
    return _l1(alpha, gt_mask)


def loss_skin(pred_weights, prior_weights) -> float:
    """Mean squared difference to the capsule-distance skinning prior."""
    return loss_skin_grad(pred_weights, prior_weights)[0]


def loss_skin_grad(pred_weights, prior_weights):
    pred = np.asarray(pred_weights, dtype=np.float64)
    prior = np.asarray(prior_weights, dtype=np.float64)
    if pred.shape != prior.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {prior.shape}")
    diff = pred - prior
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def loss_isometric(x_canon, sigma_canon, x_obs, sigma_obs, edges):
    """Edge-length and covariance-difference drift of the deformation.

    Over canonical k-NN edges (i, j):
      isopos = mean (|x_obs_i - x_obs_j| - |x_canon_i - x_canon_j|)^2
      isocov = mean |(S_obs_i - S_obs_j) - (S_canon_i - S_canon_j)|_F^2
    Both are zero for rigid motion. Returns (isopos, isocov).
    """
    return loss_isometric_grads(x_canon, sigma_canon, x_obs, sigma_obs, edges)[:2]


def loss_isometric_grads(x_canon, sigma_canon, x_obs, sigma_obs, edges):
    """(isopos, isocov, d_x_obs, d_sigma_obs); canonical side is a fixed target."""
    edges = np.asarray(edges, dtype=np.int64)
    n = x_obs.shape[0]
    d_x = np.zeros_like(x_obs)
    d_sigma = np.zeros_like(sigma_obs)
    if edges.shape[0] == 0 or n < 2:
        warnings.warn("isometric loss skipped: fewer than two Gaussians")
        return 0.0, 0.0, d_x, d_sigma
    i, j = edges[:, 0], edges[:, 1]
    e = edges.shape[0]

    delta_o = x_obs[i] - x_obs[j]
    dist_o = np.linalg.norm(delta_o, axis=1)
    dist_c = np.linalg.norm(x_canon[i] - x_canon[j], axis=1)
    gap = dist_o - dist_c
    isopos = float(np.mean(gap ** 2))
    unit = delta_o / np.maximum(dist_o, 1e-12)[:, None]
    d_edge = (2.0 * gap / e)[:, None] * unit
    np.add.at(d_x, i, d_edge)
    np.add.at(d_x, j, -d_edge)

    drift = (sigma_obs[i] - sigma_obs[j]) - (sigma_canon[i] - sigma_canon[j])
    isocov = float(np.mean(np.sum(drift ** 2, axis=(1, 2))))
    d_drift = 2.0 * drift / e
    np.add.at(d_sigma, i, d_drift)
    np.add.at(d_sigma, j, -d_drift)
    return isopos, isocov, d_x, d_sigma


def total_loss(parts: dict, cfg: "TrainConfig", iteration: int = 0) -> float:
    """Weighted sum of the loss parts at the given iteration's weights."""
    return (parts.get("rgb", 0.0)
            + cfg.lambda_mask * parts.get("mask", 0.0)
            + cfg.lambda_skin_at(iteration) * parts.get("skin", 0.0)
            + cfg.lambda_isopos * parts.get("isopos", 0.0)
            + cfg.lambda_isocov * parts.get("isocov", 0.0))


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    """Schedule, loss weights, learning rates, and density control.

    `lambda_percept` is kept for completeness but the perceptual term is
    not implemented; it must stay 0.
    """

    total_iters: int = 15000
    traj_start: int = 3000
    fusion_start: int = 7000
    n_virtual: int = 5
    motion_enabled: bool = True
    fusion_enabled: bool = True

    lambda_percept: float = 0.0
    lambda_mask: float = 0.1
    lambda_skin_init: float = 10.0
    lambda_skin_final: float = 0.1
    lambda_isopos: float = 1.0
    lambda_isocov: float = 100.0

    n_init_gaussians: int = 600
    feature_dim: int = 16
    knn_k: int = 5

    lr_position_init: float = 1.6e-4   # in units of scene extent
    lr_position_final: float = 1.6e-6
    lr_scaling: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.05
    lr_features: float = 2.5e-3
    lr_nets: float = 1e-3
    lr_embedding: float = 1e-3
    lr_trajectory: float = 1e-4

    densify_from: int = 500
    densify_until: int = 10000
    densify_interval: int = 500
    densify_grad_threshold: float = 2e-4
    max_gaussians: int = 20000

    traj_fd_h: float = 1e-3
    traj_grad_mode: str = "frozen"     # "frozen" (fast) or "full" (exact FD)
    traj_interval: int = 1
    traj_warm_start: bool = True

    checkpoint_interval: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if not (0 < self.traj_start < self.total_iters):
            raise ValueError("traj_start must lie strictly inside the run")
        if not (0 < self.fusion_start < self.total_iters):
            raise ValueError("fusion_start must lie strictly inside the run")
        if self.traj_start > self.fusion_start:
            raise ValueError("trajectory stage must begin before fusion stage")
        if self.n_virtual < 1:
            raise ValueError("need at least one virtual pose")
        if self.lambda_percept != 0.0:
            raise ValueError("perceptual loss is not implemented; "
                             "lambda_percept must be 0")
        for name in ("lambda_mask", "lambda_skin_init", "lambda_skin_final",
                     "lambda_isopos", "lambda_isocov"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.traj_grad_mode not in ("frozen", "full"):
            raise ValueError("traj_grad_mode must be 'frozen' or 'full'")
        if self.traj_interval < 1 or self.knn_k < 1:
            raise ValueError("traj_interval and knn_k must be positive")

    def lambda_skin_at(self, iteration: int) -> float:
        """Exponential decay from lambda_skin_init to lambda_skin_final."""
        if self.lambda_skin_init == 0.0 or self.total_iters <= 1:
            return self.lambda_skin_init
        frac = min(max(iteration / (self.total_iters - 1), 0.0), 1.0)
        ratio = self.lambda_skin_final / self.lambda_skin_init
        return self.lambda_skin_init * ratio ** frac

    def lr_position_at(self, iteration: int) -> float:
        if self.total_iters <= 1:
            return self.lr_position_init
        frac = min(max(iteration / (self.total_iters - 1), 0.0), 1.0)
        return self.lr_position_init * (
            self.lr_position_final / self.lr_position_init) ** frac

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


# ---------------------------------------------------------------- frames

@dataclass
class TrainFrame:
    """One blurred observation: image, foreground mask, camera, input pose."""

    image: np.ndarray      # (H, W, 3)
    mask: np.ndarray       # (H, W) in {0, 1}
    camera: object
    pose: Pose

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3):
            raise ValueError("image and mask dimensions disagree")
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError("frame dimensions disagree with camera")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")


def frames_from_dataset(dataset) -> list:
    return [TrainFrame(image=dataset.blurred[f], mask=dataset.masks[f],
                       camera=dataset.camera, pose=dataset.input_poses[f])
            for f in range(dataset.n_frames)]


# ---------------------------------------------------------------- trainer

_CLOUD_LR_KEYS = {
    "cloud.log_scales": "lr_scaling",
    "cloud.rotations": "lr_rotation",
    "cloud.opacity_logits": "lr_opacity",
    "cloud.color_features": "lr_features",
}


def build_model(chain, config: TrainConfig, rng) -> AvatarModel:
    cloud = init_from_chain_surface(chain, config.n_init_gaussians, rng,
                                    feature_dim=config.feature_dim, opacity=0.1)
    nets = AvatarNets.create(chain.n_joints, config.feature_dim, rng)
    return AvatarModel(chain=chain, cloud=cloud, nets=nets)


class Trainer:
    """Owns the model, per-frame trajectories/embeddings, and the loop."""

    def __init__(self, dataset, config: TrainConfig, model: AvatarModel = None,
                 out_dir: str = None):
        config.validate()
        self.cfg = config
        self.dataset = dataset
        self.frames = frames_from_dataset(dataset)
        if not self.frames:
            raise ValueError("dataset has no frames")
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        if model is None:
            model = build_model(dataset.chain, config,
                                np.random.default_rng(seeds[0]))
        self.model = model
        self.trajectories = [ExposureTrajectory.from_pose(f.pose)
                             for f in self.frames]
        self.embeddings = np.zeros((len(self.frames), FRAME_EMBED_DIM))
        self.adam = AdamState()
        self.settings = RasterSettings()
        self.background = np.asarray(dataset.background, dtype=np.float64)
        self.edges = knn_edges(model.cloud.positions, config.knn_k)
        self.stats = DensifyStats.zeros(model.cloud.n)
        self.shuffle_rng = np.random.default_rng(seeds[1])
        self.diameter = dataset.chain.diameter()
        h, w = self.frames[0].mask.shape
        self.pixel_enc = positional_encoding(h, w)
        self.out_dir = out_dir
        self.iteration = 0
        self.log_rows = []
        self._traj_warm_started = False
        self._order = []

    # ---------------- schedule

    def stage_at(self, iteration: int) -> str:
        cfg = self.cfg
        if not cfg.motion_enabled or iteration < cfg.traj_start:
            return "sharp"
        if cfg.fusion_enabled and iteration >= cfg.fusion_start:
            return "fusion"
        return "blur"

    def _next_frame_index(self) -> int:
        if not self._order:
            order = np.arange(len(self.frames))
            self.shuffle_rng.shuffle(order)
            self._order = list(order)
        return int(self._order.pop(0))

    def _lr_for(self, name: str, iteration: int) -> float:
        if name == "cloud.positions":
            return self.cfg.lr_position_at(iteration) * self.diameter
        key = _CLOUD_LR_KEYS.get(name)
        if key is not None:
            return getattr(self.cfg, key)
        return self.cfg.lr_nets

    # ---------------- one iteration

    def train_step(self) -> dict:
        cfg = self.cfg
        it = self.iteration
        j = self._next_frame_index()
        frame = self.frames[j]
        stage = self.stage_at(it)
        if (stage != "sharp" and cfg.traj_warm_start
                and not self._traj_warm_started):
            self._warm_start_trajectories()
        model = self.model
        cloud = model.cloud
        grads = {}

        vctxs = None
        fusion_pack = None
        if stage == "sharp":
            image, center_actx = render_avatar(model, frame.pose, frame.camera,
                                               self.background, self.settings)
            pred = image[..., :3]
            center_alpha = image[..., 3]
        else:
            traj = self.trajectories[j]
            poses = sample_virtual_poses(traj, cfg.n_virtual)
            rendered = [render_avatar(model, p, frame.camera, self.background,
                                      self.settings) for p in poses]
            images = [r[0] for r in rendered]
            vctxs = [r[1] for r in rendered]
            b_rgb = synthesize_blur(images)[..., :3]
            c_idx = (cfg.n_virtual - 1) // 2
            if stage == "blur":
                pred = b_rgb
                center_actx = vctxs[c_idx]
                center_alpha = images[c_idx][..., 3]
            else:
                sharp_image, center_actx = render_avatar(
                    model, frame.pose, frame.camera, self.background,
                    self.settings)
                c_rgb = sharp_image[..., :3]
                center_alpha = sharp_image[..., 3]
                m, ftape = fusion_mask(model.nets.fusion,
                                       center_actx.deform.l_pose,
                                       self.embeddings[j], self.pixel_enc, c_rgb)
                pred = blend_images(c_rgb, b_rgb, m)
                fusion_pack = (c_rgb, b_rgb, m, ftape)

        v_rgb, d_pred = loss_rgb_grad(pred, frame.image)
        v_mask, d_alpha = loss_mask_grad(center_alpha, frame.mask)
        prior = prior_skin_weights(model.chain, cloud.positions)
        v_skin, d_weights = loss_skin_grad(center_actx.deform.weights, prior)
        sigma_canon = build_covariance(cloud.log_scales,
                                       quat_normalize(cloud.rotations))
        v_isopos, v_isocov, d_x_iso, d_sig_iso = loss_isometric_grads(
            cloud.positions, sigma_canon, center_actx.deform.x_obs,
            center_actx.deform.sigma_obs, self.edges)

        parts = {"rgb": v_rgb, "mask": v_mask, "skin": v_skin,
                 "isopos": v_isopos, "isocov": v_isocov}
        total = total_loss(parts, cfg, it)
        if not np.isfinite(total):
            self._abort_nonfinite(it, j, stage, parts)

        d_alpha_w = cfg.lambda_mask * d_alpha
        extras = {
            "d_x_obs_extra": cfg.lambda_isopos * d_x_iso,
            "d_sigma_obs_extra": cfg.lambda_isocov * d_sig_iso,
            "d_weights_extra": cfg.lambda_skin_at(it) * d_weights,
        }
        zero_alpha = np.zeros_like(center_alpha)
        rgrads_virtual = None

        if stage == "sharp":
            g, rg = render_avatar_backward(model, center_actx, d_pred,
                                           d_alpha_w, **extras)
            self._merge(grads, g)
            self.stats.update(rg.mean2d_norm, rg.d_positions, rg.visible)
        elif stage == "blur":
            rgrads_virtual = []
            for l, actx in enumerate(vctxs):
                kwargs = extras if l == c_idx else {}
                g, rg = render_avatar_backward(
                    model, actx, d_pred / cfg.n_virtual,
                    d_alpha_w if l == c_idx else zero_alpha, **kwargs)
                self._merge(grads, g)
                self.stats.update(rg.mean2d_norm, rg.d_positions, rg.visible)
                rgrads_virtual.append(rg)
        else:
            c_rgb, b_rgb, m, ftape = fusion_pack
            d_c_blend, d_b, d_m = blend_images_backward(c_rgb, b_rgb, m, d_pred)
            fus_params, d_lp_fus, d_lf, d_c_fus = fusion_mask_backward(
                model.nets.fusion, ftape, m, d_m,
                pose_dim=POSE_LATENT_DIM, frame_dim=FRAME_EMBED_DIM)
            _accumulate_net_grads(grads, "fusion", fus_params)
            g, rg = render_avatar_backward(model, center_actx,
                                           d_c_blend + d_c_fus, d_alpha_w,
                                           d_l_pose_extra=d_lp_fus, **extras)
            self._merge(grads, g)
            self.stats.update(rg.mean2d_norm, rg.d_positions, rg.visible)
            rgrads_virtual = []
            for actx in vctxs:
                g, rg = render_avatar_backward(model, actx,
                                               d_b / cfg.n_virtual, zero_alpha)
                self._merge(grads, g)
                self.stats.update(rg.mean2d_norm, rg.d_positions, rg.visible)
                rgrads_virtual.append(rg)
            self.adam.step(f"embedding.{j}", self.embeddings[j], d_lf,
                           cfg.lr_embedding)

        traj_grads = None
        if stage != "sharp" and (it - cfg.traj_start) % cfg.traj_interval == 0:
            if cfg.traj_grad_mode == "full":
                traj_grads = self._full_traj_grads(j, frame, stage, fusion_pack)
            else:
                traj_grads = self._frozen_traj_grads(self.trajectories[j],
                                                     vctxs, rgrads_virtual)

        for name, param in model.named_params():
            if name in grads:
                self.adam.step(name, param, grads[name], self._lr_for(name, it))
        if traj_grads is not None:
            self._apply_traj_step(j, traj_grads)

        self._maybe_densify(it)

        row = {"iteration": it, "stage": stage, **parts, "total": total,
               "n_gaussians": model.cloud.n}
        self.log_rows.append(row)
        self.iteration += 1
        return row

    # ---------------- trajectory gradients

    def _warm_start_trajectories(self) -> None:
        """Split each trajectory's endpoints toward the neighbouring frames.

        Equal endpoints are a stationary point of the blur objective: all
        virtual poses coincide and the sampling grid is symmetric about the
        center, so the start and end gradients are identical and bitwise-
        deterministic updates can never separate them. Neighbouring frames'
        input poses supply the missing motion direction — with back-to-back
        exposures the shutter boundary lies halfway between adjacent frame
        centers — so each endpoint is moved to that midpoint once, when the
        blur stage begins (boundary frames extrapolate their single
        neighbour's path).
        """
        self._traj_warm_started = True
        poses = [f.pose for f in self.frames]
        if len(poses) < 2:
            return
        last = len(poses) - 1
        for j, traj in enumerate(self.trajectories):
            if j > 0:
                traj.start = interpolate_pose(poses[j], poses[j - 1], 0.5)
            else:
                traj.start = interpolate_pose(poses[0], poses[1], -0.5)
            if j < last:
                traj.end = interpolate_pose(poses[j], poses[j + 1], 0.5)
            else:
                traj.end = interpolate_pose(poses[last], poses[last - 1], -0.5)

    def _apply_traj_step(self, j: int, traj_grads: dict) -> None:
        traj = self.trajectories[j]
        k = self.model.chain.n_joints
        for side in ("start", "end"):
            flat = getattr(traj, side).as_flat()
            self.adam.step(f"trajectory.{j}.{side}", flat, traj_grads[side],
                           self.cfg.lr_trajectory)
            setattr(traj, side, Pose.from_flat(flat, k).normalized())

    def _full_traj_grads(self, j: int, frame: TrainFrame, stage: str,
                         fusion_pack) -> dict:
        """Exact loss-level finite differences; n renders per probe."""
        cfg = self.cfg
        c_idx = (cfg.n_virtual - 1) // 2

        def closure(traj):
            poses = sample_virtual_poses(traj, cfg.n_virtual)
            images = [render_avatar(self.model, p, frame.camera,
                                    self.background, self.settings)[0]
                      for p in poses]
            b_rgb = synthesize_blur(images)[..., :3]
            if stage == "blur":
                # data terms only: the regularizers do not steer exposure
                return (loss_rgb(b_rgb, frame.image)
                        + cfg.lambda_mask * loss_mask(images[c_idx][..., 3],
                                                      frame.mask))
            c_rgb, _, m, _ = fusion_pack
            return loss_rgb(blend_images(c_rgb, b_rgb, m), frame.image)

        return trajectory_gradients(closure, self.trajectories[j],
                                    h=cfg.traj_fd_h)

    def _frozen_traj_grads(self, traj: ExposureTrajectory, vctxs,
                           rgrads_virtual) -> dict:
        """Finite differences through the pose-to-geometry map only.

        Per virtual pose, the pose-conditioned network outputs are frozen
        at their unperturbed values; probes re-run forward kinematics and
        skinning, and the render's analytic position/covariance gradients
        contract against the geometry deltas. This skips the (small)
        dependence of the networks and view-conditioned colors on the pose
        and costs no extra renders.
        """
        cfg = self.cfg
        chain = self.model.chain
        n = len(vctxs)
        k = chain.n_joints
        h = cfg.traj_fd_h
        # The blended transform is linear in the per-joint rigid transforms,
        # so each pose's gradient contraction collapses to fixed tensors
        # over joints; probes then cost O(K^2) instead of O(N).
        #   <d_pos, A x + b>        = sum_k rot_k:M_k + trans_k.m_k
        #   <d_sig, A S A^T>        = sum_kl rot_k:T_kl:rot_l
        pos_rot, pos_trans, sig_quad = [], [], []
        for c, rg in zip(vctxs, rgrads_virtual):
            idx = np.flatnonzero(rg.visible)
            w = c.deform.weights[idx]
            x = c.deform.x_nr[idx]
            s = c.deform.sigma_nr[idx]
            dp = rg.d_positions[idx]
            ds = rg.d_sigma[idx]
            pos_rot.append(np.einsum("nk,na,nc->kac", w, dp, x))
            pos_trans.append(np.einsum("nk,na->ka", w, dp))
            outer = (ds[:, :, :, None, None] * s[:, None, None, :, :])
            pair = (w[:, :, None] * w[:, None, :]).reshape(len(idx), k * k)
            sig_quad.append((pair.T @ outer.reshape(len(idx), 81))
                            .reshape(k, k, 3, 3, 3, 3))

        n_scalars = 7 + 4 * k
        quat_blocks = [slice(3, 7)] + [slice(7 + 4 * j, 11 + 4 * j)
                                       for j in range(k)]
        out = {}
        for side in ("start", "end"):
            if n == 1 and side == "end":
                out[side] = np.zeros(n_scalars)  # lone sample sits at the start
                continue
            # the pose pinned to the opposite endpoint never moves with this side
            skip_l = -1 if n == 1 else (n - 1 if side == "start" else 0)
            base = getattr(traj, side).as_flat()
            other = getattr(traj, "end" if side == "start" else "start")

            # all central-difference probes at once: rows 2s / 2s+1 hold +/-h
            # on scalar s, then per-quaternion renormalization as in
            # Pose.from_flat(...).normalized()
            probes = np.repeat(base[None, :], 2 * n_scalars, axis=0)
            rows = np.arange(n_scalars)
            probes[2 * rows, rows] += h
            probes[2 * rows + 1, rows] -= h
            for block in quat_blocks:
                probes[:, block] /= np.linalg.norm(probes[:, block], axis=1,
                                                   keepdims=True)
            p_t = probes[:, :3]
            p_q = probes[:, 3:7]
            p_j = probes[:, 7:].reshape(-1, k, 4)
            o_t = other.root_translation[None, :]
            o_q = other.root_orientation[None, :]
            o_j = other.joint_rotations[None, :, :]
            if side == "start":
                t0, q0, j0, t1, q1, j1 = p_t, p_q, p_j, o_t, o_q, o_j
            else:
                t0, q0, j0, t1, q1, j1 = o_t, o_q, o_j, p_t, p_q, p_j

            vals = np.zeros(2 * n_scalars)
            for l in range(n):
                if l == skip_l:
                    continue
                u = l / (n - 1) if n > 1 else 0.0
                rot, trans = fk_arrays_batch(
                    chain,
                    (1.0 - u) * t0 + u * t1,
                    slerp(q0, q1, u),
                    np.broadcast_to(slerp(j0, j1, u),
                                    (2 * n_scalars, k, 4)))
                vals += np.einsum("pkac,kac->p", rot, pos_rot[l])
                vals += np.einsum("pka,ka->p", trans, pos_trans[l])
                half = np.einsum("pkac,klabcd->plbd", rot, sig_quad[l])
                vals += np.einsum("plbd,plbd->p", half, rot)
            out[side] = (vals[0::2] - vals[1::2]) / (2.0 * h)
        return out

    # ---------------- density control

    def _maybe_densify(self, it: int) -> None:
        cfg = self.cfg
        step = it + 1
        if not (cfg.densify_from <= step <= cfg.densify_until):
            return
        if step % cfg.densify_interval != 0 or self.stats.count.sum() == 0:
            return
        dcfg = DensifyConfig(grad_threshold=cfg.densify_grad_threshold,
                             max_gaussians=cfg.max_gaussians)
        new_cloud, index = densify_and_prune(self.model.cloud, self.stats,
                                             dcfg, self.diameter)
        self.model.cloud = new_cloud
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "color_features"):
            self.adam.remap(f"cloud.{name}", index, new_cloud.n)
        self.stats = DensifyStats.zeros(new_cloud.n)
        self.edges = knn_edges(new_cloud.positions, cfg.knn_k)

    # ---------------- loop and bookkeeping

    @staticmethod
    def _merge(acc: dict, new: dict) -> None:
        for name, g in new.items():
            if name in acc:
                acc[name] = acc[name] + g
            else:
                acc[name] = g

    def _abort_nonfinite(self, it, j, stage, parts):
        detail = {"iteration": it, "frame": j, "stage": stage,
                  "parts": {k: float(v) for k, v in parts.items()},
                  "n_gaussians": int(self.model.cloud.n)}
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(os.path.join(self.out_dir, "diagnostic.json"), "w") as f:
                json.dump(detail, f, indent=2, sort_keys=True)
        raise RuntimeError(f"non-finite loss: {detail}")

    def train(self, progress=None) -> AvatarModel:
        cfg = self.cfg
        while self.iteration < cfg.total_iters:
            row = self.train_step()
            done = self.iteration
            if (self.out_dir and cfg.checkpoint_interval
                    and done % cfg.checkpoint_interval == 0
                    and done < cfg.total_iters):
                self.save(os.path.join(self.out_dir, f"ckpt_{done:06d}"))
            if progress is not None and (done % 100 == 0
                                         or done == cfg.total_iters):
                progress(row)
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "ckpt_final"))
            self.write_log(os.path.join(self.out_dir, "loss_log.csv"))
        return self.model

    def save(self, path: str) -> None:
        save_checkpoint(path, self.model, self.trajectories, self.embeddings,
                        iteration=self.iteration,
                        extra_meta={"seed": self.cfg.seed})

    def write_log(self, path: str) -> None:
        fields = ["iteration", "stage", "rgb", "mask", "skin", "isopos",
                  "isocov", "total", "n_gaussians"]
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.log_rows)


# ---------------------------------------------------------------- eval

def evaluate(model: AvatarModel, dataset, settings: RasterSettings = None,
             camera=None) -> dict:
    """Sharp renders at the input poses scored against held-out sharp GT.

    Inference uses only the sharp path; the exposure/fusion operation
    counters must not move while evaluating.
    """
    settings = settings or RasterSettings()
    camera = camera or dataset.camera
    background = np.asarray(dataset.background, dtype=np.float64)
    before = dict(blur_ops.op_counts)
    rows = []
    for f in range(dataset.n_frames):
        image, _ = render_avatar(model, dataset.input_poses[f], camera,
                                 background, settings)
        pred = image[..., :3]
        gt = np.asarray(dataset.sharp[f], dtype=np.float64)
        rows.append({"frame": f, "psnr": psnr(pred, gt),
                     "ssim": ssim(pred, gt)})
    if dict(blur_ops.op_counts) != before:
        raise AssertionError("inference path invoked exposure sampling or "
                             "fusion; sharp evaluation must not")
    return {
        "frames": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }
