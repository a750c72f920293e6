"""Exposure-time motion: trajectories, virtual poses, blur synthesis, fusion.

A frame's motion during its exposure is modeled by a pair of poses: the
configuration at shutter open and at shutter close. Virtual poses are
interpolated between them (translation linearly, every quaternion by
shortest-arc slerp), rendered sharp, and averaged into the blurred estimate.
A pose-and-pixel conditioned fusion mask then blends the sharp center render
with the blurred estimate to absorb residual mismatch.

The module keeps call counters for sampling and fusion so evaluation code
can assert that neither runs on the sharp output path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .articulation import Pose
from .geom import slerp
from .render import sigmoid
from .tinynet import DenseNet

__all__ = [
    "ExposureTrajectory",
    "interpolate_pose",
    "sample_virtual_poses",
    "synthesize_blur",
    "positional_encoding",
    "fusion_mask",
    "fusion_mask_backward",
    "blend_images",
    "blend_images_backward",
    "trajectory_gradients",
    "op_counts",
    "reset_op_counts",
]

op_counts = {"sample_virtual_poses": 0, "fusion_mask": 0}


def reset_op_counts() -> None:
    for key in op_counts:
        op_counts[key] = 0


@dataclass
class ExposureTrajectory:
    """Shutter-open and shutter-close poses of one frame."""

    start: Pose
    end: Pose

    def __post_init__(self):
        if self.start.n_joints != self.end.n_joints:
            raise ValueError("trajectory endpoints disagree on joint count")

    @classmethod
    def from_pose(cls, pose: Pose) -> "ExposureTrajectory":
        """Degenerate trajectory: both endpoints at the given pose."""
        return cls(pose.copy(), pose.copy())

    def copy(self) -> "ExposureTrajectory":
        return ExposureTrajectory(self.start.copy(), self.end.copy())

    def to_dict(self) -> dict:
        return {"start": self.start.to_dict(), "end": self.end.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "ExposureTrajectory":
        return cls(Pose.from_dict(data["start"]), Pose.from_dict(data["end"]))


def interpolate_pose(start: Pose, end: Pose, u: float) -> Pose:
    """Pose at fraction u of the way from start to end.

    Root translation interpolates linearly, the root orientation and each
    joint rotation by shortest-arc slerp. u outside [0, 1] extrapolates
    along the same path.
    """
    return Pose(
        root_translation=(1.0 - u) * start.root_translation
                         + u * end.root_translation,
        root_orientation=slerp(start.root_orientation, end.root_orientation, u),
        joint_rotations=slerp(start.joint_rotations, end.joint_rotations, u),
    )


def sample_virtual_poses(traj: ExposureTrajectory, n: int) -> list:
    """Interpolate n poses across the exposure, endpoints included.

    Pose l sits at u = l/(n-1); n = 1 degenerates to the start pose.
    """
    if n < 1:
        raise ValueError("need at least one virtual pose")
    op_counts["sample_virtual_poses"] += 1
    return [interpolate_pose(traj.start, traj.end,
                             l / (n - 1) if n > 1 else 0.0)
            for l in range(n)]


def synthesize_blur(images) -> np.ndarray:
    """Average the virtual sharp renders into the blurred estimate."""
    if len(images) == 0:
        raise ValueError("need at least one image")
    shape = images[0].shape
    for img in images:
        if img.shape != shape:
            raise ValueError("virtual renders disagree on shape")
    return np.mean(np.stack(images, axis=0), axis=0)


def positional_encoding(height: int, width: int, n_freqs: int = 4) -> np.ndarray:
    """Per-pixel sin/cos frequency features, (H, W, 4 * n_freqs).

    Pixel centers are mapped to [-1, 1] per axis; each axis contributes
    sin and cos at frequencies 2^0 .. 2^(n_freqs-1) times pi.
    """
    ys = 2.0 * (np.arange(height) + 0.5) / height - 1.0
    xs = 2.0 * (np.arange(width) + 0.5) / width - 1.0
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    feats = []
    for k in range(n_freqs):
        freq = np.pi * (2.0 ** k)
        for coord in (grid_x, grid_y):
            feats.append(np.sin(freq * coord))
            feats.append(np.cos(freq * coord))
    return np.stack(feats, axis=-1)


def fusion_mask(net: DenseNet, l_pose: np.ndarray, l_frame: np.ndarray,
                l_pixel: np.ndarray, rgb: np.ndarray):
    """Pose-dependent blend mask M in (0, 1), shape (H, W).

    Input per pixel: [l_pose, l_frame, pixel encoding, rgb]; the net output
    passes through a sigmoid. Returns (mask, tape) for the backward pass.
    """
    height, width = rgb.shape[:2]
    inp = np.concatenate([
        np.broadcast_to(l_pose, (height, width, l_pose.size)),
        np.broadcast_to(l_frame, (height, width, l_frame.size)),
        l_pixel,
        rgb,
    ], axis=-1)
    if inp.shape[-1] != net.input_width:
        raise ValueError(
            f"fusion input width {inp.shape[-1]} does not match net "
            f"input {net.input_width}")
    op_counts["fusion_mask"] += 1
    logits, tape = net.forward(inp)
    return sigmoid(logits[..., 0]), tape


def fusion_mask_backward(net: DenseNet, tape, mask: np.ndarray,
                         d_mask: np.ndarray, pose_dim: int, frame_dim: int):
    """Backprop through fusion_mask.

    Returns (net param grads, d_l_pose, d_l_frame, d_rgb); the pixel
    encoding is a constant so its gradient is dropped.
    """
    d_logit = d_mask * mask * (1.0 - mask)
    params, d_in = net.backward(tape, d_logit[..., None])
    d_l_pose = d_in[..., :pose_dim].sum(axis=(0, 1))
    d_l_frame = d_in[..., pose_dim:pose_dim + frame_dim].sum(axis=(0, 1))
    d_rgb = d_in[..., -3:]
    return params, d_l_pose, d_l_frame, d_rgb


def blend_images(sharp: np.ndarray, blurred: np.ndarray,
                 mask: np.ndarray) -> np.ndarray:
    """Per-pixel convex combination (1 - M) * sharp + M * blurred.

    A mask of exactly 0 or 1 returns the corresponding input bit-exactly.
    """
    if sharp.shape != blurred.shape:
        raise ValueError("blend inputs disagree on shape")
    m = mask[..., None]
    return (1.0 - m) * sharp + m * blurred


def blend_images_backward(sharp, blurred, mask, d_out):
    """Gradients of blend_images: returns (d_sharp, d_blurred, d_mask)."""
    m = mask[..., None]
    d_sharp = (1.0 - m) * d_out
    d_blurred = m * d_out
    d_mask = np.sum(d_out * (blurred - sharp), axis=-1)
    return d_sharp, d_blurred, d_mask


def trajectory_gradients(loss_fn, traj: ExposureTrajectory, h: float = 1e-3) -> dict:
    """Central finite differences of a scalar loss over trajectory parameters.

    `loss_fn` maps an ExposureTrajectory to a float. Every scalar of both
    endpoint poses (translation 3, root quat 4, joint quats 4K) is probed at
    +-h; quaternions are renormalized inside each probe so steps explore the
    unit sphere the same way optimizer updates do. Returns
    {"start": (7+4K,), "end": (7+4K,)} with Pose.as_flat layout.
    """
    n_joints = traj.start.n_joints
    grads = {}
    for side in ("start", "end"):
        base = getattr(traj, side).as_flat()
        grad = np.zeros_like(base)
        for i in range(base.size):
            samples = []
            for sign in (h, -h):
                flat = base.copy()
                flat[i] += sign
                pose = Pose.from_flat(flat, n_joints).normalized()
                probe = traj.copy()
                setattr(probe, side, pose)
                samples.append(loss_fn(probe))
            grad[i] = (samples[0] - samples[1]) / (2.0 * h)
        grads[side] = grad
    return grads
