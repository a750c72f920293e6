"""Synthetic ground truth: articulated capsule figures, smooth motion
scripts, and a blur oracle that averages dense subframe renders into
physically consistent blurry training frames.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .articulation import (
    KinematicChain,
    Pose,
    blend_transforms,
    capsule_segment_distance,
    fk_arrays,
    prior_skin_weights,
)
from .blur import synthesize_blur
from .geom import build_covariance, quat_from_axis_angle, quat_mul
from .imgio import read_mask_png, read_pfm, write_mask_png, write_pfm
from .render import Camera, RasterSettings, render_splats, sigmoid
from .scene import GaussianCloud, init_from_chain_surface

MASK_THRESHOLD = 0.5
DATASET_VERSION = 1

# golden-angle hue walk keeps any number of capsules visually separated
_GOLDEN_ANGLE = 2.399963229728653


def capsule_color(k: int) -> np.ndarray:
    phi = _GOLDEN_ANGLE * k
    offsets = np.array([0.0, -2.0943951023931953, 2.0943951023931953])
    return 0.5 + 0.4 * np.cos(phi + offsets)


def default_chain() -> KinematicChain:
    """Six-joint torso-and-arms figure used by all synthetic scenes."""
    parents = [-1, 0, 1, 1, 3, 1]
    offsets = [
        [0.0, 0.0, 0.0],      # pelvis (root)
        [0.0, 0.28, 0.0],     # chest
        [0.0, 0.24, 0.0],     # head
        [0.30, 0.06, 0.0],    # left elbow
        [0.27, -0.04, 0.0],   # left wrist
        [-0.30, 0.06, 0.0],   # right elbow
    ]
    radii = [0.13, 0.11, 0.09, 0.055, 0.045, 0.055]
    return KinematicChain(np.array(parents), np.array(offsets), np.array(radii))


@dataclass
class GroundTruthScene:
    chain: KinematicChain
    cloud: GaussianCloud          # color_features hold RGB in [0, 1]
    train_camera: Camera
    eval_cameras: list
    background: np.ndarray


def make_scene(seed: int, n_gaussians: int = 1500,
               image_size: int = 64, focal: float = 69.0,
               distance: float = 2.2) -> GroundTruthScene:
    """Deterministic colored capsule figure plus a train/eval camera pair."""
    rng = np.random.default_rng(seed)
    chain = default_chain()
    cloud = init_from_chain_surface(chain, n_gaussians, rng,
                                    feature_dim=3, opacity=0.95)
    starts, ends = chain.bone_segments()
    nearest = np.argmin(
        capsule_segment_distance(cloud.positions, starts, ends) -
        chain.radii[None, :], axis=1)
    palette = np.stack([capsule_color(k) for k in range(chain.n_joints)])
    colors = palette[nearest] + 0.03 * rng.normal(size=(n_gaussians, 3))
    cloud.color_features = np.clip(colors, 0.02, 0.98)
    # tighten footprints so the surface renders crisp at the eval resolution
    cloud.log_scales += np.log(0.75)

    center = chain.rest_positions().mean(axis=0)
    up = np.array([0.0, 1.0, 0.0])

    def cam(azimuth):
        eye = center + distance * np.array([np.sin(azimuth), 0.0, np.cos(azimuth)])
        return Camera.look_at(eye, center, up, image_size, image_size, focal)

    return GroundTruthScene(
        chain=chain,
        cloud=cloud,
        train_camera=cam(0.0),
        eval_cameras=[cam(np.deg2rad(30.0))],
        background=np.zeros(3),
    )


@dataclass
class MotionScript:
    """Dense ground-truth trajectory: frames x m subframe poses."""

    subframe_poses: list          # frames entries, each a list of m Pose
    m: int

    def __post_init__(self):
        if self.m % 2 == 0:
            raise ValueError("subframe count m must be odd")
        if any(len(sub) != self.m for sub in self.subframe_poses):
            raise ValueError("every frame needs exactly m subframe poses")

    @property
    def n_frames(self) -> int:
        return len(self.subframe_poses)

    @property
    def center_index(self) -> int:
        return (self.m - 1) // 2

    def center_pose(self, frame: int) -> Pose:
        return self.subframe_poses[frame][self.center_index]


def _band_limited_tracks(rng, n_tracks, n_samples, n_components=3, max_cycles=5):
    """Smooth zero-mean signals: sums of low-frequency sinusoids, (T, S)."""
    tau = np.arange(n_samples) / max(n_samples, 1)
    tracks = np.zeros((n_tracks, n_samples))
    for t in range(n_tracks):
        for i in range(n_components):
            cycles = rng.integers(1, max_cycles + 1)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            tracks[t] += rng.uniform(0.5, 1.0) / (i + 1) * np.sin(
                2.0 * np.pi * cycles * tau + phase)
    return tracks


def make_motion(chain: KinematicChain, seed: int, frames: int = 60,
                m: int = 17, amplitude: float = 3.0,
                max_step: float = 0.05,
                animated_joints=None) -> MotionScript:
    """Band-limited random motion sampled at m subframes per output frame.

    `amplitude` scales every track; `max_step` caps the per-subframe
    rotation angle of any joint (tracks are rescaled to respect it).
    """
    if m % 2 == 0:
        raise ValueError("subframe count m must be odd")
    if frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    k = chain.n_joints
    if animated_joints is None:
        animated_joints = [j for j in (1, 3, 5) if j < k]
    n_samples = frames * m

    joint_axes = rng.normal(size=(len(animated_joints), 3))
    joint_axes /= np.linalg.norm(joint_axes, axis=1, keepdims=True)
    joint_angles = 0.45 * amplitude * _band_limited_tracks(
        rng, len(animated_joints), n_samples)
    root_angle = 0.25 * amplitude * _band_limited_tracks(rng, 1, n_samples)[0]
    root_trans = 0.06 * amplitude * _band_limited_tracks(rng, 3, n_samples)

    # every track rotates about a fixed axis, so per-step rotation angles are
    # exactly linear in amplitude and one rescale enforces the bound
    all_angles = np.concatenate([joint_angles, root_angle[None]], axis=0)
    if n_samples > 1 and all_angles.size:
        worst = np.abs(np.diff(all_angles, axis=1)).max()
        if worst > max_step:
            scale = max_step / worst
            joint_angles *= scale
            root_angle *= scale
            root_trans *= scale

    subframe_poses = []
    for f in range(frames):
        frame_poses = []
        for l in range(m):
            s = f * m + l
            pose = Pose.rest(k)
            pose.root_translation = root_trans[:, s].copy()
            pose.root_orientation = quat_from_axis_angle([0, 1, 0], root_angle[s])
            for idx, j in enumerate(animated_joints):
                pose.joint_rotations[j] = quat_from_axis_angle(
                    joint_axes[idx], joint_angles[idx, s])
            frame_poses.append(pose)
        subframe_poses.append(frame_poses)
    return MotionScript(subframe_poses=subframe_poses, m=m)


def pose_cloud_lbs(chain: KinematicChain, cloud: GaussianCloud, pose: Pose):
    """Pose a raw cloud with prior skinning weights: (means (N,3), sigmas (N,3,3))."""
    weights = prior_skin_weights(chain, cloud.positions)
    rots, trans = fk_arrays(chain, pose)
    blend_rot, blend_trans = blend_transforms(weights, rots, trans)
    means = np.einsum("nij,nj->ni", blend_rot, cloud.positions) + blend_trans
    quats = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    sigma_c = build_covariance(cloud.log_scales, quats)
    sigmas = np.einsum("nij,njk,nlk->nil", blend_rot, sigma_c, blend_rot)
    return means, sigmas


def render_ground_truth(scene: GroundTruthScene, pose: Pose, camera: Camera,
                        settings: RasterSettings | None = None) -> np.ndarray:
    """Sharp (H, W, 4) render of the ground-truth cloud at one pose."""
    means, sigmas = pose_cloud_lbs(scene.chain, scene.cloud, pose)
    colors = np.clip(scene.cloud.color_features[:, :3], 0.0, 1.0)
    opacities = sigmoid(scene.cloud.opacity_logits)
    image, _ = render_splats(means, sigmas, colors, opacities, camera,
                             scene.background, settings or RasterSettings())
    return image


@dataclass
class BlurDataset:
    """Blurred frames plus held-out sharp centers, masks, and input poses."""

    chain: KinematicChain
    camera: Camera
    eval_cameras: list
    background: np.ndarray
    blurred: list                 # (H, W, 3) float per frame
    sharp: list                   # (H, W, 3) float per frame (held-out GT)
    masks: list                   # (H, W) bool per frame
    input_poses: list             # Pose per frame
    m: int
    seed: int
    extras: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.blurred)


def blur_oracle(scene: GroundTruthScene, script: MotionScript, camera: Camera,
                pose_noise: float = 0.0, noise_seed: int = 0) -> BlurDataset:
    """Average all m subframe renders per frame into the blurred image.

    The center subframe supplies the sharp ground-truth frame, the mask
    (accumulated alpha > 0.5), and the input pose — the true center pose,
    optionally perturbed by `pose_noise` radians per joint to emulate
    pose-estimation error.
    """
    rng = np.random.default_rng(noise_seed)
    settings = RasterSettings()
    blurred, sharp, masks, input_poses = [], [], [], []
    for f in range(script.n_frames):
        renders = [render_ground_truth(scene, p, camera, settings)
                   for p in script.subframe_poses[f]]
        blur_img = synthesize_blur(renders)
        center = renders[script.center_index]
        blurred.append(blur_img[..., :3])
        sharp.append(center[..., :3])
        masks.append(center[..., 3] > MASK_THRESHOLD)
        input_poses.append(_perturb_pose(script.center_pose(f), pose_noise, rng))
    return BlurDataset(
        chain=scene.chain, camera=camera, eval_cameras=list(scene.eval_cameras),
        background=scene.background.copy(), blurred=blurred, sharp=sharp,
        masks=masks, input_poses=input_poses, m=script.m, seed=noise_seed,
    )


def _perturb_pose(pose: Pose, noise: float, rng) -> Pose:
    out = pose.copy()
    if noise <= 0.0:
        return out
    out.root_translation = out.root_translation + rng.normal(scale=noise, size=3)

    def wiggle(q):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        return quat_mul(quat_from_axis_angle(axis, rng.normal(scale=noise)), q)

    out.root_orientation = wiggle(out.root_orientation)
    for j in range(out.n_joints):
        out.joint_rotations[j] = wiggle(out.joint_rotations[j])
    return out.normalized()


def write_dataset(dataset: BlurDataset, path: str) -> None:
    """Lay the dataset out on disk (PFM frames, PNG masks, JSON metadata)."""
    os.makedirs(os.path.join(path, "frames"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    h, w = dataset.masks[0].shape
    manifest = {
        "version": DATASET_VERSION,
        "m": dataset.m,
        "seed": dataset.seed,
        "frames": dataset.n_frames,
        "width": w,
        "height": h,
        "background": dataset.background.tolist(),
        "chain": dataset.chain.to_dict(),
        "extras": dataset.extras,
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    with open(os.path.join(path, "cameras.json"), "w") as f:
        json.dump({"train": dataset.camera.to_dict(),
                   "eval": [c.to_dict() for c in dataset.eval_cameras]},
                  f, indent=2, sort_keys=True)
    with open(os.path.join(path, "poses.json"), "w") as f:
        json.dump({"input": [p.to_dict() for p in dataset.input_poses]},
                  f, indent=2, sort_keys=True)
    for i in range(dataset.n_frames):
        write_pfm(os.path.join(path, "frames", f"blur_{i:04d}.pfm"),
                  dataset.blurred[i])
        write_pfm(os.path.join(path, "frames", f"sharp_{i:04d}.pfm"),
                  dataset.sharp[i])
        write_mask_png(os.path.join(path, "masks", f"{i:04d}.png"),
                       dataset.masks[i])


def read_dataset(path: str) -> BlurDataset:
    """Load a dataset directory written by write_dataset."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ValueError(f"{path}: no dataset manifest found") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{manifest_path}: corrupt manifest: {exc}") from None
    for key in ("version", "m", "seed", "frames", "chain", "background"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: manifest missing key {key!r}")
    with open(os.path.join(path, "cameras.json")) as f:
        cameras = json.load(f)
    with open(os.path.join(path, "poses.json")) as f:
        poses = json.load(f)
    n = manifest["frames"]
    blurred, sharp, masks = [], [], []
    for i in range(n):
        blurred.append(read_pfm(os.path.join(path, "frames", f"blur_{i:04d}.pfm")))
        sharp.append(read_pfm(os.path.join(path, "frames", f"sharp_{i:04d}.pfm")))
        masks.append(read_mask_png(os.path.join(path, "masks", f"{i:04d}.png")))
    return BlurDataset(
        chain=KinematicChain.from_dict(manifest["chain"]),
        camera=Camera.from_dict(cameras["train"]),
        eval_cameras=[Camera.from_dict(c) for c in cameras["eval"]],
        background=np.array(manifest["background"], dtype=np.float64),
        blurred=blurred, sharp=sharp, masks=masks,
        input_poses=[Pose.from_dict(p) for p in poses["input"]],
        m=manifest["m"], seed=manifest["seed"],
        extras=manifest.get("extras", {}),
    )
