"""Finite-difference validation of the analytic gradient pipeline.

Builds small random avatars (few Gaussians, tiny nets, low-resolution
camera), computes the analytic gradient of a quadratic image loss for every
parameter, and compares against central finite differences. Thresholded
raster settings are disabled during checks so the loss stays smooth under
parameter perturbations; the analytic code path is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .articulation import KinematicChain, Pose
from .geom import quat_normalize
from .model import AvatarModel, AvatarNets, render_avatar, render_avatar_backward
from .render import GRADCHECK_SETTINGS, Camera
from .scene import GaussianCloud

__all__ = ["CheckScene", "make_check_scene", "check_gradients", "run_gradcheck",
           "check_net_gradients", "run_net_gradcheck"]


@dataclass
class CheckScene:
    model: AvatarModel
    pose: Pose
    camera: Camera
    background: np.ndarray
    target: np.ndarray


def make_check_scene(seed: int, n_gaussians: int = 5, n_joints: int = 3,
                     feature_dim: int = 4, hidden: int = 8,
                     image_size: int = 8) -> CheckScene:
    """Random small scene with smooth-loss guarantees.

    Depths are spread along the view axis so perturbations cannot reorder
    splats, and opacities stay below the clamp so every branch in the
    compositor is differentiable at the evaluation point.
    """
    rng = np.random.default_rng(seed)
    parents = [-1] + [rng.integers(0, j) for j in range(1, n_joints)]
    chain = KinematicChain(
        parents=parents,
        offsets=rng.uniform(-0.3, 0.3, size=(n_joints, 3)),
        radii=rng.uniform(0.05, 0.2, size=n_joints),
    )
    positions = rng.uniform(-0.4, 0.4, size=(n_gaussians, 3))
    positions[:, 2] = np.linspace(-0.3, 0.3, n_gaussians) + rng.uniform(
        -0.02, 0.02, size=n_gaussians)
    cloud = GaussianCloud(
        positions=positions,
        log_scales=rng.uniform(-2.3, -1.2, size=(n_gaussians, 3)),
        rotations=rng.normal(size=(n_gaussians, 4)),
        opacity_logits=rng.uniform(-1.5, 1.0, size=n_gaussians),
        color_features=rng.normal(size=(n_gaussians, feature_dim)) * 0.5,
    )
    nets = AvatarNets.create(n_joints, feature_dim, rng,
                             deform_hidden=hidden, color_hidden=hidden,
                             fusion_hidden=hidden)
    # the deformation nets initialize their last layer to zero, which would
    # leave upstream layers with exactly zero gradient; give them small
    # random values so the whole path is exercised
    last_w = nets.nonrigid.weights[-1]
    last_b = nets.nonrigid.biases[-1]
    last_w[:] = rng.uniform(-0.1, 0.1, size=last_w.shape)
    last_b[:] = rng.uniform(-0.05, 0.05, size=last_b.shape)

    pose = Pose(
        root_translation=rng.uniform(-0.1, 0.1, size=3),
        root_orientation=quat_normalize(
            np.array([1.0, *rng.uniform(-0.15, 0.15, size=3)])),
        joint_rotations=quat_normalize(
            np.concatenate([np.ones((n_joints, 1)),
                            rng.uniform(-0.15, 0.15, size=(n_joints, 3))], axis=1)),
    )
    camera = Camera.look_at(
        eye=[0.15, 0.25, -2.5], target=[0.0, 0.0, 0.0], up=[0, 1, 0],
        width=image_size, height=image_size, focal=1.1 * image_size)
    background = rng.uniform(size=3)
    target = rng.uniform(size=(image_size, image_size, 4))
    return CheckScene(AvatarModel(chain, cloud, nets), pose, camera,
                      background, target)


def _loss(scene: CheckScene) -> float:
    img, _ = render_avatar(scene.model, scene.pose, scene.camera,
                           scene.background, GRADCHECK_SETTINGS)
    return 0.5 * float(np.sum((img - scene.target) ** 2))


def check_gradients(scene: CheckScene, h: float = 1e-5,
                    grad_floor: float = 1e-6) -> dict:
    """Compare analytic and finite-difference gradients for every parameter.

    Returns {param_name: (max_rel_err, n_compared)}; relative error is
    measured where max(|analytic|, |fd|) exceeds `grad_floor`. The step
    trades off two error sources: larger steps occasionally straddle a
    relu kink in the deformation nets (O(1) error on that parameter),
    smaller ones amplify float64 roundoff; 1e-5 clears both by >10x.
    """
    img, actx = render_avatar(scene.model, scene.pose, scene.camera,
                              scene.background, GRADCHECK_SETTINGS)
    diff = img - scene.target
    grads, _ = render_avatar_backward(scene.model, actx, diff[..., :3],
                                      diff[..., 3])
    report = {}
    for name, param in scene.model.named_params():
        if name.startswith("fusion."):
            continue  # not on the single-frame render path
        analytic = np.asarray(grads.get(name, np.zeros_like(param)), dtype=np.float64)
        fd = np.zeros_like(param)
        flat = param.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = _loss(scene)
            flat[i] = old - h
            down = _loss(scene)
            flat[i] = old
            fd_flat[i] = (up - down) / (2.0 * h)
        denom = np.maximum(np.abs(analytic), np.abs(fd))
        mask = denom > grad_floor
        if mask.any():
            rel = float((np.abs(analytic - fd)[mask] / denom[mask]).max())
        else:
            rel = 0.0
        report[name] = (rel, int(mask.sum()))
    return report


def run_gradcheck(n_scenes: int = 20, seed0: int = 0, h: float = 1e-5,
                  tolerance: float = 1e-3, verbose: bool = False):
    """Run FD checks over many random scenes.

    Returns (passed, results) where results rows are
    (seed, worst_param_name, max_rel_err, n_compared).
    """
    results = []
    passed = True
    for seed in range(seed0, seed0 + n_scenes):
        scene = make_check_scene(seed)
        report = check_gradients(scene, h=h)
        worst_name = max(report, key=lambda k: report[k][0])
        worst = report[worst_name][0]
        n_compared = sum(v[1] for v in report.values())
        results.append((seed, worst_name, worst, n_compared))
        if worst > tolerance:
            passed = False
        if verbose:
            status = "ok" if worst <= tolerance else "FAIL"
            print(f"seed {seed:3d}: max rel err {worst:.3e} "
                  f"({worst_name}, {n_compared} grads) {status}")
    return passed, results


def check_net_gradients(seed: int, h: float = 1e-5,
                        grad_floor: float = 1e-9) -> dict:
    """FD-check a lone random MLP: parameter and input gradients.

    Returns {param_name: (max_rel_err, n_compared)} including "input".
    """
    from .tinynet import DenseNet

    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 7)) for _ in range(4)]
    net = DenseNet.create(sizes, rng,
                          hidden_activation="relu" if seed % 2 else "none")
    x = rng.normal(size=(3, sizes[0]))
    target = rng.normal(size=(3, sizes[-1]))

    def loss():
        y, _ = net.forward(x)
        return 0.5 * float(np.sum((y - target) ** 2))

    y, tape = net.forward(x)
    param_grads, d_in = net.backward(tape, y - target)
    analytic = {"input": d_in}
    for i, (dw, db) in enumerate(param_grads):
        analytic[f"W{i}"] = dw
        analytic[f"b{i}"] = db

    arrays = {"input": x}
    arrays.update(dict(net.named_params()))
    report = {}
    for name, param in arrays.items():
        fd = np.zeros_like(param)
        flat, fd_flat = param.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            fd_flat[i] = (up - down) / (2.0 * h)
        an = analytic[name]
        denom = np.maximum(np.abs(an), np.abs(fd))
        mask = denom > grad_floor
        rel = float((np.abs(an - fd)[mask] / denom[mask]).max()) if mask.any() else 0.0
        report[name] = (rel, int(mask.sum()))
    return report


def run_net_gradcheck(n_scenes: int = 20, seed0: int = 0, h: float = 1e-5,
                      tolerance: float = 1e-3, verbose: bool = False):
    """FD checks for the MLP module alone; mirrors run_gradcheck's result."""
    results = []
    passed = True
    for seed in range(seed0, seed0 + n_scenes):
        report = check_net_gradients(seed, h=h)
        worst_name = max(report, key=lambda k: report[k][0])
        worst = report[worst_name][0]
        n_compared = sum(v[1] for v in report.values())
        results.append((seed, worst_name, worst, n_compared))
        if worst > tolerance:
            passed = False
        if verbose:
            status = "ok" if worst <= tolerance else "FAIL"
            print(f"seed {seed:3d}: max rel err {worst:.3e} "
                  f"({worst_name}, {n_compared} grads) {status}")
    return passed, results
