"""Gaussian cloud container, surface initialization, and adaptive density control.

The cloud stores canonical (rest-pose) Gaussians as raw optimizable arrays:
positions, per-axis log scales, rotation quaternions, opacity logits, and
color features consumed by the color net. Opacity is ``sigmoid(logit)``;
scales are ``exp(log_scale)`` so positivity is structural.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .articulation import KinematicChain
from .geom import quat_identity

__all__ = ["GaussianCloud", "DensifyStats", "DensifyConfig",
           "init_from_chain_surface", "densify_and_prune", "knn_edges"]


@dataclass
class GaussianCloud:
    positions: np.ndarray       # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    rotations: np.ndarray       # (N, 4) scalar-first quaternions
    opacity_logits: np.ndarray  # (N,)
    color_features: np.ndarray  # (N, F)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.color_features = np.asarray(self.color_features, dtype=np.float64)
        n = self.positions.shape[0]
        if (self.positions.shape != (n, 3) or self.log_scales.shape != (n, 3)
                or self.rotations.shape != (n, 4)
                or self.opacity_logits.shape != (n,)
                or self.color_features.ndim != 2
                or self.color_features.shape[0] != n):
            raise ValueError("cloud arrays disagree on Gaussian count or shape")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.color_features.shape[1]

    def validate(self, max_scale: float | None = None) -> None:
        """Check finiteness, near-unit quaternions, and optional scale bound."""
        for name, arr in self.named_params():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms < 1e-8):
            raise ValueError("degenerate rotation quaternion")
        if max_scale is not None and np.any(np.exp(self.log_scales) > max_scale):
            raise ValueError("scale exceeds scene bound")

    def named_params(self):
        yield "positions", self.positions
        yield "log_scales", self.log_scales
        yield "rotations", self.rotations
        yield "opacity_logits", self.opacity_logits
        yield "color_features", self.color_features

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(a.copy() for _, a in self.named_params()))

    def select(self, index: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(*(a[index].copy() for _, a in self.named_params()))


def _sample_capsule_surface(rng, start, end, radius, count):
    """Uniform area sampling of a capsule around segment start->end."""
    axis = end - start
    length = float(np.linalg.norm(axis))
    pts = np.empty((count, 3))
    sphere = rng.normal(size=(count, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    if length == 0.0:
        return start + radius * sphere
    unit = axis / length
    # area split: cylinder 2*pi*r*L vs both caps 4*pi*r^2
    p_cyl = length / (length + 2.0 * radius)
    on_cyl = rng.uniform(size=count) < p_cyl
    # cylinder part: random height and angle around the axis
    ref = np.array([1.0, 0.0, 0.0]) if abs(unit[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(unit, ref)
    u /= np.linalg.norm(u)
    v = np.cross(unit, u)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    h = rng.uniform(0.0, length, size=count)
    circ = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v
    pts[on_cyl] = start + h[on_cyl, None] * unit + radius * circ[on_cyl]
    # cap part: uniform sphere point, attached to the matching end
    axial = sphere @ unit
    cap_center = np.where(axial[:, None] >= 0.0, end, start)
    pts[~on_cyl] = cap_center[~on_cyl] + radius * sphere[~on_cyl]
    return pts


def init_from_chain_surface(chain: KinematicChain, count: int, rng,
                            feature_dim: int = 16,
                            opacity: float = 0.1) -> GaussianCloud:
    """Scatter `count` Gaussians on the chain's rest-pose capsule surfaces.

    Capsules are chosen proportionally to surface area. Scales start
    isotropic at the mean nearest-neighbor distance, rotations at identity,
    opacity at the given value, features at zero.
    """
    if count < 1:
        raise ValueError("need at least one Gaussian")
    starts, ends = chain.bone_segments()
    lengths = np.linalg.norm(ends - starts, axis=1)
    areas = 2.0 * np.pi * chain.radii * lengths + 4.0 * np.pi * chain.radii ** 2
    bone_of = rng.choice(chain.n_joints, size=count, p=areas / areas.sum())
    positions = np.empty((count, 3))
    for k in range(chain.n_joints):
        mask = bone_of == k
        if mask.any():
            positions[mask] = _sample_capsule_surface(
                rng, starts[k], ends[k], chain.radii[k], int(mask.sum()))
    # isotropic initial extent from mean nearest-neighbor spacing
    from scipy.spatial import cKDTree
    if count > 1:
        dists, _ = cKDTree(positions).query(positions, k=2)
        spacing = float(np.mean(dists[:, 1]))
    else:
        spacing = float(chain.radii.mean())
    spacing = max(spacing, 1e-4)
    logit = float(np.log(opacity / (1.0 - opacity)))
    return GaussianCloud(
        positions=positions,
        log_scales=np.full((count, 3), np.log(spacing)),
        rotations=np.tile(quat_identity(), (count, 1)),
        opacity_logits=np.full(count, logit),
        color_features=np.zeros((count, feature_dim)),
    )


def knn_edges(positions: np.ndarray, k: int = 5) -> np.ndarray:
    """Unique nearest-neighbor edges (E, 2) with i < j, k neighbors per point."""
    from scipy.spatial import cKDTree
    n = positions.shape[0]
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    k_eff = min(k, n - 1)
    _, idx = cKDTree(positions).query(positions, k=k_eff + 1)
    src = np.repeat(np.arange(n), k_eff)
    dst = idx[:, 1:].ravel()
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    return np.unique(np.stack([lo, hi], axis=1), axis=0)


@dataclass
class DensifyStats:
    """Accumulated per-Gaussian gradient statistics between density steps."""

    grad2d_sum: np.ndarray    # summed view-space positional gradient norms
    grad3d_sum: np.ndarray    # summed world-space positional gradients (N, 3)
    count: np.ndarray         # observations (times the Gaussian was visible)

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def update(self, grad2d_norm: np.ndarray, grad3d: np.ndarray,
               visible: np.ndarray) -> None:
        self.grad2d_sum += np.where(visible, grad2d_norm, 0.0)
        self.grad3d_sum += np.where(visible[:, None], grad3d, 0.0)
        self.count += visible.astype(np.float64)


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4      # mean view-space gradient that triggers growth
    split_scale: float = 0.01         # fraction of scene diameter: split above, clone below
    prune_opacity: float = 0.005
    prune_scale: float = 0.3          # fraction of scene diameter
    split_factor: float = 1.6         # children scales divide by this
    max_gaussians: int | None = None


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats,
                      config: DensifyConfig, scene_diameter: float):
    """One adaptive density step: prune, then clone/split high-gradient Gaussians.

    Returns (new_cloud, index) where index maps each new row to its source
    row in the old cloud, or -1 for rows that did not exist (split children
    and clones), letting optimizers remap their moments.
    """
    n = cloud.n
    opacity = 1.0 / (1.0 + np.exp(-cloud.opacity_logits))
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    prune = (opacity < config.prune_opacity) | (max_scale > config.prune_scale * scene_diameter)

    mean_grad = stats.grad2d_sum / np.maximum(stats.count, 1.0)
    grow = (mean_grad > config.grad_threshold) & ~prune
    if config.max_gaussians is not None and n >= config.max_gaussians:
        grow[:] = False
    split = grow & (max_scale > config.split_scale * scene_diameter)
    clone = grow & ~split

    keep = ~prune & ~split
    parts = [cloud.select(np.flatnonzero(keep))]
    index_parts = [np.flatnonzero(keep)]

    if clone.any():
        idx = np.flatnonzero(clone)
        child = cloud.select(idx)
        g = stats.grad3d_sum[idx] / np.maximum(stats.count[idx, None], 1.0)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0.0)
        step = np.exp(cloud.log_scales[idx]).mean(axis=1, keepdims=True)
        child.positions = child.positions + 0.5 * step * direction
        parts.append(child)
        index_parts.append(np.full(idx.size, -1, dtype=np.int64))

    if split.any():
        idx = np.flatnonzero(split)
        from .geom import quat_normalize, quat_to_rotmat
        rots = quat_to_rotmat(quat_normalize(cloud.rotations[idx]))
        scales = np.exp(cloud.log_scales[idx])
        major = scales.argmax(axis=1)
        axis = rots[np.arange(idx.size), :, major]           # major principal axis
        sigma = scales[np.arange(idx.size), major]
        for sign in (1.0, -1.0):
            child = cloud.select(idx)
            child.positions = child.positions + sign * 0.5 * sigma[:, None] * axis
            child.log_scales = child.log_scales - np.log(config.split_factor)
            parts.append(child)
            index_parts.append(np.full(idx.size, -1, dtype=np.int64))

    total = sum(p.n for p in parts)
    if total == 0:
        raise ValueError("empty cloud")
    new_cloud = GaussianCloud(
        *(np.concatenate([getattr(p, name) for p in parts])
          for name in ("positions", "log_scales", "rotations",
                       "opacity_logits", "color_features"))
    )
    return new_cloud, np.concatenate(index_parts)
