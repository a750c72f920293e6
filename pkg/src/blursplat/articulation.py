"""Kinematic chain, poses, skinning priors, and deformation building blocks.

A chain is a tree of K joints rooted at joint 0. Joint k sits at
``rest_position[parent[k]] + offset[k]`` in the rest pose; the bone of a
non-root joint is the segment from its parent's rest position to its own,
carrying a capsule of the joint's radius. The root carries a degenerate
(spherical) capsule at its rest position.

A pose is a root translation, a root orientation, and one local rotation
quaternion per joint. Forward kinematics returns per-joint skinning
transforms that map rest-pose coordinates to posed world coordinates, so
the rest pose maps to the identity list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import RigidTransform, quat_identity, quat_normalize, quat_to_rotmat

__all__ = [
    "KinematicChain",
    "Pose",
    "forward_kinematics",
    "fk_arrays",
    "capsule_segment_distance",
    "prior_skin_weights",
    "softmax",
    "softmax_grad",
    "blend_transforms",
]


@dataclass
class KinematicChain:
    """Joint tree: parents (K,) with parent[0] == -1, offsets (K, 3), radii (K,)."""

    parents: np.ndarray
    offsets: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        k = self.parents.shape[0]
        if self.offsets.shape != (k, 3) or self.radii.shape != (k,):
            raise ValueError("chain arrays disagree on joint count")
        if k == 0:
            raise ValueError("chain needs at least one joint")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, k):
            # topological ordering; any cycle necessarily violates this
            if not 0 <= self.parents[j] < j:
                raise ValueError("joint parents must form a tree rooted at joint 0, "
                                 "listed in topological order")
        if np.any(self.radii <= 0.0):
            raise ValueError("capsule radii must be positive")

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    def rest_positions(self) -> np.ndarray:
        """Joint positions (K, 3) with all rotations identity and zero root motion."""
        pos = np.zeros_like(self.offsets)
        pos[0] = self.offsets[0]
        for j in range(1, self.n_joints):
            pos[j] = pos[self.parents[j]] + self.offsets[j]
        return pos

    def bone_segments(self):
        """Rest-pose capsule axes: (starts (K, 3), ends (K, 3)).

        Bone k runs parent->k; the root bone is a zero-length segment.
        """
        pos = self.rest_positions()
        starts = np.empty_like(pos)
        starts[0] = pos[0]
        starts[1:] = pos[self.parents[1:]]
        return starts, pos.copy()

    def diameter(self) -> float:
        """Diameter of the rest-pose capsule hull (bounding-sphere based)."""
        starts, ends = self.bone_segments()
        pts = np.concatenate([starts, ends], axis=0)
        center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        return float(2.0 * (np.linalg.norm(pts - center, axis=1) +
                            np.concatenate([self.radii, self.radii])).max())

    def to_dict(self) -> dict:
        return {
            "parents": self.parents.tolist(),
            "offsets": self.offsets.tolist(),
            "radii": self.radii.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KinematicChain":
        return cls(np.array(data["parents"]), np.array(data["offsets"]),
                   np.array(data["radii"]))


@dataclass
class Pose:
    """Root translation (3,), root orientation (4,), joint rotations (K, 4)."""

    root_translation: np.ndarray
    root_orientation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        self.root_orientation = np.asarray(self.root_orientation, dtype=np.float64)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        if self.root_translation.shape != (3,) or self.root_orientation.shape != (4,):
            raise ValueError("bad root parameter shapes")
        if self.joint_rotations.ndim != 2 or self.joint_rotations.shape[1] != 4:
            raise ValueError("joint rotations must be (K, 4)")

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        return cls(np.zeros(3), quat_identity(),
                   np.tile(quat_identity(), (n_joints, 1)))

    @property
    def n_joints(self) -> int:
        return self.joint_rotations.shape[0]

    def copy(self) -> "Pose":
        return Pose(self.root_translation.copy(), self.root_orientation.copy(),
                    self.joint_rotations.copy())

    def as_flat(self) -> np.ndarray:
        """Pack to (7 + 4K,): [translation, root quat, joint quats row-major]."""
        return np.concatenate([self.root_translation, self.root_orientation,
                               self.joint_rotations.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, n_joints: int) -> "Pose":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (7 + 4 * n_joints,):
            raise ValueError("flat pose has wrong length")
        return cls(flat[:3].copy(), flat[3:7].copy(),
                   flat[7:].reshape(n_joints, 4).copy())

    def normalized(self) -> "Pose":
        """Copy with root and joint quaternions renormalized to unit length."""
        return Pose(self.root_translation.copy(),
                    quat_normalize(self.root_orientation),
                    quat_normalize(self.joint_rotations))

    def to_dict(self) -> dict:
        return {
            "root_translation": self.root_translation.tolist(),
            "root_orientation": self.root_orientation.tolist(),
            "joint_rotations": self.joint_rotations.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(np.array(data["root_translation"]),
                   np.array(data["root_orientation"]),
                   np.array(data["joint_rotations"]))


def forward_kinematics(chain: KinematicChain, pose: Pose):
    """Per-joint skinning transforms, rest coordinates -> posed world.

    Walks the tree accumulating world transforms, then composes each with
    the inverse of the joint's rest placement. The rest pose therefore
    yields the identity transform for every joint.
    """
    if pose.n_joints != chain.n_joints:
        raise ValueError("pose joint count does not match chain")
    k = chain.n_joints
    root = RigidTransform(quat_to_rotmat(quat_normalize(pose.root_orientation)),
                          pose.root_translation)
    local_rots = quat_to_rotmat(quat_normalize(pose.joint_rotations))
    world = [None] * k
    world[0] = root.compose(RigidTransform(local_rots[0], chain.offsets[0]))
    for j in range(1, k):
        local = RigidTransform(local_rots[j], chain.offsets[j])
        world[j] = world[chain.parents[j]].compose(local)
    rest = chain.rest_positions()
    out = []
    for j in range(k):
        rot = world[j].rotation
        out.append(RigidTransform(rot, world[j].translation - rot @ rest[j]))
    return out


def fk_arrays(chain: KinematicChain, pose: Pose):
    """forward_kinematics stacked into arrays: rotations (K, 3, 3), translations (K, 3)."""
    transforms = forward_kinematics(chain, pose)
    return (np.stack([t.rotation for t in transforms]),
            np.stack([t.translation for t in transforms]))


def fk_arrays_batch(chain: KinematicChain, root_translation: np.ndarray,
                    root_orientation: np.ndarray, joint_rotations: np.ndarray):
    """fk_arrays over a batch of poses given as arrays.

    Takes (B, 3) translations, (B, 4) root quaternions, and (B, K, 4)
    joint quaternions; returns skinning rotations (B, K, 3, 3) and
    translations (B, K, 3). Matches fk_arrays row for row.
    """
    k = chain.n_joints
    if joint_rotations.shape[-2] != k:
        raise ValueError("pose joint count does not match chain")
    root_rot = quat_to_rotmat(quat_normalize(root_orientation))
    local = quat_to_rotmat(quat_normalize(joint_rotations))
    world_rot = np.empty_like(local)
    world_trans = np.empty(joint_rotations.shape[:-1] + (3,))
    world_rot[:, 0] = root_rot @ local[:, 0]
    world_trans[:, 0] = root_rot @ chain.offsets[0] + root_translation
    for j in range(1, k):
        p = chain.parents[j]
        world_rot[:, j] = world_rot[:, p] @ local[:, j]
        world_trans[:, j] = (np.einsum("bij,j->bi", world_rot[:, p],
                                       chain.offsets[j]) + world_trans[:, p])
    rest = chain.rest_positions()
    trans = world_trans - np.einsum("bkij,kj->bki", world_rot, rest)
    return world_rot, trans


def capsule_segment_distance(points: np.ndarray, starts: np.ndarray,
                             ends: np.ndarray) -> np.ndarray:
    """Distance from each point to each segment axis: (N, 3), (K, 3), (K, 3) -> (N, K)."""
    points = np.asarray(points, dtype=np.float64)
    axis = ends - starts                                   # (K, 3)
    length_sq = np.sum(axis * axis, axis=-1)               # (K,)
    rel = points[:, None, :] - starts[None, :, :]          # (N, K, 3)
    t = np.einsum("nkd,kd->nk", rel, axis)
    t = np.divide(t, length_sq, out=np.zeros_like(t), where=length_sq > 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = starts[None] + t[..., None] * axis[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def prior_skin_weights(chain: KinematicChain, points: np.ndarray) -> np.ndarray:
    """Capsule-distance skinning prior: softmax over -d_k^2 / (2 r_k^2), rows sum to 1."""
    starts, ends = chain.bone_segments()
    d = capsule_segment_distance(points, starts, ends)
    logits = -0.5 * (d / chain.radii[None, :]) ** 2
    return softmax(logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis, shift-stabilized."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_grad(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    """Backprop through softmax: d_logits from output weights and their grads."""
    inner = np.sum(weights * d_weights, axis=-1, keepdims=True)
    return weights * (d_weights - inner)


def blend_transforms(weights: np.ndarray, rotations: np.ndarray,
                     translations: np.ndarray):
    """Linear-blend skinning mix: (N, K) weights over K rigid transforms.

    Returns the blended linear parts (N, 3, 3) and translations (N, 3).
    """
    blended_rot = np.einsum("nk,kij->nij", weights, rotations)
    blended_trans = weights @ translations
    return blended_rot, blended_trans
