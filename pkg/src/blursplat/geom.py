"""Quaternion, rigid-transform, and covariance primitives.

Conventions used throughout the package:

* Quaternions are scalar-first ``[w, x, y, z]`` numpy arrays. Functions
  accept a single quaternion ``(4,)`` or a batch ``(..., 4)``.
* Rotations act on column vectors: ``p' = R @ p``.
* A rigid transform is ``p' = R @ p + t``.
* Gaussian covariance is assembled as ``Sigma = R S S^T R^T`` where ``S`` is
  the diagonal of per-axis standard deviations ``exp(log_scale)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "quat_identity",
    "quat_normalize",
    "quat_mul",
    "quat_conjugate",
    "quat_from_axis_angle",
    "quat_to_rotmat",
    "rotmat_to_quat_grad",
    "quat_mul_grads",
    "normalize_grad",
    "slerp",
    "RigidTransform",
    "apply_rigid",
    "build_covariance",
    "build_covariance_grads",
]

SLERP_SIN_EPS = 1e-6


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Zero-norm input raises ValueError."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize zero quaternion")
    return q / norm


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, broadcasting over leading dimensions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion rotating by `angle` radians about `axis` (normalized here)."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise ValueError("axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / norm])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion, batched (..., 4) -> (..., 3, 3).

    The polynomial form below assumes unit input; callers normalize first.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[..., 0, 1] = 2.0 * (x * y - w * z)
    rot[..., 0, 2] = 2.0 * (x * z + w * y)
    rot[..., 1, 0] = 2.0 * (x * y + w * z)
    rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[..., 1, 2] = 2.0 * (y * z - w * x)
    rot[..., 2, 0] = 2.0 * (x * z - w * y)
    rot[..., 2, 1] = 2.0 * (y * z + w * x)
    rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def rotmat_to_quat_grad(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Backprop through quat_to_rotmat: (..., 4), (..., 3, 3) -> (..., 4).

    Differentiates the polynomial entries with respect to the raw quaternion
    components, matching quat_to_rotmat exactly (no implicit normalization).
    """
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(d_rot, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2.0 * (y * g01 + z * g02 + y * g10 - 2.0 * x * g11 - w * g12
                + z * g20 + w * g21 - 2.0 * x * g22)
    dy = 2.0 * (-2.0 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
                - w * g20 + z * g21 - 2.0 * y * g22)
    dz = 2.0 * (-2.0 * z * g00 - w * g01 + x * g02 + w * g10 - 2.0 * z * g11
                + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=-1)


def quat_mul_grads(a: np.ndarray, b: np.ndarray, d_out: np.ndarray):
    """Backprop through the bilinear Hamilton product: returns (d_a, d_b)."""
    # q = a*b is linear in each factor; transpose the 4x4 multiplication maps.
    aw, ax, ay, az = (np.asarray(a)[..., i] for i in range(4))
    bw, bx, by, bz = (np.asarray(b)[..., i] for i in range(4))
    gw, gx, gy, gz = (np.asarray(d_out)[..., i] for i in range(4))
    d_a = np.stack(
        [
            gw * bw + gx * bx + gy * by + gz * bz,
            -gw * bx + gx * bw - gy * bz + gz * by,
            -gw * by + gx * bz + gy * bw - gz * bx,
            -gw * bz - gx * by + gy * bx + gz * bw,
        ],
        axis=-1,
    )
    d_b = np.stack(
        [
            gw * aw + gx * ax + gy * ay + gz * az,
            -gw * ax + gx * aw + gy * az - gz * ay,
            -gw * ay - gx * az + gy * aw + gz * ax,
            -gw * az + gx * ay - gy * ax + gz * aw,
        ],
        axis=-1,
    )
    return d_a, d_b


def normalize_grad(v: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Backprop through v -> v/||v|| for vectors in the last axis."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(d_unit, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical linear interpolation along the shortest arc, batched.

    Exact at the endpoints: u=0 returns q0, u=1 returns q1 (up to the sign
    flip that selects the shortest arc). When the arc is nearly degenerate
    (sin(angle) < 1e-6) falls back to normalized linear interpolation, which
    is continuous with the main branch.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)
    dot = np.clip(dot, -1.0, 1.0)
    phi = np.arccos(dot)
    sin_phi = np.sin(phi)
    safe_sin = np.where(sin_phi < SLERP_SIN_EPS, 1.0, sin_phi)
    w0 = np.sin((1.0 - u) * phi) / safe_sin
    w1 = np.sin(u * phi) / safe_sin
    out = w0 * q0 + w1 * q1
    lerp = (1.0 - u) * q0 + u * q1
    lerp = lerp / np.linalg.norm(lerp, axis=-1, keepdims=True)
    return np.where(sin_phi < SLERP_SIN_EPS, lerp, out)


@dataclass
class RigidTransform:
    """Rotation-plus-translation map p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation)


def apply_rigid(transform: RigidTransform, points: np.ndarray) -> np.ndarray:
    return transform.apply(points)


def build_covariance(log_scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2*log_scale)) R^T, batched (..., 3), (..., 4) -> (..., 3, 3).

    Quaternions are assumed unit; callers normalize first. Output is
    symmetric positive definite for finite log scales.
    """
    scales_sq = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    rot = quat_to_rotmat(quats)
    # R D R^T with D diagonal: scale columns of R by D before the product
    return np.einsum("...ij,...j,...kj->...ik", rot, scales_sq, rot)


def build_covariance_grads(log_scales: np.ndarray, quats: np.ndarray,
                           d_sigma: np.ndarray):
    """Backprop through build_covariance: returns (d_log_scales, d_quats).

    `d_sigma` holds independent per-entry gradients of the full 3x3 matrix.
    """
    log_scales = np.asarray(log_scales, dtype=np.float64)
    g = np.asarray(d_sigma, dtype=np.float64)
    scales_sq = np.exp(2.0 * log_scales)
    rot = quat_to_rotmat(quats)
    # Sigma = R D R^T: dL/dD_jj = (R^T G R)_jj, dL/dR = (G + G^T) R D
    rtgr_diag = np.einsum("...ij,...ik,...kj->...j", rot, g, rot)
    d_log_scales = rtgr_diag * 2.0 * scales_sq
    g_sym = g + np.swapaxes(g, -1, -2)
    d_rot = np.einsum("...ij,...jk,...k->...ik", g_sym, rot, scales_sq)
    d_quats = rotmat_to_quat_grad(quats, d_rot)
    return d_log_scales, d_quats
