"""Camera model, EWA projection of 3D Gaussians, and differentiable compositing.

Rendering maps world-space Gaussians (mean, covariance, color, opacity) to an
RGBA image: perspective-project each Gaussian to a 2D splat via the local
affine (Jacobian) approximation, dilate by a fixed pixel footprint, sort by
depth, and alpha-composite front to back over a constant background. The
matching backward pass returns gradients with respect to every input.

Camera convention: x right, y down, z forward; a point is visible when its
camera-space z exceeds the near plane. Pixel (x, y) has center
(x + 0.5, y + 0.5); intrinsics map camera space to pixels as
u = fx * x / z + cx, v = fy * y / z + cy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._raster import composite_backward, composite_forward
from .geom import RigidTransform, build_covariance, build_covariance_grads, \
    normalize_grad, quat_normalize

__all__ = [
    "Camera",
    "RasterSettings",
    "GRADCHECK_SETTINGS",
    "RenderContext",
    "RenderGrads",
    "render_splats",
    "render_backward",
    "render_cloud",
    "render_cloud_backward",
    "sigmoid",
]


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform

    @classmethod
    def look_at(cls, eye, target, up, width, height, focal):
        """Camera at `eye` looking toward `target`; `focal` in pixels."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(x)
        if norm < 1e-12:
            raise ValueError("up direction is parallel to the view direction")
        x = x / norm
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(focal, focal, width / 2.0, height / 2.0, width, height,
                   RigidTransform(rot, -rot @ eye))

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        w2c = self.world_to_camera
        return -w2c.rotation.T @ w2c.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.world_to_camera.rotation.tolist(),
            "translation": self.world_to_camera.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        return cls(data["fx"], data["fy"], data["cx"], data["cy"],
                   int(data["width"]), int(data["height"]),
                   RigidTransform(np.array(data["rotation"]),
                                  np.array(data["translation"])))


@dataclass
class RasterSettings:
    near: float = 0.01           # minimum camera-space depth
    dilation: float = 0.3        # isotropic 2D covariance added in pixel^2
    alpha_clamp: float = 0.99    # per-splat alpha ceiling
    alpha_min: float = 1.0 / 255.0  # contributions below this are skipped
    cutoff_sigma: float = 3.0    # splat influence radius in standard deviations
    term_eps: float = 1e-4       # stop compositing once transmittance drops below


# Thresholds off: every Gaussian touches every pixel and no branch flips under
# small parameter perturbations, which finite-difference validation needs.
GRADCHECK_SETTINGS = RasterSettings(alpha_min=0.0, cutoff_sigma=1e6, term_eps=0.0)


@dataclass
class RenderContext:
    """Forward-pass intermediates needed by render_backward."""

    camera: Camera
    settings: RasterSettings
    background: np.ndarray
    n_total: int
    visible: np.ndarray        # (N,) bool
    order: np.ndarray          # sorted-visible -> visible-row mapping
    p_cam: np.ndarray          # (S, 3) camera-space means, sorted
    mean2d: np.ndarray         # (S, 2)
    conic: np.ndarray          # (S, 3)
    bbox: np.ndarray           # (S, 4) int64, x0:x1, y0:y1
    mproj: np.ndarray          # (S, 2, 3) J @ R_world_to_cam
    sigma_world: np.ndarray    # (S, 3, 3)
    colors: np.ndarray         # (S, 3)
    opacities: np.ndarray      # (S,)
    final_t: np.ndarray        # (H, W)
    last_contrib: np.ndarray   # (H, W) int32
    weight_sum: np.ndarray     # (H, W) diagnostic: sum of compositing weights


@dataclass
class RenderGrads:
    d_positions: np.ndarray    # (N, 3) world-space mean gradients
    d_sigma: np.ndarray        # (N, 3, 3) world-space covariance gradients
    d_colors: np.ndarray       # (N, 3)
    d_opacities: np.ndarray    # (N,)
    mean2d_norm: np.ndarray    # (N,) view-space gradient magnitude (densify stat)
    visible: np.ndarray        # (N,) bool


def render_splats(positions, sigma_world, colors, opacities, camera,
                  background, settings: RasterSettings):
    """Render world-space Gaussians. Returns (image (H, W, 4), RenderContext)."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    sigma_world = np.ascontiguousarray(sigma_world, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    opacities = np.ascontiguousarray(opacities, dtype=np.float64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    n = positions.shape[0]
    if n == 0:
        raise ValueError("cannot render an empty cloud")
    cam = camera
    rot = cam.world_to_camera.rotation
    p_cam = positions @ rot.T + cam.world_to_camera.translation

    visible = p_cam[:, 2] > settings.near
    p = p_cam[visible]
    z = p[:, 2]
    inv_z = 1.0 / z
    mean2d = np.stack([cam.fx * p[:, 0] * inv_z + cam.cx,
                       cam.fy * p[:, 1] * inv_z + cam.cy], axis=1)

    jac = np.zeros((p.shape[0], 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * p[:, 0] * inv_z ** 2
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * p[:, 1] * inv_z ** 2
    mproj = jac @ rot
    sig = sigma_world[visible]
    cov2d = np.einsum("sab,sbc,sdc->sad", mproj, sig, mproj)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok = det > 1e-12
    conic = np.stack([cov2d[:, 1, 1], -cov2d[:, 0, 1], cov2d[:, 0, 0]], axis=1)
    conic[ok] /= det[ok, None]

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    radius = settings.cutoff_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    x0 = np.clip(np.floor(mean2d[:, 0] - radius), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(mean2d[:, 0] + radius) + 1, 0, cam.width).astype(np.int64)
    y0 = np.clip(np.floor(mean2d[:, 1] - radius), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(mean2d[:, 1] + radius) + 1, 0, cam.height).astype(np.int64)
    on_screen = ok & (x0 < x1) & (y0 < y1)

    # restrict to splats that can touch the image, keep depth order stable
    visible_rows = np.flatnonzero(visible)[on_screen]
    visible = np.zeros(n, dtype=bool)
    visible[visible_rows] = True
    keep = on_screen
    p = p[keep]
    mean2d = mean2d[keep]
    conic = conic[keep]
    mproj = mproj[keep]
    sig = sig[keep]
    bbox = np.stack([x0[keep], x1[keep], y0[keep], y1[keep]], axis=1)
    order = np.argsort(p[:, 2], kind="stable")

    ctx = RenderContext(
        camera=cam, settings=settings, background=background, n_total=n,
        visible=visible, order=order,
        p_cam=np.ascontiguousarray(p[order]),
        mean2d=np.ascontiguousarray(mean2d[order]),
        conic=np.ascontiguousarray(conic[order]),
        bbox=np.ascontiguousarray(bbox[order]),
        mproj=np.ascontiguousarray(mproj[order]),
        sigma_world=np.ascontiguousarray(sig[order]),
        colors=np.ascontiguousarray(colors[visible][order]),
        opacities=np.ascontiguousarray(opacities[visible][order]),
        final_t=None, last_contrib=None, weight_sum=None,
    )
    rgb, alpha, wsum, final_t, last = composite_forward(
        ctx.mean2d, ctx.conic, ctx.bbox, ctx.colors, ctx.opacities, background,
        cam.height, cam.width, settings.alpha_clamp, settings.alpha_min,
        settings.term_eps)
    ctx.final_t = final_t
    ctx.last_contrib = last
    ctx.weight_sum = wsum
    image = np.concatenate([rgb, alpha[..., None]], axis=2)
    return image, ctx


def render_backward(ctx: RenderContext, d_rgb, d_alpha) -> RenderGrads:
    """Gradients of a scalar loss through render_splats.

    d_rgb (H, W, 3) and d_alpha (H, W) are the upstream gradients of the
    returned image channels.
    """
    cam = ctx.camera
    d_mean2d, d_conic, d_colors_s, d_opas_s = composite_backward(
        ctx.mean2d, ctx.conic, ctx.bbox, ctx.colors, ctx.opacities,
        ctx.background, ctx.final_t, ctx.last_contrib,
        np.ascontiguousarray(d_rgb, dtype=np.float64),
        np.ascontiguousarray(d_alpha, dtype=np.float64),
        ctx.settings.alpha_clamp, ctx.settings.alpha_min)

    # conic -> 2D covariance: A = inv(cov2d); dL/dcov2d = -A G_A A
    s = ctx.mean2d.shape[0]
    amat = np.empty((s, 2, 2))
    amat[:, 0, 0] = ctx.conic[:, 0]
    amat[:, 0, 1] = amat[:, 1, 0] = ctx.conic[:, 1]
    amat[:, 1, 1] = ctx.conic[:, 2]
    gmat = np.empty((s, 2, 2))
    gmat[:, 0, 0] = d_conic[:, 0]
    gmat[:, 0, 1] = gmat[:, 1, 0] = 0.5 * d_conic[:, 1]
    gmat[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -np.einsum("sab,sbc,scd->sad", amat, gmat, amat)

    # cov2d = M Sigma M^T (+ dilation)
    g_sym = d_cov2d + np.swapaxes(d_cov2d, 1, 2)
    d_mproj = np.einsum("sab,sbc,scd->sad", g_sym, ctx.mproj, ctx.sigma_world)
    d_sigma_s = np.einsum("sba,sbc,scd->sad", ctx.mproj, d_cov2d, ctx.mproj)

    # M = J R: dJ = dM R^T, then J and mean2d depend on camera-space p
    rot = cam.world_to_camera.rotation
    d_jac = np.einsum("sab,cb->sac", d_mproj, rot)
    p = ctx.p_cam
    inv_z = 1.0 / p[:, 2]
    inv_z2 = inv_z ** 2
    jac = np.zeros((s, 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * p[:, 0] * inv_z2
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * p[:, 1] * inv_z2
    d_p = np.einsum("sba,sb->sa", jac, d_mean2d)
    d_p[:, 0] += d_jac[:, 0, 2] * (-cam.fx * inv_z2)
    d_p[:, 1] += d_jac[:, 1, 2] * (-cam.fy * inv_z2)
    d_p[:, 2] += (d_jac[:, 0, 0] * (-cam.fx * inv_z2)
                  + d_jac[:, 1, 1] * (-cam.fy * inv_z2)
                  + d_jac[:, 0, 2] * (2.0 * cam.fx * p[:, 0] * inv_z ** 3)
                  + d_jac[:, 1, 2] * (2.0 * cam.fy * p[:, 1] * inv_z ** 3))
    d_pos_s = d_p @ rot

    # scatter sorted-visible gradients back to full-cloud rows
    n = ctx.n_total
    rows = np.flatnonzero(ctx.visible)[ctx.order]
    grads = RenderGrads(
        d_positions=np.zeros((n, 3)),
        d_sigma=np.zeros((n, 3, 3)),
        d_colors=np.zeros((n, 3)),
        d_opacities=np.zeros(n),
        mean2d_norm=np.zeros(n),
        visible=ctx.visible,
    )
    grads.d_positions[rows] = d_pos_s
    grads.d_sigma[rows] = d_sigma_s
    grads.d_colors[rows] = d_colors_s
    grads.d_opacities[rows] = d_opas_s
    grads.mean2d_norm[rows] = np.linalg.norm(d_mean2d, axis=1)
    return grads


def render_cloud(cloud, camera, colors, background, settings: RasterSettings):
    """Render a canonical cloud rigidly (no deformation), differentiable.

    `colors` are explicit per-Gaussian RGB values. Returns (image, ctx_pair)
    where ctx_pair feeds render_cloud_backward.
    """
    q_unit = quat_normalize(cloud.rotations)
    sigma = build_covariance(cloud.log_scales, q_unit)
    opacity = sigmoid(cloud.opacity_logits)
    image, rctx = render_splats(cloud.positions, sigma, colors, opacity,
                                camera, background, settings)
    return image, (rctx, cloud, opacity)


def render_cloud_backward(ctx_pair, d_rgb, d_alpha):
    """Gradients for render_cloud with respect to the raw cloud arrays.

    Returns a dict with d_positions, d_log_scales, d_rotations,
    d_opacity_logits, d_colors, and the world-space d_positions alias
    d_means_world for callers that need the post-projection gradient.
    """
    rctx, cloud, opacity = ctx_pair
    grads = render_backward(rctx, d_rgb, d_alpha)
    d_log_scales, d_q_unit = build_covariance_grads(
        cloud.log_scales, quat_normalize(cloud.rotations), grads.d_sigma)
    d_rotations = normalize_grad(cloud.rotations, d_q_unit)
    d_logits = grads.d_opacities * opacity * (1.0 - opacity)
    return {
        "d_positions": grads.d_positions,
        "d_log_scales": d_log_scales,
        "d_rotations": d_rotations,
        "d_opacity_logits": d_logits,
        "d_colors": grads.d_colors,
        "d_means_world": grads.d_positions,
        "mean2d_norm": grads.mean2d_norm,
        "visible": grads.visible,
    }
