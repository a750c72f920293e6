"""Numba kernels for depth-ordered alpha compositing of 2D splats.

The forward kernel walks splats front to back (callers pass depth-sorted
arrays) and keeps a per-pixel running transmittance. The backward kernel
revisits splats back to front, recomputing each alpha exactly as the
forward did, so branch decisions (alpha floor, opacity clamp, early
termination) replay bit-identically.

Single-threaded by design: iteration order is fixed, so results are
deterministic for identical inputs.
"""

import numba
import numpy as np

__all__ = ["composite_forward", "composite_backward"]


@numba.njit(cache=True, nogil=True)
def composite_forward(means2d, conics, bboxes, colors, opacities, bg,
                      height, width, alpha_clamp, alpha_min, term_eps):
    """Front-to-back composite. Returns (rgb, alpha, wsum, final_t, last_contrib).

    rgb includes the background weighted by final transmittance;
    alpha = 1 - final_t; wsum accumulates the per-pixel sum of compositing
    weights alpha_i * T_i for the conservation diagnostic.
    """
    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    wsum = np.zeros((height, width))
    last = np.full((height, width), -1, dtype=np.int32)
    n = means2d.shape[0]
    for s in range(n):
        mx = means2d[s, 0]
        my = means2d[s, 1]
        ca = conics[s, 0]
        cb = conics[s, 1]
        cc = conics[s, 2]
        for y in range(bboxes[s, 2], bboxes[s, 3]):
            for x in range(bboxes[s, 0], bboxes[s, 1]):
                t = trans[y, x]
                if t < term_eps:
                    continue
                dx = (x + 0.5) - mx
                dy = (y + 0.5) - my
                sigma = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                if sigma < 0.0:
                    continue
                alpha = opacities[s] * np.exp(-sigma)
                if alpha > alpha_clamp:
                    alpha = alpha_clamp
                if alpha < alpha_min:
                    continue
                w = alpha * t
                rgb[y, x, 0] += w * colors[s, 0]
                rgb[y, x, 1] += w * colors[s, 1]
                rgb[y, x, 2] += w * colors[s, 2]
                wsum[y, x] += w
                trans[y, x] = t * (1.0 - alpha)
                last[y, x] = s
    alpha_img = np.empty((height, width))
    for y in range(height):
        for x in range(width):
            t = trans[y, x]
            rgb[y, x, 0] += t * bg[0]
            rgb[y, x, 1] += t * bg[1]
            rgb[y, x, 2] += t * bg[2]
            alpha_img[y, x] = 1.0 - t
    return rgb, alpha_img, wsum, trans, last


@numba.njit(cache=True, nogil=True)
def composite_backward(means2d, conics, bboxes, colors, opacities, bg,
                       final_t, last, d_rgb, d_alpha,
                       alpha_clamp, alpha_min):
    """Back-to-front gradient pass matching composite_forward.

    Returns per-splat gradients (d_means2d, d_conics, d_colors, d_opacities).
    d_rgb is the upstream gradient of the composited rgb (background
    included), d_alpha of the alpha channel.
    """
    n = means2d.shape[0]
    d_means2d = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_colors = np.zeros((n, 3))
    d_opacities = np.zeros(n)
    height = final_t.shape[0]
    width = final_t.shape[1]
    # running transmittance (peeled back) and suffix radiance per pixel
    trans = final_t.copy()
    suffix = np.empty((height, width, 3))
    for y in range(height):
        for x in range(width):
            t = final_t[y, x]
            suffix[y, x, 0] = t * bg[0]
            suffix[y, x, 1] = t * bg[1]
            suffix[y, x, 2] = t * bg[2]
    for s in range(n - 1, -1, -1):
        mx = means2d[s, 0]
        my = means2d[s, 1]
        ca = conics[s, 0]
        cb = conics[s, 1]
        cc = conics[s, 2]
        opa = opacities[s]
        for y in range(bboxes[s, 2], bboxes[s, 3]):
            for x in range(bboxes[s, 0], bboxes[s, 1]):
                if last[y, x] < s:
                    continue
                dx = (x + 0.5) - mx
                dy = (y + 0.5) - my
                sigma = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                if sigma < 0.0:
                    continue
                raw = opa * np.exp(-sigma)
                alpha = raw
                if alpha > alpha_clamp:
                    alpha = alpha_clamp
                if alpha < alpha_min:
                    continue
                one_m = 1.0 - alpha
                t_i = trans[y, x] / one_m
                w = alpha * t_i
                gr = d_rgb[y, x, 0]
                gg = d_rgb[y, x, 1]
                gb = d_rgb[y, x, 2]
                d_colors[s, 0] += gr * w
                d_colors[s, 1] += gg * w
                d_colors[s, 2] += gb * w
                d_a = (gr * (colors[s, 0] * t_i - suffix[y, x, 0] / one_m)
                       + gg * (colors[s, 1] * t_i - suffix[y, x, 1] / one_m)
                       + gb * (colors[s, 2] * t_i - suffix[y, x, 2] / one_m)
                       + d_alpha[y, x] * final_t[y, x] / one_m)
                if raw <= alpha_clamp:
                    # unclamped: alpha = opa * exp(-sigma)
                    g = np.exp(-sigma)
                    d_opacities[s] += g * d_a
                    d_sigma = -alpha * d_a
                    d_conics[s, 0] += d_sigma * 0.5 * dx * dx
                    d_conics[s, 1] += d_sigma * dx * dy
                    d_conics[s, 2] += d_sigma * 0.5 * dy * dy
                    d_means2d[s, 0] += d_sigma * (-(ca * dx + cb * dy))
                    d_means2d[s, 1] += d_sigma * (-(cb * dx + cc * dy))
                suffix[y, x, 0] += colors[s, 0] * w
                suffix[y, x, 1] += colors[s, 1] * w
                suffix[y, x, 2] += colors[s, 2] * w
                trans[y, x] = t_i
    return d_means2d, d_conics, d_colors, d_opacities
