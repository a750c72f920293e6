"""Image quality metrics: PSNR and SSIM on [0, 1] float images."""

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 99.0

# Rec. 601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(pred, target):
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def to_luma(image):
    """Collapse an (H, W, 3) RGB image to (H, W) luma; pass (H, W) through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] >= 3:
        return image[..., :3] @ LUMA_WEIGHTS
    raise ValueError(f"expected (H, W) or (H, W, >=3) image, got {image.shape}")


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, target):
    """Structural similarity on luma with an 11x11 Gaussian window, sigma 1.5.

    Statistics use the windowed-mean formulation over the valid interior
    (no padding), so identical inputs score exactly 1.
    """
    x = to_luma(pred)
    y = to_luma(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_x = filt(x)
    mu_y = filt(y)
    # E[x y] - mu_x mu_y; same expression order for both variances so that
    # x == y collapses every term pair bitwise and the map is exactly 1
    sigma_x = filt(x * x) - mu_x * mu_x
    sigma_y = filt(y * y) - mu_y * mu_y
    sigma_xy = filt(x * y) - mu_x * mu_y
    numerator = (2.0 * (mu_x * mu_y) + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return float(np.mean(numerator / denominator))
