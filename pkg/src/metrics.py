"""
Image-quality metrics on float images in [0, 1].
"""

import cv2
import numpy as np

from src.errors import DimensionMismatch

PSNR_CAP = 99.0
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])
SSIM_WINDOW = (11, 11)
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(img_a, img_b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(img_a, img_b) -> float:
    """10 log10(1 / MSE); identical images report the cap."""
    a, b = _pair(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA_WEIGHTS
    return image


def ssim_map(img_a, img_b) -> np.ndarray:
    """
    Local SSIM at every position where the window fits inside the image.

    The blurred moments are cropped by half a window on each side, so padded
    border pixels never enter a window; an 11x11 image gives a 1x1 map.
    """
    a, b = _pair(img_a, img_b)
    a, b = luminance(a), luminance(b)
    if a.shape[0] < SSIM_WINDOW[0] or a.shape[1] < SSIM_WINDOW[1]:
        raise DimensionMismatch(f"image {a.shape} is smaller than the {SSIM_WINDOW} SSIM window")
    half_h, half_w = SSIM_WINDOW[0] // 2, SSIM_WINDOW[1] // 2
    valid = (slice(half_h, a.shape[0] - half_h), slice(half_w, a.shape[1] - half_w))

    def blur(x):
        return cv2.GaussianBlur(x, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA)[valid]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )


def ssim(img_a, img_b) -> float:
    """Mean local SSIM of the luminance images over the valid 11x11 Gaussian windows."""
    return float(np.mean(ssim_map(img_a, img_b)))
