"""Image quality metrics: PSNR, SSIM and CIELAB Delta E (CIE76).

All functions take H x W x 3 float images on a [0, 1] scale and compute in
float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .retouch import LUMA_WEIGHTS

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# sRGB (D65) linear RGB -> XYZ
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit peak, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable Gaussian, valid positions only
    tmp = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(tmp, g.size, axis=0) @ g


def ssim(a, b):
    """Single-scale SSIM on the luminance channel.

    Gaussian window of size 11 and sigma 1.5, K1=0.01, K2=0.03, dynamic
    range 1; the SSIM map is averaged over window positions fully inside
    the image.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        a = a @ LUMA_WEIGHTS
        b = b @ LUMA_WEIGHTS
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW} x {SSIM_WINDOW}, got {a.shape}")
    g = _gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def rgb_to_lab(img):
    """sRGB in [0, 1] to CIE L*a*b* under D65. Inputs are clipped to [0, 1]."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    xyz = srgb_to_linear(img) @ RGB_TO_XYZ.T / D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def delta_e(a, b):
    """Mean per-pixel Euclidean distance in CIELAB (Delta E 1976)."""
    a, b = _pair(a, b)
    diff = rgb_to_lab(a) - rgb_to_lab(b)
    return float(np.mean(np.sqrt(np.sum(diff**2, axis=-1))))
