"""Image-quality metrics on [0, 1] images."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 1.0) -> float:
    """``10 log10(L^2 / mse)``; identical images give ``inf``."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / m)


def psnr_from_mse(m: float, data_range: float = 1.0) -> float:
    return math.inf if m == 0.0 else 10.0 * math.log10(data_range ** 2 / m)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, w.shape, axis=(-2, -1))
    return np.einsum("...ijkl,kl->...ij", win, w)


def ssim_map(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    a, b = _pair(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    saa = _filter(a * a, w) - mu_a ** 2
    sbb = _filter(b * b, w) - mu_b ** 2
    sab = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM over valid window positions (7x7 Gaussian, sigma 1.5)."""
    return float(np.mean(ssim_map(a, b, data_range)))


def random_perceptual_distance(a, b, phi) -> float:
    """RPD: squared distance between channel-normalised random-conv features.

    ``phi`` maps an image batch ``[B,1,H,W]`` to features ``[B,C,h,w]``. Not LPIPS.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    fa = np.asarray(phi.features_array(a))
    fb = np.asarray(phi.features_array(b))
    na = fa / (np.sqrt((fa ** 2).sum(axis=1, keepdims=True)) + 1e-10)
    nb = fb / (np.sqrt((fb ** 2).sum(axis=1, keepdims=True)) + 1e-10)
    return float(((na - nb) ** 2).sum(axis=1).mean())
