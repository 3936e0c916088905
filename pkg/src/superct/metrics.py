"""Image quality metrics in offset-HU: RMSE, SNR and SSIM."""

import numpy as np
from skimage.metrics import structural_similarity


def _pair(x_hat, x_star):
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x_star, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse_hu(x_hat, x_star, mask=None):
    a, b = _pair(x_hat, x_star)
    d = a - b
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty mask")
        d = d[mask]
    return float(np.sqrt(np.mean(d ** 2)))


def snr_db(x_hat, x_star):
    """``10 log10(||x*||^2 / ||x_hat - x*||^2)``; +inf on exact equality."""
    a, b = _pair(x_hat, x_star)
    err = float(np.sum((a - b) ** 2))
    sig = float(np.sum(b ** 2))
    if err == 0:
        return float("inf")
    if sig == 0:
        return float("-inf")
    return float(10 * np.log10(sig / err))


def ssim(x_hat, x_star, data_range=None):
    """Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03).

    ``data_range`` defaults to the range of ``x_star``.
    """
    a, b = _pair(x_hat, x_star)
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise ValueError("reference image has zero dynamic range")
    return float(structural_similarity(a, b, data_range=data_range, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False, K1=0.01, K2=0.03))


def report(x_hat, x_star, mask=None):
    return {"rmse_hu": rmse_hu(x_hat, x_star, mask), "snr_db": snr_db(x_hat, x_star),
            "ssim": ssim(x_hat, x_star)}
