"""Pluggable denoisers for PnP-ADMM.

A denoiser is a pure function of ``(image, sigma)``.  ``strength`` maps the
ADMM noise level ``sigma_k = sqrt(beta / rho_k)`` to the denoiser's own
parameter: the Gaussian kernel std in pixels, or the NLM filtering strength
in HU.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

KINDS = ("gaussian_blur", "nonlocal_means", "external", "identity")


@dataclass(frozen=True)
class DenoiserRef:
    kind: str = "gaussian_blur"
    strength: float = 1.0
    command: str | None = None  # external only: "prog {input} {output} {sigma}"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if self.strength < 0:
            raise ValueError("strength must be nonnegative")
        if self.kind == "external" and not self.command:
            raise ValueError("external denoiser needs a command")


def gaussian_blur(image, std_px):
    if std_px == 0:
        return image.copy()
    return ndimage.gaussian_filter(image, std_px, mode="reflect", truncate=4.0)


def nonlocal_means(image, h):
    """NLM with an 11x11 search window and 5x5 patches."""
    if h == 0:
        return image.copy()
    from skimage.restoration import denoise_nl_means

    return denoise_nl_means(image, patch_size=5, patch_distance=5, h=h, fast_mode=True,
                            preserve_range=True)


def run_external(command, image, sigma):
    """Round-trip ``image`` through an external program via raster files."""
    from .io import read_raster, write_raster

    with tempfile.TemporaryDirectory(prefix="superct-denoise-") as tmp:
        src, dst = Path(tmp) / "input.raw", Path(tmp) / "output.raw"
        write_raster(src, image, units="offset-HU", extra={"sigma": float(sigma)})
        args = [a.format(input=src, output=dst, sigma=repr(float(sigma)))
                for a in shlex.split(command)]
        subprocess.run(args, check=True)
        out = read_raster(dst)
    if out.shape != image.shape:
        raise ValueError(f"external denoiser returned shape {out.shape}, expected {image.shape}")
    return out.astype(np.float64)


def apply_denoiser(d: DenoiserRef, image, sigma):
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("denoiser input has non-finite pixels")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if d.kind == "identity":
        out = image.copy()
    elif d.kind == "gaussian_blur":
        out = gaussian_blur(image, d.strength * sigma)
    elif d.kind == "nonlocal_means":
        out = nonlocal_means(image, d.strength * sigma)
    else:
        out = run_external(d.command, image, d.strength * sigma)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"denoiser {d.kind} returned non-finite pixels")
    return out


def fit_bound_constant(d: DenoiserRef, images, sigma):
    """Smallest C with ``||D(x) - x||^2 / n <= sigma^2 C`` over ``images``."""
    ratios = [np.mean((apply_denoiser(d, im, sigma) - im) ** 2) / sigma ** 2 for im in images]
    return float(max(ratios)), ratios


def describe(d: DenoiserRef):
    return json.dumps({"kind": d.kind, "strength": d.strength, "command": d.command})
