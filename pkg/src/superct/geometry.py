"""CT acquisition geometry, Siddon system matrix, projectors and FBP.

Images are 2-D arrays of shape ``(n_rows, n_cols)``.  Row 0 is the top of the
image (largest y), column 0 the left edge (smallest x), and the grid is
centred on the rotation axis.  Sinograms are arrays of shape
``(n_views, n_detectors)``; ray ``i`` is ``view * n_detectors + detector``.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .units import HU_SCALE, MU_WATER, mu_to_hu


@dataclass(frozen=True)
class ImageGrid:
    n_rows: int
    n_cols: int
    pixel_size_mm: float = 0.69

    def __post_init__(self):
        if self.n_rows < 4 or self.n_cols < 4:
            raise ValueError("image grid must be at least 4x4")
        if not self.pixel_size_mm > 0:
            raise ValueError("pixel_size_mm must be positive")

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def n_pixels(self):
        return self.n_rows * self.n_cols

    def pixel_centers(self):
        """Return (x, y) coordinate arrays of pixel centres in mm."""
        ps = self.pixel_size_mm
        x = (np.arange(self.n_cols) - (self.n_cols - 1) / 2.0) * ps
        y = ((self.n_rows - 1) / 2.0 - np.arange(self.n_rows)) * ps
        return np.meshgrid(x, y)


@dataclass(frozen=True)
class FanBeamGeometry:
    """Scan geometry.  ``mode`` is ``"fan_flat"`` or ``"parallel"``.

    Fan-beam views cover [0, 2*pi), parallel views [0, pi).  The source
    distances are ignored in parallel mode.
    """

    n_detectors: int
    n_views: int
    det_spacing_mm: float
    src_to_det_mm: float = 1085.6
    src_to_iso_mm: float = 595.0
    mode: str = "parallel"

    def __post_init__(self):
        if self.n_detectors < 1 or self.n_views < 1:
            raise ValueError("need at least one detector and one view")
        if not self.det_spacing_mm > 0:
            raise ValueError("det_spacing_mm must be positive")
        if self.mode not in ("fan_flat", "parallel"):
            raise ValueError(f"unknown geometry mode {self.mode!r}")
        if self.mode == "fan_flat" and not (self.src_to_det_mm > self.src_to_iso_mm > 0):
            raise ValueError("fan_flat requires src_to_det_mm > src_to_iso_mm > 0")

    @property
    def n_rays(self):
        return self.n_detectors * self.n_views

    @property
    def shape(self):
        return (self.n_views, self.n_detectors)

    def view_angles(self):
        span = 2 * np.pi if self.mode == "fan_flat" else np.pi
        return np.arange(self.n_views) * (span / self.n_views)

    def detector_offsets(self):
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) * self.det_spacing_mm


def desk_geometry(grid: ImageGrid, n_detectors=128, n_views=120, mode="parallel"):
    """Parallel geometry whose detector just covers the grid diagonal."""
    diag = np.hypot(grid.n_rows, grid.n_cols) * grid.pixel_size_mm
    return FanBeamGeometry(n_detectors=n_detectors, n_views=n_views,
                           det_spacing_mm=1.02 * diag / n_detectors, mode=mode)


def clinical_geometry():
    """The clinical fan-beam scanner geometry (736 detectors x 1152 views)."""
    return FanBeamGeometry(n_detectors=736, n_views=1152, det_spacing_mm=1.2858,
                           src_to_det_mm=1085.6, src_to_iso_mm=595.0, mode="fan_flat")


def geometry_hash(geometry: FanBeamGeometry, grid: ImageGrid) -> str:
    blob = json.dumps({"geometry": asdict(geometry), "grid": asdict(grid)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ray_endpoints(geometry: FanBeamGeometry, grid: ImageGrid):
    """Start and end points (each ``(n_rays, 2)``) of every ray, in ray order."""
    beta = np.repeat(geometry.view_angles(), geometry.n_detectors)
    u = np.tile(geometry.detector_offsets(), geometry.n_views)
    c, s = np.cos(beta), np.sin(beta)
    if geometry.mode == "parallel":
        reach = np.hypot(grid.n_rows, grid.n_cols) * grid.pixel_size_mm
        base = np.stack([u * c, u * s], axis=1)
        direction = np.stack([-s, c], axis=1)
        return base - reach * direction, base + reach * direction
    sid, sdd = geometry.src_to_iso_mm, geometry.src_to_det_mm
    src = np.stack([sid * c, sid * s], axis=1)
    det = np.stack([-(sdd - sid) * c - u * s, -(sdd - sid) * s + u * c], axis=1)
    return src, det


def siddon(p0, p1, n_rows, n_cols, pixel_size):
    """Exact ray/pixel intersection lengths for a batch of rays.

    Parameters
    ----------
    p0, p1 : ndarray, shape (n, 2)
        Ray start and end points in mm.
    n_rows, n_cols, pixel_size :
        Grid description (the grid is centred at the origin).

    Returns
    -------
    ray, pixel, length : ndarray
        COO triplets; ``pixel`` is the row-major flat index.
    """
    p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
    p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
    d = p1 - p0
    ray_len = np.hypot(d[:, 0], d[:, 1])
    half_w, half_h = n_cols * pixel_size / 2.0, n_rows * pixel_size / 2.0
    xs = -half_w + np.arange(n_cols + 1) * pixel_size
    ys = -half_h + np.arange(n_rows + 1) * pixel_size

    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (xs[None, :] - p0[:, :1]) / d[:, :1]
        ay = (ys[None, :] - p0[:, 1:]) / d[:, 1:]

    flat_x = d[:, 0] == 0
    flat_y = d[:, 1] == 0
    inside_x = (p0[:, 0] > -half_w) & (p0[:, 0] < half_w)
    inside_y = (p0[:, 1] > -half_h) & (p0[:, 1] < half_h)
    lo_x = np.where(flat_x, np.where(inside_x, -np.inf, np.inf), np.minimum(ax[:, 0], ax[:, -1]))
    hi_x = np.where(flat_x, np.where(inside_x, np.inf, -np.inf), np.maximum(ax[:, 0], ax[:, -1]))
    lo_y = np.where(flat_y, np.where(inside_y, -np.inf, np.inf), np.minimum(ay[:, 0], ay[:, -1]))
    hi_y = np.where(flat_y, np.where(inside_y, np.inf, -np.inf), np.maximum(ay[:, 0], ay[:, -1]))
    a_min = np.maximum.reduce([lo_x, lo_y, np.zeros_like(lo_x)])
    a_max = np.minimum.reduce([hi_x, hi_y, np.ones_like(hi_x)])
    hit = a_max > a_min
    a_min = np.where(hit, a_min, 0.0)
    a_max = np.where(hit, a_max, 0.0)

    ax = np.where(flat_x[:, None], a_min[:, None], ax)
    ay = np.where(flat_y[:, None], a_min[:, None], ay)
    alphas = np.concatenate([a_min[:, None], a_max[:, None], ax, ay], axis=1)
    alphas = np.clip(alphas, a_min[:, None], a_max[:, None])
    alphas.sort(axis=1)

    seg = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    mx = p0[:, :1] + mid * d[:, :1]
    my = p0[:, 1:] + mid * d[:, 1:]
    col = np.clip(np.floor((mx + half_w) / pixel_size).astype(np.int64), 0, n_cols - 1)
    row = np.clip(np.floor((half_h - my) / pixel_size).astype(np.int64), 0, n_rows - 1)
    length = seg * ray_len[:, None]

    keep = (length > 1e-12 * pixel_size) & hit[:, None]
    ray = np.broadcast_to(np.arange(len(p0))[:, None], keep.shape)[keep]
    return ray, (row * n_cols + col)[keep], length[keep]


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """Sparse ray-tracing operator: ``matrix`` has shape (n_rays, n_pixels), mm."""

    geometry: FanBeamGeometry
    grid: ImageGrid
    matrix: sp.csr_matrix = field(repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    def hash(self):
        return geometry_hash(self.geometry, self.grid)

    @cached_property
    def hu_matrix(self):
        """The operator acting on offset-HU images (``A * mu_water / 1000``)."""
        return (self.matrix * (MU_WATER / HU_SCALE)).tocsr()

    @cached_property
    def hu_matrix_t(self):
        return self.hu_matrix.T.tocsr()


def build_system_matrix(geometry: FanBeamGeometry, grid: ImageGrid, chunk=4096) -> SystemMatrix:
    """Trace every ray of ``geometry`` through ``grid`` with Siddon's method."""
    p0, p1 = ray_endpoints(geometry, grid)
    rays, pix, vals = [], [], []
    for start in range(0, len(p0), chunk):
        r, j, v = siddon(p0[start:start + chunk], p1[start:start + chunk],
                         grid.n_rows, grid.n_cols, grid.pixel_size_mm)
        rays.append(r + start)
        pix.append(j)
        vals.append(v)
    rays, pix, vals = (np.concatenate(a) for a in (rays, pix, vals))
    if vals.size == 0:
        raise ValueError("empty system matrix: no ray intersects the image grid")
    mat = sp.csr_matrix((vals, (rays, pix)), shape=(geometry.n_rays, grid.n_pixels))
    mat.sum_duplicates()
    mat.sort_indices()
    return SystemMatrix(geometry, grid, mat)


def _check_image(A: SystemMatrix, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != A.grid.shape:
        raise ValueError(f"image shape {x.shape} does not match grid {A.grid.shape}")
    return x


def _check_sino(A: SystemMatrix, s):
    s = np.asarray(s, dtype=np.float64)
    if s.shape != A.geometry.shape:
        raise ValueError(f"sinogram shape {s.shape} does not match geometry {A.geometry.shape}")
    return s


def forward_project(A: SystemMatrix, x_mu):
    """Line integrals ``A x`` as a ``(n_views, n_detectors)`` sinogram."""
    x = _check_image(A, x_mu)
    return (A.matrix @ x.ravel()).reshape(A.geometry.shape)


def back_project(A: SystemMatrix, s):
    """Exact transpose action ``A^T s`` as an image."""
    s = _check_sino(A, s)
    return (A.matrix.T @ s.ravel()).reshape(A.grid.shape)


def ramp_filter(n_detectors, spacing):
    """Frequency response of the Hann-apodised ramp filter.

    Built from the band-limited spatial ramp kernel so the DC term is exact,
    then windowed with a Hann taper that reaches zero at Nyquist.  Returns
    the response on a zero-padded FFT grid of length ``2**k >= 2*n``.
    """
    n_fft = 1 << int(np.ceil(np.log2(2 * n_detectors)))
    k = np.fft.fftfreq(n_fft) * n_fft  # signed integer offsets
    h = np.zeros(n_fft)
    h[0] = 1.0 / (4 * spacing ** 2)
    odd = (k.astype(np.int64) % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    resp = np.real(np.fft.fft(h)) * spacing
    window = 0.5 * (1 + np.cos(2 * np.pi * np.fft.fftfreq(n_fft)))
    return resp * window


def _filter_views(s, spacing):
    n_det = s.shape[1]
    resp = ramp_filter(n_det, spacing)
    padded = np.fft.fft(s, n=len(resp), axis=1)
    return np.real(np.fft.ifft(padded * resp, axis=1))[:, :n_det]


def fbp(geometry: FanBeamGeometry, grid: ImageGrid, s):
    """Filtered back projection of a log sinogram, returned in offset-HU."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != geometry.shape:
        raise ValueError(f"sinogram shape {s.shape} does not match geometry {geometry.shape}")
    if geometry.n_views < 8:
        warnings.warn(f"fbp with only {geometry.n_views} views: degraded quality", RuntimeWarning)

    X, Y = grid.pixel_centers()
    betas = geometry.view_angles()
    image = np.zeros(grid.shape)
    n_det = geometry.n_detectors
    center = (n_det - 1) / 2.0

    if geometry.mode == "parallel":
        du = geometry.det_spacing_mm
        q = _filter_views(s, du)
        for b, qv in zip(betas, q):
            t = (X * np.cos(b) + Y * np.sin(b)) / du + center
            image += np.interp(t, np.arange(n_det), qv, left=0.0, right=0.0)
        image *= np.pi / geometry.n_views
    else:
        sid, sdd = geometry.src_to_iso_mm, geometry.src_to_det_mm
        dp = geometry.det_spacing_mm * sid / sdd
        p = geometry.detector_offsets() * sid / sdd
        q = 0.5 * _filter_views(s * (sid / np.sqrt(sid ** 2 + p ** 2)), dp)
        for b, qv in zip(betas, q):
            dist = sid - (X * np.cos(b) + Y * np.sin(b))
            t = sid * (-X * np.sin(b) + Y * np.cos(b)) / dist / dp + center
            image += np.interp(t, np.arange(n_det), qv, left=0.0, right=0.0) * (sid / dist) ** 2
        image *= 2 * np.pi / geometry.n_views
    return mu_to_hu(image)
