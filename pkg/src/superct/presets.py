"""Parameter presets: clinical-scale values and their desk-scale counterparts.

The clinical regularisation values (PWLS-EP beta = 2^15, PWLS-ULTRA
beta = 5e3 and mu = 5e5, ...) belong to a 512x512 / 1152-view system whose
data term is many orders of magnitude stronger than a 64x64 / 120-view one
in the HU-scaled units used here.  Desk presets multiply every penalty
weight by the same ``DESK_REG_SCALE`` so the relative balance between the
regulariser and the momentum term is kept.
"""

from dataclasses import replace

from .denoisers import DenoiserRef
from .geometry import FanBeamGeometry, ImageGrid, desk_geometry
from .mbir import AdmmParams, EpParams, UltraReconParams
from .neural import TrainConfig

DESK_REG_SCALE = 2.0 ** -23
DESK_ADMM_SCALE = 2.0 ** -28
DESK_FOV_MM = 256.0

CLINICAL_EP = EpParams(delta=20.0, beta=2.0 ** 15, iters=100)
CLINICAL_TRAIN = TrainConfig()
CLINICAL_ULTRA = dict(gamma=20.0, beta=5e3, mu=5e5, outer=5, inner=5)
CLINICAL_ADMM = dict(rho0=1e6, gamma_k=1.0, beta=25.0, mu=5e5)


def desk_grid(n=64) -> ImageGrid:
    """Square grid whose field of view (256 mm) gives body-sized water paths."""
    return ImageGrid(n, n, DESK_FOV_MM / n)


def desk_scan(n=64, n_detectors=128, n_views=120) -> tuple[ImageGrid, FanBeamGeometry]:
    grid = desk_grid(n)
    return grid, desk_geometry(grid, n_detectors, n_views)


def desk_ep(iters=100) -> EpParams:
    return replace(CLINICAL_EP, beta=CLINICAL_EP.beta * DESK_REG_SCALE, iters=iters)


def desk_ultra(union, **overrides) -> UltraReconParams:
    """Clinical PWLS-ULTRA weights rescaled; ``overrides`` are taken as-is (desk units)."""
    p = dict(CLINICAL_ULTRA)
    p["beta"] *= DESK_REG_SCALE
    p["mu"] *= DESK_REG_SCALE
    p.update(overrides)
    return UltraReconParams(union=union, **p)


def desk_admm(**overrides) -> AdmmParams:
    """PnP-ADMM at desk scale; ``overrides`` are taken as-is (desk units).

    rho0 and beta share ``DESK_ADMM_SCALE`` so that ``sigma_k = sqrt(beta / rho_k)``
    stays at its clinical value and rho0 sits near the data-term curvature.  The
    anchor weight mu is a tenth of the clinical mu / rho0 ratio; at the clinical
    ratio the solver barely moves from its anchor on desk data.
    """
    p = dict(CLINICAL_ADMM, iters=20, inner=10,
             denoiser=DenoiserRef("nonlocal_means", strength=4000.0))
    p["rho0"] *= DESK_ADMM_SCALE
    p["beta"] *= DESK_ADMM_SCALE
    p["mu"] *= 0.1 * DESK_ADMM_SCALE
    p.update(overrides)
    return AdmmParams(**p)


def desk_train(**overrides) -> TrainConfig:
    """SGD schedule that converges on ~12 desk pairs (the clinical 4 epochs do not)."""
    return replace(CLINICAL_TRAIN, **{"epochs": 60, "lr_start": 1e-2, "lr_end": 1e-3, **overrides})
