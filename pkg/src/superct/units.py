"""Offset-HU <-> linear attenuation conversion (air = 0, water = 1000)."""

import numpy as np

MU_WATER = 0.02  # mm^-1, roughly 70 keV
HU_SCALE = 1000.0


def hu_to_mu(image_hu):
    """Offset-HU image to attenuation in mm^-1, clipping negative values to 0."""
    mu = np.asarray(image_hu, dtype=np.float64) * (MU_WATER / HU_SCALE)
    return np.maximum(mu, 0.0)


def mu_to_hu(mu):
    return np.asarray(mu, dtype=np.float64) * (HU_SCALE / MU_WATER)
