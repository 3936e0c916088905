"""Shared oracles and builders for the test suite."""

import numpy as np


def disk(grid, radius_mm, value=1000.0, center=(0.0, 0.0)):
    X, Y = grid.pixel_centers()
    return np.where((X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius_mm ** 2, value, 0.0)


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


# "AC<n> PASS|FAIL ..." lines, printed again in the terminal summary
ACCEPTANCE_LINES = []
