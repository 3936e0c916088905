import sys

import numpy as np
import pytest

from superct.denoisers import DenoiserRef, apply_denoiser, fit_bound_constant
from superct.presets import desk_grid
from superct.sim import make_phantom, random_phantom_spec

KINDS = [DenoiserRef("gaussian_blur", 100.0), DenoiserRef("nonlocal_means", 4000.0)]


@pytest.mark.parametrize("d", KINDS)
def test_sigma_zero_is_identity(d, rng):
    x = rng.uniform(0, 2000, (32, 32))
    np.testing.assert_array_equal(apply_denoiser(d, x, 0.0), x)


@pytest.mark.parametrize("d", KINDS)
def test_constant_image_unchanged(d):
    x = np.full((32, 32), 1000.0)
    np.testing.assert_allclose(apply_denoiser(d, x, 0.01), x, rtol=1e-12)


@pytest.mark.parametrize("d", KINDS)
def test_deterministic_and_validated(d, rng):
    x = rng.uniform(0, 2000, (24, 24))
    np.testing.assert_array_equal(apply_denoiser(d, x, 0.005), apply_denoiser(d, x, 0.005))
    x[3, 3] = np.nan
    with pytest.raises(ValueError):
        apply_denoiser(d, x, 0.005)
    with pytest.raises(ValueError):
        apply_denoiser(d, np.zeros((4, 4)), -1.0)


def test_ref_validation():
    with pytest.raises(ValueError):
        DenoiserRef("bm3d")
    with pytest.raises(ValueError):
        DenoiserRef("gaussian_blur", -1.0)
    with pytest.raises(ValueError):
        DenoiserRef("external")


@pytest.mark.parametrize("d", KINDS)
def test_bounded_denoiser_constant(d):
    grid = desk_grid()
    rng = np.random.default_rng(4)
    images = [make_phantom(random_phantom_spec(grid, s)) + rng.normal(0, 20, grid.shape) for s in range(20)]
    sigma = 0.005
    C, ratios = fit_bound_constant(d, images, sigma)
    print(f"{d.kind}: fitted bound constant C = {C:.4g}")
    assert np.isfinite(C) and C > 0
    for im, r in zip(images, ratios):
        assert np.mean((apply_denoiser(d, im, sigma) - im) ** 2) <= sigma ** 2 * C * (1 + 1e-12)
        assert r <= C


def test_external_denoiser_round_trip(tmp_path, rng):
    script = tmp_path / "halve.py"
    script.write_text(
        "import sys\n"
        "from superct.io import read_raster, write_raster\n"
        "x = read_raster(sys.argv[1])\n"
        "write_raster(sys.argv[2], x * 0.5 + float(sys.argv[3]))\n"
    )
    d = DenoiserRef("external", 1.0, f"{sys.executable} {script} {{input}} {{output}} {{sigma}}")
    x = rng.uniform(0, 2000, (8, 8)).astype(np.float32).astype(np.float64)
    out = apply_denoiser(d, x, 0.25)
    np.testing.assert_allclose(out, x * 0.5 + 0.25, rtol=1e-6)
