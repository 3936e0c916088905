import numpy as np
import pytest
from scipy import ndimage

from superct.neural import (ConvNetParams, TrainConfig, TrainingError, forward, highpass,
                            highpass_adjoint, log_kernel, loss_and_grad, train_supervised)
from superct.presets import desk_grid
from superct.sim import make_phantom, random_phantom_spec


def numeric_grad(params, batch, alpha, kernel, array, idx, h=1e-5):
    old = array[idx]
    array[idx] = old + h
    up, _ = loss_and_grad(params, batch, alpha, kernel)
    array[idx] = old - h
    down, _ = loss_and_grad(params, batch, alpha, kernel)
    array[idx] = old
    return (up - down) / (2 * h)


def direct_convolve(image, kernel):
    """Zero-padded 2-D convolution by explicit summation."""
    H, W = image.shape
    r = kernel.shape[0] // 2
    out = np.zeros_like(image)
    for i in range(H):
        for j in range(W):
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    if 0 <= i - a < H and 0 <= j - b < W:
                        out[i, j] += kernel[a + r, b + r] * image[i - a, j - b]
    return out


@pytest.fixture
def pair(rng):
    target = rng.uniform(800, 1200, (12, 12))
    return target + rng.normal(0, 30, target.shape), target


def test_zero_network_is_identity(rng):
    x = rng.uniform(0, 2000, (10, 11))
    np.testing.assert_array_equal(forward(ConvNetParams.zeros(), x), x)


def test_network_is_nonlinear_and_deterministic(rng):
    params = ConvNetParams.init(seed=3)
    x = rng.uniform(0, 2000, (10, 10))
    z = rng.uniform(0, 2000, (10, 10))
    # residual branch is not additive
    assert not np.allclose(forward(params, x + z) - (x + z),
                           forward(params, x) - x + forward(params, z) - z)
    np.testing.assert_array_equal(forward(params, x), forward(ConvNetParams.init(seed=3), x))
    assert forward(params, x).shape == x.shape


def test_non_finite_activations_raise(rng):
    params = ConvNetParams.init(seed=0)
    params.weights[0][:] = 1e308
    with pytest.raises(FloatingPointError):
        forward(params, rng.uniform(0, 2000, (8, 8)))


def test_params_validation():
    p = ConvNetParams.init()
    with pytest.raises(ValueError):
        ConvNetParams([p.weights[0], p.weights[0]], p.biases[:2])


def test_loss_zero_at_perfect_fit(rng):
    x = rng.uniform(0, 2000, (9, 9))
    loss, grads = loss_and_grad(ConvNetParams.zeros(), [(x, x)], alpha=10.0)
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def test_alpha_zero_is_mean_squared_error(pair):
    params = ConvNetParams.init(seed=1)
    x, t = pair
    loss, _ = loss_and_grad(params, [(x, t)], alpha=0.0)
    assert loss == pytest.approx(np.mean(((forward(params, x) - t) / params.scale) ** 2), rel=1e-12)
    k = log_kernel()
    full, _ = loss_and_grad(params, [(x, t)], alpha=10.0, kernel=k)
    hf = highpass((forward(params, x) - t) / params.scale, k)
    assert full == pytest.approx(loss + 10.0 * np.mean(hf ** 2), rel=1e-12)


def test_backprop_matches_central_differences(pair, rng):
    params = ConvNetParams.init(seed=2, std=0.3)
    kernel = log_kernel()
    batch = [pair]
    _, grads = loss_and_grad(params, batch, 10.0, kernel)
    arrays = params.arrays()
    for _ in range(20):
        k = rng.integers(len(arrays))
        idx = tuple(rng.integers(s) for s in arrays[k].shape)
        num = numeric_grad(params, batch, 10.0, kernel, arrays[k], idx)
        assert grads[k][idx] == pytest.approx(num, rel=1e-4, abs=1e-10)


def test_zero_learning_rate_is_noop(pair):
    init = ConvNetParams.init(seed=4)
    cfg = TrainConfig(epochs=2, lr_start=0.0, lr_end=0.0, seed=4)
    trained, trace = train_supervised([pair], cfg, params=init)
    for a, b in zip(init.arrays(), trained.arrays()):
        np.testing.assert_array_equal(a, b)
    assert all(np.isfinite(trace["step_loss"]))


def test_single_pair_overfit(rng):
    # a target the 7x7 receptive field can represent: Gaussian smoothing of the input
    clean = make_phantom(random_phantom_spec(desk_grid(), 5))[16:48, 16:48]
    noisy = clean + rng.normal(0, 30, clean.shape)
    cfg = TrainConfig(epochs=200, lr_start=1e-2, lr_end=1e-3, momentum=0.9, seed=0)
    _, trace = train_supervised([(noisy, ndimage.gaussian_filter(noisy, 1.0))], cfg)
    assert trace["step_loss"][-1] <= 0.1 * trace["step_loss"][0]
    assert len(trace["step_loss"]) == 200


def test_four_epochs_reduce_loss():
    grid = desk_grid()
    rng = np.random.default_rng(8)
    pairs = []
    for s in range(10):
        x = make_phantom(random_phantom_spec(grid, 300 + s))
        pairs.append((x + rng.normal(0, 25, x.shape), x))
    _, trace = train_supervised(pairs, TrainConfig())
    assert len(trace["epoch_loss"]) == 4
    assert trace["epoch_loss"][-1] < trace["epoch_loss"][0]


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert cfg.learning_rate(0, 100) == pytest.approx(1e-3)
    assert cfg.learning_rate(100, 100) == pytest.approx(1e-4)
    assert cfg.learning_rate(50, 100) == pytest.approx(np.sqrt(1e-7))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_checkpoint(pair):
    with pytest.raises(TrainingError) as err:
        train_supervised([pair] * 4, TrainConfig(epochs=5, lr_start=1e6, lr_end=1e6))
    assert isinstance(err.value.checkpoint, ConvNetParams)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)


def test_log_kernel_properties():
    k = log_kernel(0.5, 15)
    assert k.shape == (15, 15)
    assert abs(k.sum()) < 1e-6
    np.testing.assert_array_equal(k, k[::-1, ::-1])
    assert np.abs(highpass(np.full((40, 40), 1000.0), k)).max() < 1e-9
    with pytest.raises(ValueError):
        log_kernel(0.5, 14)
    with pytest.raises(ValueError):
        log_kernel(0.0, 15)


def test_log_impulse_response_matches_direct_convolution():
    k = log_kernel(0.5, 15)
    impulse = np.zeros((31, 31))
    impulse[15, 15] = 1.0
    response = highpass(impulse, k)
    np.testing.assert_allclose(response[8:23, 8:23], k[::-1, ::-1], atol=1e-15)
    np.testing.assert_allclose(response, direct_convolve(impulse, k), atol=1e-15)


def test_highpass_adjoint(rng):
    k = log_kernel()
    for shape in ((20, 17), (5, 5)):
        x, y = rng.standard_normal(shape), rng.standard_normal(shape)
        assert np.vdot(highpass(x, k), y) == pytest.approx(np.vdot(x, highpass_adjoint(y, k)), rel=1e-12)


def test_log_translation_commutes_in_interior(rng):
    k = log_kernel()
    x = ndimage.gaussian_filter(rng.standard_normal((48, 48)), 1.0)
    shifted = np.roll(x, (3, -2), axis=(0, 1))
    a = np.roll(highpass(x, k), (3, -2), axis=(0, 1))
    b = highpass(shifted, k)
    band = 7 + 3
    np.testing.assert_allclose(a[band:-band, band:-band], b[band:-band, band:-band], atol=1e-12)
