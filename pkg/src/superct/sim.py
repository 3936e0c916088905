"""Phantoms, noisy sinogram simulation and PWLS statistical weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .geometry import FanBeamGeometry, ImageGrid, SystemMatrix, fbp, forward_project
from .units import MU_WATER, hu_to_mu, mu_to_hu  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

MAX_LINE_INTEGRAL = 50.0
_POISSON_EXACT_MAX = 1000.0


@dataclass(frozen=True)
class NoiseModel:
    I0: float = 1e4
    sigma2: float = 25.0
    epsilon: float = 0.1
    deterministic_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.I0 > 0:
            raise ValueError("I0 must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if not 0 < self.epsilon < self.I0:
            raise ValueError("epsilon must lie in (0, I0)")


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalised coordinates (grid half-extent = 1, y up).

    ``value`` is in offset-HU.  Additive ellipses add to what is already
    painted; the others overwrite it.
    """

    cx: float
    cy: float
    a: float
    b: float
    angle_deg: float
    value: float
    additive: bool = False


@dataclass(frozen=True)
class PhantomSpec:
    grid: ImageGrid
    ellipses: tuple = ()
    seed: int | None = None

    def __post_init__(self):
        for e in self.ellipses:
            lo = -3000.0 if e.additive else 0.0
            if not lo <= e.value <= 3000.0:
                raise ValueError(f"ellipse value {e.value} outside [{lo}, 3000]")
            reach = max(e.a, e.b)
            if abs(e.cx) - reach > 1 or abs(e.cy) - reach > 1:
                raise ValueError("ellipse lies entirely outside the grid support")


# Shepp-Logan (original contrast), scaled to offset-HU.
SHEPP_LOGAN = (
    Ellipse(0.0, 0.0, 0.69, 0.92, 0.0, 2000.0, True),
    Ellipse(0.0, -0.0184, 0.6624, 0.874, 0.0, -980.0, True),
    Ellipse(0.22, 0.0, 0.11, 0.31, -18.0, -20.0, True),
    Ellipse(-0.22, 0.0, 0.16, 0.41, 18.0, -20.0, True),
    Ellipse(0.0, 0.35, 0.21, 0.25, 0.0, 10.0, True),
    Ellipse(0.0, 0.1, 0.046, 0.046, 0.0, 10.0, True),
    Ellipse(0.0, -0.1, 0.046, 0.046, 0.0, 10.0, True),
    Ellipse(-0.08, -0.605, 0.046, 0.023, 0.0, 10.0, True),
    Ellipse(0.0, -0.606, 0.023, 0.023, 0.0, 10.0, True),
    Ellipse(0.06, -0.605, 0.023, 0.046, 0.0, 10.0, True),
)


def shepp_logan(grid: ImageGrid) -> np.ndarray:
    return make_phantom(PhantomSpec(grid, SHEPP_LOGAN))


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    grid = spec.grid
    X, Y = grid.pixel_centers()
    X = X / (grid.n_cols * grid.pixel_size_mm / 2.0)
    Y = Y / (grid.n_rows * grid.pixel_size_mm / 2.0)
    image = np.zeros(grid.shape)
    for e in spec.ellipses:
        t = np.deg2rad(e.angle_deg)
        dx, dy = X - e.cx, Y - e.cy
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        inside = (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0
        if e.additive:
            image[inside] += e.value
        else:
            image[inside] = e.value
    return image


def random_phantom_spec(grid: ImageGrid, seed: int) -> PhantomSpec:
    """Body-like ellipse phantom: water-ish body, soft-tissue inserts, some bone."""
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.62, 0.85, size=2)
    body = Ellipse(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), a, b,
                   rng.uniform(-30, 30), rng.uniform(960.0, 1040.0))
    ellipses = [body]
    for _ in range(rng.integers(3, 7)):
        r = rng.uniform(0.0, 0.55) * min(a, b)
        phi = rng.uniform(0, 2 * np.pi)
        size = rng.uniform(0.04, 0.22, size=2) * min(a, b)
        bone = rng.random() < 0.2
        value = rng.uniform(1300.0, 1800.0) if bone else rng.uniform(880.0, 1120.0)
        ellipses.append(Ellipse(body.cx + r * np.cos(phi), body.cy + r * np.sin(phi),
                                size[0], size[1], rng.uniform(0, 180), value))
    for _ in range(rng.integers(0, 3)):
        r = rng.uniform(0.0, 0.5) * min(a, b)
        phi = rng.uniform(0, 2 * np.pi)
        size = rng.uniform(0.03, 0.1, size=2)
        ellipses.append(Ellipse(body.cx + r * np.cos(phi), body.cy + r * np.sin(phi),
                                size[0], size[1], rng.uniform(0, 180),
                                rng.uniform(-60.0, 60.0), additive=True))
    return PhantomSpec(grid, tuple(ellipses), seed)


# -- counter-based random numbers ------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, index, stream: int):
    """Uniform (0, 1) variates that depend only on (seed, index, stream).

    Each ray gets its own stream, so splitting the rays across workers never
    changes the draws.
    """
    index = np.asarray(index, dtype=np.uint64)
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
                      ^ np.uint64(stream * 0x632BE59BD9B4E019 & 0xFFFFFFFFFFFFFFFF))
    bits = _splitmix64(_splitmix64(index ^ key) + key)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def sample_poisson(mean, u):
    """Poisson draw by inversion of one uniform each; normal approximation above 1000."""
    mean = np.asarray(mean, dtype=np.float64)
    out = np.empty_like(mean)
    small = mean <= _POISSON_EXACT_MAX
    out[small] = stats.poisson.ppf(u[small], mean[small])
    big = ~small
    approx = np.rint(mean[big] + np.sqrt(mean[big]) * special.ndtri(u[big]))
    out[big] = np.maximum(approx, 0.0)
    return out


def simulate_sinogram(x_star, A: SystemMatrix, nm: NoiseModel):
    """Low-dose log sinogram from an offset-HU image.

    ``y_i = -log(max(Poisson(I0 exp(-[A mu]_i)) + N(0, sigma2), eps) / I0)``.
    """
    p = forward_project(A, hu_to_mu(x_star))
    bad = np.flatnonzero(p.ravel() > MAX_LINE_INTEGRAL)
    if bad.size:
        raise ValueError(f"photon starvation: line integral > {MAX_LINE_INTEGRAL} "
                         f"on rays {bad[:20].tolist()}{' ...' if bad.size > 20 else ''}")
    mean = nm.I0 * np.exp(-p)
    if nm.deterministic_mode:
        return np.where(mean >= nm.epsilon, p, -np.log(nm.epsilon / nm.I0))
    idx = np.arange(p.size, dtype=np.uint64)
    counts = sample_poisson(mean.ravel(), counter_uniform(nm.seed, idx, 0))
    if nm.sigma2 > 0:
        counts = counts + np.sqrt(nm.sigma2) * special.ndtri(counter_uniform(nm.seed, idx, 1))
    counts = np.maximum(counts, nm.epsilon).reshape(p.shape)
    return -np.log(counts / nm.I0)


def compute_weights(y, nm: NoiseModel):
    """Inverse-variance weights ``I^2 / (I + sigma2)`` with ``I = I0 exp(-y)``."""
    counts = nm.I0 * np.exp(-np.asarray(y, dtype=np.float64))
    return counts ** 2 / (counts + nm.sigma2)


# -- datasets ---------------------------------------------------------------

@dataclass
class Slice:
    split: str
    index: int
    phantom_seed: int
    noise_seed: int
    x_star: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    fbp: np.ndarray = field(repr=False)
    init: np.ndarray = field(repr=False)


@dataclass
class Dataset:
    grid: ImageGrid
    geometry: FanBeamGeometry
    noise: NoiseModel
    seed: int
    splits: dict

    def __getitem__(self, split):
        return self.splits[split]


SPLITS = ("train", "val", "test")


def split_seeds(seed: int, counts: dict):
    """Per-slice (phantom, noise) seeds; each split draws from its own child sequence."""
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    out = {}
    for name, child in zip(SPLITS, children):
        states = [c.generate_state(2, dtype=np.uint64) for c in child.spawn(counts.get(name, 0))]
        out[name] = [(int(s[0] >> np.uint64(1)), int(s[1] >> np.uint64(1))) for s in states]
    return out


def make_dataset(n_train, n_val, n_test, grid: ImageGrid, geometry: FanBeamGeometry,
                 nm: NoiseModel, seed: int, A: SystemMatrix | None = None,
                 init_params=None) -> Dataset:
    """Random-ellipse phantoms with noisy sinograms, weights, FBP and PWLS-EP inits."""
    from .mbir import EpParams, pwls_ep_reconstruct

    if A is None:
        from .geometry import build_system_matrix
        A = build_system_matrix(geometry, grid)
    ep = init_params or EpParams()
    seeds = split_seeds(seed, {"train": n_train, "val": n_val, "test": n_test})
    splits = {}
    for name in SPLITS:
        slices = []
        for i, (pseed, nseed) in enumerate(seeds[name]):
            x_star = make_phantom(random_phantom_spec(grid, pseed))
            noise = NoiseModel(nm.I0, nm.sigma2, nm.epsilon, nm.deterministic_mode, nseed)
            y = simulate_sinogram(x_star, A, noise)
            w = compute_weights(y, nm)
            x_fbp = fbp(geometry, grid, y)
            init = pwls_ep_reconstruct(y, w, A, ep, np.maximum(x_fbp, 0.0))
            log.debug("slice %s/%d built", name, i)
            slices.append(Slice(name, i, pseed, nseed, x_star, y, w, x_fbp, init))
        splits[name] = slices
    return Dataset(grid, geometry, nm, seed, splits)
