"""Union of learned sparsifying transforms (ULTRA): patches, coding, training.

Cluster labels are 0-based here (``0 .. K-1``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchConfig:
    patch_side: int = 8
    stride: int = 1
    wraparound: bool = False

    def __post_init__(self):
        if self.patch_side < 1 or self.stride < 1:
            raise ValueError("patch_side and stride must be >= 1")

    @property
    def m(self):
        return self.patch_side ** 2


def _positions(shape, cfg: PatchConfig):
    p, s = cfg.patch_side, cfg.stride
    if cfg.wraparound:
        return [range(0, n, s) for n in shape]
    return [range(0, n - p + 1, s) for n in shape]


def extract_patches(image, cfg: PatchConfig = PatchConfig()):
    """Overlapping patches as columns of an ``(m, N')`` matrix.

    Each patch is vectorised column-major; patches are ordered by a
    row-major scan of their top-left corners.
    """
    image = np.asarray(image, dtype=np.float64)
    p = cfg.patch_side
    if p > min(image.shape):
        raise ValueError(f"patch side {p} larger than image {image.shape}")
    src = np.pad(image, ((0, p - 1), (0, p - 1)), mode="wrap") if cfg.wraparound else image
    win = sliding_window_view(src, (p, p))[::cfg.stride, ::cfg.stride]
    rows, cols = _positions(image.shape, cfg)
    win = win[:len(rows), :len(cols)]
    return win.transpose(0, 1, 3, 2).reshape(-1, p * p).T


def accumulate_patches(cols, shape, cfg: PatchConfig = PatchConfig()):
    """Adjoint of :func:`extract_patches`: ``sum_j P_j^T cols[:, j]``."""
    p, s = cfg.patch_side, cfg.stride
    rows, cc = _positions(shape, cfg)
    nr, nc = len(rows), len(cc)
    cols = np.asarray(cols, dtype=np.float64).reshape(p, p, nr, nc)  # (col-in-patch, row-in-patch, ...)
    pad = (shape[0] + p - 1, shape[1] + p - 1) if cfg.wraparound else shape
    out = np.zeros(pad)
    for b in range(p):
        for a in range(p):
            out[a:a + s * nr:s, b:b + s * nc:s] += cols[b, a]
    if cfg.wraparound:
        out[:, :p - 1] += out[:, shape[1]:]
        out[:p - 1, :] += out[shape[0]:, :]
        out = out[:shape[0], :shape[1]]
    return out


def overlap_count(shape, cfg: PatchConfig = PatchConfig()):
    rows, cols = _positions(shape, cfg)
    return accumulate_patches(np.ones((cfg.m, len(rows) * len(cols))), shape, cfg)


def hard_threshold(v, gamma):
    """Keep entries with ``|v| >= gamma``; exact minimiser of ``||v-z||^2 + gamma^2 ||z||_0``."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(np.abs(v) >= gamma, v, 0.0)


def coding_cost(v, gamma):
    """Columnwise ``||v - HT(v)||^2 + gamma^2 ||HT(v)||_0`` = ``sum min(v^2, gamma^2)``."""
    return np.minimum(np.asarray(v) ** 2, gamma ** 2).sum(axis=0)


def dct_matrix(n):
    """Orthonormal 1-D DCT-II matrix (rows are basis vectors)."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * j + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


def dct2_matrix(side):
    d = dct_matrix(side)
    return np.kron(d, d)


def transform_penalty(omega):
    """``Q(W) = ||W||_F^2 - log|det W|``."""
    sign, logdet = np.linalg.slogdet(omega)
    if sign == 0 or not np.isfinite(logdet):
        return np.inf
    return float(np.sum(omega ** 2) - logdet)


@dataclass
class TransformUnion:
    transforms: np.ndarray  # (K, m, m)
    lambda0: float = 0.0031
    eta: float = 20.0
    patch: PatchConfig = field(default_factory=PatchConfig)
    training_log: list = field(default_factory=list)

    def __post_init__(self):
        self.transforms = np.asarray(self.transforms, dtype=np.float64)
        if self.transforms.ndim != 3 or self.transforms.shape[1] != self.transforms.shape[2]:
            raise ValueError("transforms must have shape (K, m, m)")
        if not np.all(np.isfinite(self.transforms)):
            raise ValueError("non-finite transform entries")

    @property
    def K(self):
        return self.transforms.shape[0]

    @property
    def m(self):
        return self.transforms.shape[1]


@dataclass
class Clustering:
    labels: np.ndarray  # (N',) in 0..K-1
    codes: np.ndarray  # (m, N')
    costs: np.ndarray = field(repr=False, default=None)  # per-patch cost of the chosen cluster


def sparse_code_and_cluster(patches, U: TransformUnion, gamma, patch_penalty=None):
    """Assign each patch to the transform with the lowest coding cost.

    ``patch_penalty`` is an optional ``(K, N')`` additive cost; training uses
    it for the per-patch share of ``lambda_k Q(Omega_k)``.  Ties go to the
    smaller index.
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.shape[0] != U.m:
        raise ValueError(f"patch dimension {X.shape[0]} != transform size {U.m}")
    n = X.shape[1]
    best = np.full(n, np.inf)
    labels = np.zeros(n, dtype=np.int64)
    codes = np.zeros_like(X)
    for k, omega in enumerate(U.transforms):
        V = omega @ X
        cost = coding_cost(V, gamma)
        if patch_penalty is not None:
            cost = cost + patch_penalty[k]
        better = cost < best
        best[better] = cost[better]
        labels[better] = k
        codes[:, better] = hard_threshold(V[:, better], gamma)
    return Clustering(labels, codes, best)


def update_transform(X, Z, lam):
    """Closed-form minimiser of ``||W X - Z||_F^2 + lam (||W||_F^2 - log|det W|)``.

    With ``X X^T + lam I = L L^T`` and ``L^{-1} X Z^T = U S V^T`` the minimiser is
    ``0.5 V (S + (S^2 + 2 lam I)^{1/2}) U^T L^{-1}``.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive for the transform update")
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    m = X.shape[0]
    L = np.linalg.cholesky(X @ X.T + lam * np.eye(m))
    Linv = sla.solve_triangular(L, np.eye(m), lower=True)
    U, s, Vt = np.linalg.svd(Linv @ X @ Z.T)
    d = 0.5 * (s + np.sqrt(s ** 2 + 2 * lam))
    return (Vt.T * d) @ U.T @ Linv


def transform_objective(X, Z, omega, lam):
    return float(np.sum((omega @ X - Z) ** 2) + lam * transform_penalty(omega))


def initial_transforms(K, side, seed=0):
    """DCT for every cluster, rotated by a small seeded rotation for k > 0."""
    base = dct2_matrix(side)
    m = side * side
    out = [base]
    for k in range(1, K):
        g = np.random.default_rng([seed, k]).standard_normal((m, m))
        out.append(base @ sla.expm(0.05 * (g - g.T)))
    return np.stack(out)


def union_objective(X, energy, U: TransformUnion, clustering: Clustering):
    """Full training objective for given transforms, codes and clusters."""
    total = 0.0
    for k, omega in enumerate(U.transforms):
        idx = clustering.labels == k
        if not idx.any():
            continue
        Zk = clustering.codes[:, idx]
        total += np.sum((omega @ X[:, idx] - Zk) ** 2) + U.eta ** 2 * np.count_nonzero(Zk)
        total += U.lambda0 * energy[idx].sum() * transform_penalty(omega)
    return float(total)


def _reseed_empty(X, energy, U, clustering, base, frac=0.01):
    """Move the worst-represented patches into empty clusters, if that helps.

    The empty cluster restarts from the DCT, takes the 1% of patches with the
    highest cost, and gets one exact transform update; the move is kept only
    when the training objective does not increase.
    """
    for k in range(U.K):
        if np.any(clustering.labels == k):
            continue
        U.transforms[k] = base
        n_steal = max(1, int(frac * X.shape[1]))
        worst = np.argsort(-clustering.costs, kind="stable")[:n_steal]
        before = union_objective(X, energy, U, clustering)
        trial = Clustering(clustering.labels.copy(), clustering.codes.copy(), clustering.costs.copy())
        trial.labels[worst] = k
        trial.codes[:, worst] = hard_threshold(base @ X[:, worst], U.eta)
        omega = update_transform(X[:, worst], trial.codes[:, worst], U.lambda0 * energy[worst].sum())
        U.transforms[k] = omega
        if union_objective(X, energy, U, trial) <= before:
            log.debug("cluster %d empty: reseeded with %d patches", k, n_steal)
            clustering = trial
        else:
            U.transforms[k] = base
            log.debug("cluster %d empty: reseed rejected", k)
    return clustering


def train_ultra(images, K=5, iterations=20, cfg: PatchConfig = PatchConfig(),
                lambda0=0.0031, eta=20.0, seed=0) -> TransformUnion:
    """Learn K square transforms by alternating coding/clustering and transform updates."""
    if len(images) < 1 or iterations < 1:
        raise ValueError("need at least one image and one iteration")
    X = np.concatenate([extract_patches(im, cfg) for im in images], axis=1)
    if np.all(np.ptp(X, axis=0) == 0):
        raise ValueError("degenerate training set: every patch is constant")
    energy = np.sum(X ** 2, axis=0)
    base = dct2_matrix(cfg.patch_side)
    U = TransformUnion(initial_transforms(K, cfg.patch_side, seed), lambda0, eta, cfg)

    for it in range(iterations):
        q = np.array([transform_penalty(w) for w in U.transforms])
        clustering = sparse_code_and_cluster(X, U, eta, patch_penalty=lambda0 * q[:, None] * energy)
        clustering = _reseed_empty(X, energy, U, clustering, base)
        for k in range(K):
            idx = clustering.labels == k
            if idx.any():
                lam = lambda0 * energy[idx].sum()
                U.transforms[k] = update_transform(X[:, idx], clustering.codes[:, idx], lam)
        obj = union_objective(X, energy, U, clustering)
        sizes = np.bincount(clustering.labels, minlength=K).tolist()
        U.training_log.append({"iteration": it, "objective": obj, "cluster_sizes": sizes})
        log.debug("ultra iter %d objective %.6e sizes %s", it, obj, sizes)
    return U
