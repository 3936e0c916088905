"""Model-based iterative reconstruction: PWLS-EP, PWLS-ULTRA and PnP-ADMM.

All public images are offset-HU.  Internally the data term uses the
HU-scaled system operator, so every solver minimises

    0.5 ||y - A x||_W^2 + beta R(x) + mu ||x - x_tilde||^2

over HU images ``x``, optionally subject to ``x >= 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .denoisers import DenoiserRef, apply_denoiser
from .geometry import SystemMatrix
from .ultra import (Clustering, PatchConfig, TransformUnion, accumulate_patches, coding_cost,
                    extract_patches, sparse_code_and_cluster)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A solver diverged or broke down; ``trace`` holds the history so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class EpParams:
    delta: float = 20.0
    beta: float = 2.0 ** 15
    iters: int = 100
    mu: float = 0.0
    nonneg: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.beta < 0 or self.mu < 0 or self.iters < 1:
            raise ValueError("invalid PWLS-EP parameters")


@dataclass(frozen=True)
class UltraReconParams:
    union: TransformUnion = field(repr=False)
    gamma: float = 20.0
    beta: float = 5e3
    mu: float = 5e5
    outer: int = 5
    inner: int = 5
    nonneg: bool = True
    cg_tol: float = 1e-8

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0 or self.mu < 0:
            raise ValueError("gamma, beta and mu must be nonnegative")
        if self.outer < 1 or self.inner < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass(frozen=True)
class AdmmParams:
    rho0: float = 1e6
    gamma_k: float = 1.0
    beta: float = 25.0
    mu: float = 5e5
    iters: int = 20
    inner: int = 10
    denoiser: DenoiserRef = field(default_factory=DenoiserRef)
    nonneg: bool = True
    cg_tol: float = 1e-8

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if self.gamma_k < 1:
            raise ValueError("gamma_k must be >= 1")
        if self.beta < 0 or self.mu < 0 or self.iters < 1 or self.inner < 1:
            raise ValueError("invalid PnP-ADMM parameters")


# -- data term ---------------------------------------------------------------

def pwls_data_grad(A: SystemMatrix, w, y, x, hu=False):
    """Gradient ``A^T W (A x - y)`` of ``0.5 ||y - A x||_W^2``.

    ``x`` is attenuation (mm^-1) unless ``hu`` is set, in which case the
    HU-scaled operator is used.
    """
    M = A.hu_matrix if hu else A.matrix
    Mt = A.hu_matrix_t if hu else A.matrix.T
    x = np.asarray(x, dtype=np.float64)
    if x.shape != A.grid.shape:
        raise ValueError(f"image shape {x.shape} does not match grid {A.grid.shape}")
    w = np.asarray(w, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if w.size != M.shape[0] or y.size != M.shape[0]:
        raise ValueError("sinogram/weight size does not match the system matrix")
    return (Mt @ (w * (M @ x.ravel() - y))).reshape(x.shape)


def data_fidelity(A: SystemMatrix, w, y, x, hu=True):
    M = A.hu_matrix if hu else A.matrix
    r = np.asarray(y, dtype=np.float64).ravel() - M @ np.asarray(x, dtype=np.float64).ravel()
    return 0.5 * float(np.dot(np.asarray(w).ravel() * r, r))


class _Pwls:
    """Cached pieces of the HU-domain weighted least-squares term."""

    def __init__(self, A: SystemMatrix, w, y):
        self.A = A
        self.shape = A.grid.shape
        self.M, self.Mt = A.hu_matrix, A.hu_matrix_t
        self.w = np.asarray(w, dtype=np.float64).ravel()
        self.y = np.asarray(y, dtype=np.float64).ravel()
        if self.w.size != self.M.shape[0] or self.y.size != self.M.shape[0]:
            raise ValueError("sinogram/weight size does not match the system matrix")
        self.rhs = (self.Mt @ (self.w * self.y)).reshape(self.shape)

    def normal(self, x):
        return (self.Mt @ (self.w * (self.M @ x.ravel()))).reshape(self.shape)

    def diag(self):
        return (self.M.multiply(self.M).T @ self.w).reshape(self.shape)

    def column_curvature(self):
        """SQS majoriser ``A^T W A 1`` for the data term."""
        return (self.Mt @ (self.w * (self.M @ np.ones(self.M.shape[1])))).reshape(self.shape)

    def value(self, x):
        r = self.y - self.M @ x.ravel()
        return 0.5 * float(np.dot(self.w * r, r))


# -- conjugate gradient -------------------------------------------------------

def conjugate_gradient(apply_h, b, x0, precond=None, maxiter=10, tol=1e-8):
    """Jacobi-preconditioned CG for ``H x = b``; stops at ``maxiter`` or relative residual ``tol``.

    Returns the iterate and a trace of residual norms.
    """
    x = x0.copy()
    r = b - apply_h(x)
    bnorm = np.linalg.norm(b) or 1.0
    trace = [float(np.linalg.norm(r))]
    if trace[0] / bnorm <= tol:
        return x, trace
    z = r / precond if precond is not None else r
    p = z.copy()
    rz = np.vdot(r, z)
    for _ in range(maxiter):
        hp = apply_h(p)
        curv = np.vdot(p, hp)
        if not (curv > 0 and np.isfinite(curv)):
            raise SolverError("CG breakdown: non-positive curvature", trace)
        alpha = rz / curv
        x += alpha * p
        r -= alpha * hp
        trace.append(float(np.linalg.norm(r)))
        if not np.isfinite(trace[-1]):
            raise SolverError("CG produced non-finite residual", trace)
        if trace[-1] / bnorm <= tol:
            break
        z = r / precond if precond is not None else r
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, trace


def _project_nonneg(x_old, x_new, apply_h, b):
    """Clip to x >= 0, then line-search between ``x_old`` and the clipped point.

    ``x_old`` must be feasible; the exact minimiser of the quadratic on that
    segment never increases the quadratic, so monotonicity survives the clip.
    """
    clipped = np.maximum(x_new, 0.0)
    if np.array_equal(clipped, x_new):
        return x_new
    d = clipped - x_old
    hd = apply_h(d)
    dhd = np.vdot(d, hd)
    if dhd <= 0:
        return x_old
    t = -np.vdot(apply_h(x_old) - b, d) / dhd
    return x_old + min(max(t, 0.0), 1.0) * d


# -- PWLS-EP -------------------------------------------------------------------

# 8-neighbourhood as (row, col) offsets, each unordered pair listed once.
_NEIGHBOURS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _pairs(x, dr, dc):
    """Views (a, b) of x such that a - b are the differences x_j - x_k for one offset."""
    n_r, n_c = x.shape
    r0, r1 = max(dr, 0), n_r + min(dr, 0)
    c0, c1 = max(dc, 0), n_c + min(dc, 0)
    return (slice(r0, r1), slice(c0, c1)), (slice(r0 - dr, r1 - dr), slice(c0 - dc, c1 - dc))


def hyperbola(t, delta):
    """Edge-preserving potential ``delta^2 (sqrt(1 + (t/delta)^2) - 1)``."""
    return delta ** 2 * (np.sqrt(1.0 + (t / delta) ** 2) - 1.0)


def ep_penalty(x, delta):
    total = 0.0
    for dr, dc in _NEIGHBOURS:
        a, b = _pairs(x, dr, dc)
        total += hyperbola(x[a] - x[b], delta).sum()
    return float(total)


def ep_gradient_and_curvature(x, delta):
    """Gradient of the EP penalty and its separable quadratic majoriser curvature."""
    grad = np.zeros_like(x)
    curv = np.zeros_like(x)
    for dr, dc in _NEIGHBOURS:
        a, b = _pairs(x, dr, dc)
        t = x[a] - x[b]
        wt = 1.0 / np.sqrt(1.0 + (t / delta) ** 2)  # phi'(t) / t
        g = wt * t
        grad[a] += g
        grad[b] -= g
        curv[a] += 2 * wt
        curv[b] += 2 * wt
    return grad, curv


def pwls_ep_objective(A, w, y, x, p: EpParams, x_tilde=None):
    val = data_fidelity(A, w, y, x) + p.beta * ep_penalty(x, p.delta)
    if p.mu and x_tilde is not None:
        val += p.mu * float(np.sum((x - x_tilde) ** 2))
    return val


def pwls_ep_reconstruct(y, w, A: SystemMatrix, p: EpParams, x0, x_tilde=None, trace=None):
    """PWLS with the hyperbola edge-preserving penalty, solved by SQS.

    Each iteration minimises a separable quadratic majoriser, so the objective
    is monotone; the box constraint is applied exactly by clipping.
    """
    prob = _Pwls(A, w, y)
    x = np.array(x0, dtype=np.float64)
    if x.shape != A.grid.shape:
        raise ValueError(f"initial image shape {x.shape} does not match grid {A.grid.shape}")
    if p.nonneg:
        x = np.maximum(x, 0.0)
    anchor = np.zeros_like(x) if x_tilde is None else np.asarray(x_tilde, dtype=np.float64)
    mu = p.mu if x_tilde is not None else 0.0
    data_curv = prob.column_curvature()
    history = [] if trace is None else trace
    obj = pwls_ep_objective(A, w, y, x, p, anchor if mu else None)
    history.append(obj)
    rises = 0
    for _ in range(p.iters):
        g_reg, c_reg = ep_gradient_and_curvature(x, p.delta)
        grad = prob.normal(x) - prob.rhs + p.beta * g_reg + 2 * mu * (x - anchor)
        denom = data_curv + p.beta * c_reg + 2 * mu
        x = x - grad / np.maximum(denom, 1e-30)
        if p.nonneg:
            x = np.maximum(x, 0.0)
        new = pwls_ep_objective(A, w, y, x, p, anchor if mu else None)
        history.append(new)
        rises = rises + 1 if new > obj + 1e-9 * abs(obj) else 0
        if rises >= 3 or not np.isfinite(new):
            raise SolverError("PWLS-EP diverged", history)
        obj = new
    return x


# -- PWLS-ULTRA ----------------------------------------------------------------

def ultra_penalty(x, union: TransformUnion, gamma):
    """``sum_j min_k ||Omega_k P_j x - HT(.)||^2 + gamma^2 ||HT(.)||_0``."""
    X = extract_patches(x, union.patch)
    best = np.full(X.shape[1], np.inf)
    for omega in union.transforms:
        best = np.minimum(best, coding_cost(omega @ X, gamma))
    return float(best.sum())


def pwls_ultra_objective(A, w, y, x, p: UltraReconParams, x_tilde):
    val = data_fidelity(A, w, y, x) + p.beta * ultra_penalty(x, p.union, p.gamma)
    return val + p.mu * float(np.sum((x - x_tilde) ** 2))


class _UltraQuadratic:
    """Image-update quadratic for fixed clusters and codes."""

    def __init__(self, prob: _Pwls, union: TransformUnion, clustering: Clustering, beta, mu,
                 x_tilde, cfg: PatchConfig):
        self.prob, self.beta, self.mu, self.cfg = prob, beta, mu, cfg
        self.labels = clustering.labels
        self.grams = [om.T @ om for om in union.transforms]
        shape = prob.shape
        back = np.empty_like(clustering.codes)
        gdiag = np.empty_like(clustering.codes)
        for k, om in enumerate(union.transforms):
            idx = self.labels == k
            back[:, idx] = om.T @ clustering.codes[:, idx]
            gdiag[:, idx] = np.diag(self.grams[k])[:, None]
        self.b = prob.rhs + 2 * beta * accumulate_patches(back, shape, cfg) + 2 * mu * x_tilde
        self.diag = prob.diag() + 2 * beta * accumulate_patches(gdiag, shape, cfg) + 2 * mu
        self.diag = np.maximum(self.diag, 1e-30)

    def apply(self, v):
        V = extract_patches(v, self.cfg)
        out = np.empty_like(V)
        for k, g in enumerate(self.grams):
            idx = self.labels == k
            out[:, idx] = g @ V[:, idx]
        reg = accumulate_patches(out, self.prob.shape, self.cfg)
        return self.prob.normal(v) + 2 * self.beta * reg + 2 * self.mu * v


def pwls_ultra_reconstruct(y, w, A: SystemMatrix, p: UltraReconParams, x_tilde, x0, trace=None):
    """Alternate patch coding/clustering with CG image updates.

    ``trace`` (a list) receives the full objective after every outer iteration,
    starting with the value at ``x0``.
    """
    prob = _Pwls(A, w, y)
    x = np.array(x0, dtype=np.float64)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if x.shape != A.grid.shape or x_tilde.shape != A.grid.shape:
        raise ValueError("x0 / x_tilde do not match the grid")
    if p.nonneg:
        x = np.maximum(x, 0.0)
    history = [] if trace is None else trace
    history.append(pwls_ultra_objective(A, w, y, x, p, x_tilde))
    for it in range(p.outer):
        clustering = sparse_code_and_cluster(extract_patches(x, p.union.patch), p.union, p.gamma)
        quad = _UltraQuadratic(prob, p.union, clustering, p.beta, p.mu, x_tilde, p.union.patch)
        try:
            x_new, _ = conjugate_gradient(quad.apply, quad.b, x, quad.diag, p.inner, p.cg_tol)
        except SolverError as err:
            raise SolverError(f"PWLS-ULTRA outer iteration {it}: {err}", history) from err
        if p.nonneg:
            x_new = _project_nonneg(x, x_new, quad.apply, quad.b)
        x = x_new
        history.append(pwls_ultra_objective(A, w, y, x, p, x_tilde))
        log.debug("pwls-ultra outer %d objective %.8e", it, history[-1])
    return x


# -- PnP-ADMM ------------------------------------------------------------------

def pnp_admm_reconstruct(y, w, A: SystemMatrix, p: AdmmParams, x_tilde, x0, trace=None):
    """Plug-and-play ADMM with a momentum anchor at ``x_tilde``.

    ``trace`` (a dict) receives per-iteration ``residual`` (||x - v|| / sqrt(N)),
    ``sigma`` and ``rho``.
    """
    prob = _Pwls(A, w, y)
    x = np.array(x0, dtype=np.float64)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if x.shape != A.grid.shape or x_tilde.shape != A.grid.shape:
        raise ValueError("x0 / x_tilde do not match the grid")
    v = x.copy()
    u = np.zeros_like(x)
    rho = p.rho0
    data_diag = prob.diag()
    info = {"residual": [], "sigma": [], "rho": []} if trace is None else trace
    info.setdefault("residual", [])
    info.setdefault("sigma", [])
    info.setdefault("rho", [])
    for k in range(p.iters):
        def apply_h(z, rho=rho):
            return prob.normal(z) + (2 * p.mu + rho) * z

        b = prob.rhs + 2 * p.mu * x_tilde + rho * (v - u)
        try:
            x, _ = conjugate_gradient(apply_h, b, x, data_diag + 2 * p.mu + rho, p.inner, p.cg_tol)
        except SolverError as err:
            raise SolverError(f"PnP-ADMM iteration {k}: {err}", info["residual"]) from err
        if p.nonneg:
            x = np.maximum(x, 0.0)
        sigma = np.sqrt(p.beta / rho)
        v = apply_denoiser(p.denoiser, x + u, sigma)
        u = u + (x - v)
        info["residual"].append(float(np.linalg.norm(x - v) / np.sqrt(x.size)))
        info["sigma"].append(float(sigma))
        info["rho"].append(float(rho))
        rho *= p.gamma_k
    return x
