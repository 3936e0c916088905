"""Parallel SUPER, serial SUPER and deep-boosting pipelines.

A parallel SUPER block maps ``x_prev`` to

    lam * G(x_prev) + (1 - lam) * M(x_prev, y)

where ``G`` is the block's trained network and ``M`` an MBIR solver anchored
at ``x_prev``.  Blocks are trained one after another on the outputs of the
previous block.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .geometry import SystemMatrix
from .mbir import AdmmParams, UltraReconParams, pnp_admm_reconstruct, pwls_ultra_reconstruct
from .neural import ConvNetParams, TrainConfig, forward, train_supervised

log = logging.getLogger(__name__)

UNSUPERVISED = {"ultra": pwls_ultra_reconstruct, "pnp_admm": pnp_admm_reconstruct}


class PipelineError(RuntimeError):
    def __init__(self, block, step, cause):
        super().__init__(f"block {block}, step {step}: {cause}")
        self.block, self.step = block, step


@dataclass
class SuperBlock:
    theta: ConvNetParams
    lam: float | None
    unsup_kind: str
    unsup_params: UltraReconParams | AdmmParams = field(repr=False)


@dataclass
class SuperPipeline:
    blocks: list
    lambda_lb: float = 0.05
    lambda_ub: float = 0.95
    variant: str = "parallel"  # or "serial"
    geometry_hash: str | None = None
    training_log: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.lambda_lb <= self.lambda_ub <= 1:
            raise ValueError("need 0 <= lambda_lb <= lambda_ub <= 1")

    def __len__(self):
        return len(self.blocks)


@dataclass
class SuperConfig:
    unsup_kind: str
    unsup_params: UltraReconParams | AdmmParams = field(repr=False)
    train: TrainConfig = field(default_factory=TrainConfig)
    lambda_lb: float = 0.05
    lambda_ub: float = 0.95
    cache_dir: str | Path | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.unsup_kind not in UNSUPERVISED:
            raise ValueError(f"unknown unsupervised module {self.unsup_kind!r}")
        if not 0 <= self.lambda_lb <= self.lambda_ub <= 1:
            raise ValueError("need 0 <= lambda_lb <= lambda_ub <= 1")


@dataclass
class Sample:
    """One training/test item: sinogram, weights, initial image, optional reference."""

    y: np.ndarray
    w: np.ndarray
    x0: np.ndarray
    x_star: np.ndarray | None = None


def samples_from(slices):
    return [Sample(s.y, s.w, s.init, s.x_star) for s in slices]


# -- combination weight ------------------------------------------------------

def optimal_lambda(sup_outs, unsup_outs, refs):
    """Unconstrained minimiser of ``sum ||lam G + (1 - lam) M - x*||^2``, or None if undetermined."""
    if not (len(sup_outs) == len(unsup_outs) == len(refs)) or not sup_outs:
        raise ValueError("need equal-length, non-empty lists")
    num = den = 0.0
    for g, m, ref in zip(sup_outs, unsup_outs, refs):
        diff = np.asarray(m, dtype=np.float64) - g
        num += float(np.vdot(diff, np.asarray(m, dtype=np.float64) - ref))
        den += float(np.vdot(diff, diff))
    return None if den == 0 else num / den


def solve_lambda(sup_outs, unsup_outs, refs, lb=0.05, ub=0.95):
    """Optimal combination weight clipped to ``[lb, ub]``; midpoint when every pair coincides."""
    raw = optimal_lambda(sup_outs, unsup_outs, refs)
    if raw is None:
        return 0.5 * (lb + ub)
    return float(min(max(raw, lb), ub))


def combine(lam, sup, unsup):
    """``lam * sup + (1 - lam) * unsup``; pixels where both agree pass through unrounded."""
    sup = np.asarray(sup, dtype=np.float64)
    unsup = np.asarray(unsup, dtype=np.float64)
    return np.where(sup == unsup, sup, lam * sup + (1.0 - lam) * unsup)


def combined_loss(lam, sup_outs, unsup_outs, refs):
    return float(sum(np.sum((combine(lam, g, m) - r) ** 2)
                     for g, m, r in zip(sup_outs, unsup_outs, refs)))


# -- unsupervised module with an optional block cache ------------------------------

def run_unsupervised(kind, params, A: SystemMatrix, sample: Sample, anchor):
    return UNSUPERVISED[kind](sample.y, sample.w, A, params, anchor, anchor)


def _cache_key(kind, params, A, anchors):
    h = hashlib.sha256()
    h.update(kind.encode())
    h.update(A.hash().encode())
    if isinstance(params, UltraReconParams):
        h.update(repr(replace(params, union=None)).encode())
        h.update(params.union.transforms.tobytes())
    else:
        h.update(repr(params).encode())
    for a in anchors:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _run_all(kind, params, A, samples, anchors, jobs=1):
    if jobs <= 1:
        return [run_unsupervised(kind, params, A, s, a) for s, a in zip(samples, anchors)]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(lambda sa: run_unsupervised(kind, params, A, *sa), zip(samples, anchors)))


def _unsupervised_block(block, kind, params, A, samples, anchors, cache_dir, jobs=1):
    if cache_dir is None:
        return _run_all(kind, params, A, samples, anchors, jobs)
    path = Path(cache_dir) / f"block_{block:02d}" / "unsupervised.npz"
    key = _cache_key(kind, params, A, anchors)
    if path.exists():
        with np.load(path) as data:
            if str(data["key"]) == key:
                log.info("block %d: cache hit (%s)", block, path)
                return [data[f"x{n}"] for n in range(len(samples))]
        log.info("block %d: cache stale, recomputing", block)
    outs = _run_all(kind, params, A, samples, anchors, jobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, key=np.array(key), **{f"x{n}": x for n, x in enumerate(outs)})
    log.info("block %d: cache miss, stored %s", block, path)
    return outs


def _mean_rmse(images, refs):
    return float(np.mean([metrics.rmse_hu(x, r) for x, r in zip(images, refs)]))


# -- parallel SUPER -------------------------------------------------------------

def train_parallel_super(samples, A: SystemMatrix, n_blocks, cfg: SuperConfig) -> SuperPipeline:
    """Train ``n_blocks`` parallel SUPER blocks in order.

    Per block: (1) unsupervised reconstructions anchored at the current images,
    (2) a freshly initialised network trained on (current, reference) pairs,
    (3) the clipped optimal weight, (4) the combined images for the next block.
    """
    refs = [s.x_star for s in samples]
    current = [np.asarray(s.x0, dtype=np.float64) for s in samples]
    pipe = SuperPipeline([], cfg.lambda_lb, cfg.lambda_ub, "parallel", A.hash())
    for l in range(1, n_blocks + 1):
        try:
            unsup = _unsupervised_block(l, cfg.unsup_kind, cfg.unsup_params, A, samples, current,
                                        cfg.cache_dir, cfg.jobs)
        except Exception as err:
            raise PipelineError(l, "(1) unsupervised reconstruction", err) from err
        try:
            tcfg = replace(cfg.train, seed=cfg.train.seed + l - 1)
            theta, trace = train_supervised(list(zip(current, refs)), tcfg)
        except Exception as err:
            raise PipelineError(l, "(2) supervised training", err) from err
        try:
            sup = [forward(theta, x) for x in current]
            raw = optimal_lambda(sup, unsup, refs)
            lam = solve_lambda(sup, unsup, refs, cfg.lambda_lb, cfg.lambda_ub)
        except Exception as err:
            raise PipelineError(l, "(3) combination weight", err) from err
        nxt = [combine(lam, g, m) for g, m in zip(sup, unsup)]
        entry = {
            "block": l,
            "lambda": lam,
            "lambda_unclipped": raw,
            "rmse_input": _mean_rmse(current, refs),
            "rmse_supervised": _mean_rmse(sup, refs),
            "rmse_unsupervised": _mean_rmse(unsup, refs),
            "rmse_output": _mean_rmse(nxt, refs),
            "epoch_loss": trace["epoch_loss"],
        }
        pipe.training_log.append(entry)
        log.info("block %d: lambda=%.4f rmse in %.2f sup %.2f unsup %.2f out %.2f", l, lam,
                 entry["rmse_input"], entry["rmse_supervised"], entry["rmse_unsupervised"],
                 entry["rmse_output"])
        pipe.blocks.append(SuperBlock(theta, lam, cfg.unsup_kind, cfg.unsup_params))
        current = nxt
    pipe.final_train_outputs = current
    return pipe


def apply_parallel_super(pipe: SuperPipeline, A: SystemMatrix, y, w, x0):
    """Replay the trained blocks on one scan; returns (image, per-block trace)."""
    if pipe.geometry_hash is not None and pipe.geometry_hash != A.hash():
        raise ValueError("geometry mismatch between pipeline and system matrix")
    sample = Sample(y, w, x0)
    x = np.asarray(x0, dtype=np.float64)
    trace = []
    for block in pipe.blocks:
        if pipe.variant == "serial":
            g = forward(block.theta, x)
            x = run_unsupervised(block.unsup_kind, block.unsup_params, A, sample, g)
            trace.append({"supervised": g, "output": x})
            continue
        unsup = run_unsupervised(block.unsup_kind, block.unsup_params, A, sample, x)
        sup = forward(block.theta, x)
        x = combine(block.lam, sup, unsup)
        trace.append({"supervised": sup, "unsupervised": unsup, "output": x})
    return x, trace


# -- serial SUPER ---------------------------------------------------------------

def train_serial_super(samples, A: SystemMatrix, n_blocks, cfg: SuperConfig) -> SuperPipeline:
    """Alternate a trained network with an MBIR solve anchored at the network output."""
    refs = [s.x_star for s in samples]
    current = [np.asarray(s.x0, dtype=np.float64) for s in samples]
    pipe = SuperPipeline([], cfg.lambda_lb, cfg.lambda_ub, "serial", A.hash())
    for l in range(1, n_blocks + 1):
        try:
            tcfg = replace(cfg.train, seed=cfg.train.seed + l - 1)
            theta, trace = train_supervised(list(zip(current, refs)), tcfg)
            sup = [forward(theta, x) for x in current]
        except Exception as err:
            raise PipelineError(l, "supervised training", err) from err
        try:
            nxt = _run_all(cfg.unsup_kind, cfg.unsup_params, A, samples, sup, cfg.jobs)
        except Exception as err:
            raise PipelineError(l, "unsupervised reconstruction", err) from err
        pipe.training_log.append({
            "block": l,
            "rmse_input": _mean_rmse(current, refs),
            "rmse_supervised": _mean_rmse(sup, refs),
            "rmse_output": _mean_rmse(nxt, refs),
            "epoch_loss": trace["epoch_loss"],
        })
        pipe.blocks.append(SuperBlock(theta, None, cfg.unsup_kind, cfg.unsup_params))
        current = nxt
    pipe.final_train_outputs = current
    return pipe


# -- deep boosting ---------------------------------------------------------------

@dataclass
class BoostingModel:
    stages: list

    def __post_init__(self):
        if not self.stages:
            raise ValueError("boosting model needs at least one stage")


def train_boosting(pairs, n_stages, cfg: TrainConfig = TrainConfig()):
    """Stage 1 maps x0 to the reference; stage n > 1 maps ``x0 + x_{n-1}`` to it."""
    if n_stages < 1:
        raise ValueError("need at least one stage")
    x0s = [np.asarray(a, dtype=np.float64) for a, _ in pairs]
    refs = [b for _, b in pairs]
    stages, logs = [], []
    prev = None
    for n in range(n_stages):
        inputs = x0s if prev is None else [a + p for a, p in zip(x0s, prev)]
        theta, trace = train_supervised(list(zip(inputs, refs)), replace(cfg, seed=cfg.seed + n))
        prev = [forward(theta, x) for x in inputs]
        stages.append(theta)
        logs.append({"stage": n + 1, "rmse_output": _mean_rmse(prev, refs),
                     "epoch_loss": trace["epoch_loss"]})
    model = BoostingModel(stages)
    model.training_log = logs
    return model


def apply_boosting(model: BoostingModel, x0, return_trace=False):
    x0 = np.asarray(x0, dtype=np.float64)
    x = forward(model.stages[0], x0)
    trace = [x]
    for theta in model.stages[1:]:
        x = forward(theta, x0 + x)
        trace.append(x)
    return (x, trace) if return_trace else x
