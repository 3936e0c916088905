"""``superct`` command-line driver.

Subcommands: simulate, train, reconstruct, evaluate.  Each reads an optional
JSON run config, applies ``--set dotted.key=value`` overrides, and validates
the result (unknown keys are rejected).

Exit codes: 0 success, 2 output conflict, 3 missing input, 4 geometry
mismatch, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from . import __version__, io, metrics, plotting, presets
from .denoisers import DenoiserRef
from .geometry import FanBeamGeometry, ImageGrid, build_system_matrix, fbp, geometry_hash
from .mbir import AdmmParams, EpParams, pnp_admm_reconstruct, pwls_ep_reconstruct, pwls_ultra_reconstruct
from .neural import forward, train_supervised
from .pipeline import (SuperConfig, apply_boosting, apply_parallel_super, samples_from,
                       train_boosting, train_parallel_super, train_serial_super)
from .sim import NoiseModel, make_dataset
from .ultra import PatchConfig, train_ultra

log = logging.getLogger("superct")

METHODS = ("pwls-ep", "pwls-ultra", "pnp-admm", "fbp", "supervised", "parallel-super",
           "serial-super", "boosting")
TRAIN_KINDS = ("ultra", "supervised", "parallel-super", "serial-super", "boosting")
METRIC_COLUMNS = ("slice_id", "method", "rmse_hu", "snr_db", "ssim")
MASKED_COLUMNS = ("slice_id", "method", "rmse_hu_masked")
SUMMARY_METRICS = ("rmse_hu", "rmse_hu_masked", "snr_db", "ssim")
CACHE_ENV = "SUPER_CT_CACHE"


class CliError(Exception):
    code = 1


class OutputConflict(CliError):
    code = 2


class MissingInput(CliError):
    code = 3


class GeometryMismatch(CliError):
    code = 4


# -- configuration ------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(_Section):
    n_rows: int = 64
    n_cols: int = 64
    pixel_size_mm: Optional[float] = None  # desk: 256 mm field of view


class GeometrySection(_Section):
    n_detectors: int = 128
    n_views: int = 120
    det_spacing_mm: Optional[float] = None  # desk: detector covers the grid diagonal
    src_to_det_mm: float = 1085.6
    src_to_iso_mm: float = 595.0
    mode: Literal["parallel", "fan_flat"] = "parallel"


class NoiseSection(_Section):
    I0: float = 1e4
    sigma2: float = 25.0
    epsilon: float = 0.1
    deterministic_mode: bool = False


class DatasetSection(_Section):
    n_train: int = 12
    n_val: int = 0
    n_test: int = 4


class EpSection(_Section):
    delta: float = 20.0
    beta: Optional[float] = None
    iters: int = 100


class UltraTrainSection(_Section):
    K: int = 5
    iterations: int = 20
    patch_side: int = 8
    stride: int = 1
    lambda0: float = 0.0031
    eta: float = 20.0


class UltraSection(_Section):
    gamma: float = 20.0
    beta: Optional[float] = None
    mu: Optional[float] = None
    outer: int = 5
    inner: int = 5


class AdmmSection(_Section):
    rho0: Optional[float] = None
    gamma_k: float = 1.0
    beta: Optional[float] = None
    mu: Optional[float] = None
    iters: int = 20
    inner: int = 10
    denoiser: Literal["gaussian_blur", "nonlocal_means", "external", "identity"] = "nonlocal_means"
    strength: Optional[float] = None
    command: Optional[str] = None


class TrainSection(_Section):
    epochs: Optional[int] = None
    lr_start: Optional[float] = None
    lr_end: Optional[float] = None
    batch_size: int = 1
    momentum: float = 0.99
    alpha: float = 10.0


class SuperSection(_Section):
    n_blocks: int = 3
    unsup: Literal["ultra", "pnp_admm"] = "ultra"
    lambda_lb: float = 0.05
    lambda_ub: float = 0.95


class BoostingSection(_Section):
    n_stages: int = 3


class RunConfig(_Section):
    """Everything a run needs; ``None`` hyperparameters take the preset's value."""

    preset: Literal["desk", "clinical"] = "desk"
    seed: int = 0
    method: Optional[Literal[METHODS]] = None
    grid: GridSection = GridSection()
    geometry: GeometrySection = GeometrySection()
    noise: NoiseSection = NoiseSection()
    dataset: DatasetSection = DatasetSection()
    ep: EpSection = EpSection()
    ultra_train: UltraTrainSection = UltraTrainSection()
    ultra: UltraSection = UltraSection()
    admm: AdmmSection = AdmmSection()
    train: TrainSection = TrainSection()
    super: SuperSection = SuperSection()
    boosting: BoostingSection = BoostingSection()


def parse_override(text):
    """``a.b.c=value`` -> (["a", "b", "c"], value); value is JSON if it parses, else a string."""
    if "=" not in text:
        raise CliError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"config file {path} not found")
        data = json.loads(path.read_text())
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise CliError(f"override {text!r} descends into a non-section")
        node[keys[-1]] = value
    if seed is not None:
        data["seed"] = seed
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise CliError(f"invalid configuration:\n{err}") from err


# -- config -> library objects -------------------------------------------------------

def scan_of(cfg: RunConfig):
    g = cfg.grid
    if cfg.preset == "desk":
        size = g.pixel_size_mm or presets.DESK_FOV_MM / max(g.n_rows, g.n_cols)
    else:
        size = g.pixel_size_mm or 0.69
    grid = ImageGrid(g.n_rows, g.n_cols, size)
    geo = cfg.geometry
    spacing = geo.det_spacing_mm
    if spacing is None:
        spacing = 1.02 * np.hypot(grid.n_rows, grid.n_cols) * grid.pixel_size_mm / geo.n_detectors
    geometry = FanBeamGeometry(geo.n_detectors, geo.n_views, spacing, geo.src_to_det_mm,
                               geo.src_to_iso_mm, geo.mode)
    return grid, geometry


def noise_of(cfg: RunConfig) -> NoiseModel:
    return NoiseModel(**cfg.noise.model_dump(), seed=cfg.seed)


def _given(section, *names):
    return {n: getattr(section, n) for n in names if getattr(section, n) is not None}


def ep_of(cfg: RunConfig) -> EpParams:
    base = presets.desk_ep(cfg.ep.iters) if cfg.preset == "desk" else presets.CLINICAL_EP
    return dataclasses.replace(base, delta=cfg.ep.delta, iters=cfg.ep.iters, **_given(cfg.ep, "beta"))


def ultra_of(cfg: RunConfig, union):
    kw = dict(gamma=cfg.ultra.gamma, outer=cfg.ultra.outer, inner=cfg.ultra.inner,
              **_given(cfg.ultra, "beta", "mu"))
    if cfg.preset == "desk":
        return presets.desk_ultra(union, **kw)
    from .mbir import UltraReconParams
    return UltraReconParams(union=union, **{**presets.CLINICAL_ULTRA, **kw})


def admm_of(cfg: RunConfig) -> AdmmParams:
    a = cfg.admm
    base = presets.desk_admm() if cfg.preset == "desk" else AdmmParams(**presets.CLINICAL_ADMM)
    strength = a.strength if a.strength is not None else (
        base.denoiser.strength if a.denoiser == base.denoiser.kind else 1.0)
    return dataclasses.replace(base, gamma_k=a.gamma_k, iters=a.iters, inner=a.inner,
                               denoiser=DenoiserRef(a.denoiser, strength, a.command),
                               **_given(a, "rho0", "beta", "mu"))


def train_of(cfg: RunConfig, seed_offset=0):
    t = cfg.train
    kw = dict(batch_size=t.batch_size, momentum=t.momentum, alpha=t.alpha, seed=cfg.seed + seed_offset,
              **_given(t, "epochs", "lr_start", "lr_end"))
    if cfg.preset == "desk":
        return presets.desk_train(**kw)
    return dataclasses.replace(presets.CLINICAL_TRAIN, **kw)


# -- helpers --------------------------------------------------------------------------

def prepare_output(path, force):
    """Create ``path``; an existing non-empty directory is a conflict unless ``force``."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputConflict(f"output {path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def require_dir(path, what):
    path = Path(path) if path is not None else None
    if path is None or not path.is_dir():
        raise MissingInput(f"{what} directory {path} not found")
    return path


def load_dataset_dir(path):
    path = require_dir(path, "dataset")
    if not (path / "manifest.json").exists():
        raise MissingInput(f"{path} has no manifest.json")
    return io.load_dataset(path)


def system_for(ds):
    return build_system_matrix(ds.geometry, ds.grid)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=io._jsonable))


def cache_root(dataset_dir):
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(dataset_dir) / "cache"


def _check_hash(expected, actual, what):
    if expected is not None and actual is not None and expected != actual:
        raise GeometryMismatch(f"{what}: geometry hash {expected} does not match data ({actual})")


# -- simulate -------------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig):
    out = prepare_output(args.out, args.force)
    grid, geometry = scan_of(cfg)
    A = build_system_matrix(geometry, grid)
    d = cfg.dataset
    ds = make_dataset(d.n_train, d.n_val, d.n_test, grid, geometry, noise_of(cfg), cfg.seed, A=A,
                      init_params=ep_of(cfg))
    io.save_dataset(out, ds)
    write_json(out / "run_config.json", cfg.model_dump())
    log.info("dataset written to %s", out)
    return 0


# -- train ----------------------------------------------------------------------------

def _train_union(cfg, ds):
    t = cfg.ultra_train
    images = [s.x_star for s in ds["train"]]
    if not images:
        raise MissingInput("dataset has no training slices")
    return train_ultra(images, K=t.K, iterations=t.iterations,
                       cfg=PatchConfig(t.patch_side, t.stride), lambda0=t.lambda0, eta=t.eta,
                       seed=cfg.seed)


def _unsup_for(cfg, ds, union_dir):
    if cfg.super.unsup == "pnp_admm":
        return admm_of(cfg)
    union = io.load_union(require_dir(union_dir, "transform union")) if union_dir else _train_union(cfg, ds)
    return ultra_of(cfg, union)


def cmd_train(args, cfg: RunConfig):
    ds = load_dataset_dir(args.dataset)
    if not ds["train"]:
        raise MissingInput("dataset has no training slices")
    out = prepare_output(args.out, args.force)
    kind = args.kind
    pairs = [(s.init, s.x_star) for s in ds["train"]]
    ghash = geometry_hash(ds.geometry, ds.grid)
    if kind == "ultra":
        U = _train_union(cfg, ds)
        io.save_union(out, U)
        write_json(out / "training_log.json", {"objective": U.training_log})
    elif kind == "supervised":
        theta, trace = train_supervised(pairs, train_of(cfg))
        io.save_network(out, theta, trace)
        write_json(out / "training_log.json", trace)
        write_json(out / "model.json", {"type": "supervised", "geometry_hash": ghash})
    elif kind == "boosting":
        model = train_boosting(pairs, cfg.boosting.n_stages, train_of(cfg))
        io.save_boosting(out, model)
        write_json(out / "training_log.json", model.training_log)
    else:
        A = system_for(ds)
        variant = kind.split("-")[0]
        cache = cache_root(args.dataset) / f"{variant}-{cfg.super.unsup}" if variant == "parallel" else None
        scfg = SuperConfig(cfg.super.unsup, _unsup_for(cfg, ds, args.union), train_of(cfg),
                           cfg.super.lambda_lb, cfg.super.lambda_ub, cache, args.jobs)
        trainer = train_parallel_super if variant == "parallel" else train_serial_super
        pipe = trainer(samples_from(ds["train"]), A, cfg.super.n_blocks, scfg)
        io.save_pipeline(out, pipe)
        write_json(out / "training_log.json", pipe.training_log)
    write_json(out / "run_config.json", cfg.model_dump())
    log.info("%s model written to %s", kind, out)
    return 0


# -- reconstruct ---------------------------------------------------------------------

def _model_hash(model_dir):
    for name in ("pipeline.json", "model.json"):
        p = Path(model_dir) / name
        if p.exists():
            return json.loads(p.read_text()).get("geometry_hash")
    return None


def _reconstructor(method, cfg, ds, A, model_dir):
    """Return ``f(slice) -> (image, block_trace or None)``."""
    if method == "fbp":
        return lambda s: (fbp(ds.geometry, ds.grid, s.y), None)
    if method == "pwls-ep":
        ep = ep_of(cfg)
        return lambda s: (pwls_ep_reconstruct(s.y, s.w, A, ep, np.maximum(fbp(ds.geometry, ds.grid, s.y), 0)),
                          None)
    if method == "pnp-admm":
        p = admm_of(cfg)
        return lambda s: (pnp_admm_reconstruct(s.y, s.w, A, p, s.init, s.init), None)
    model_dir = require_dir(model_dir, "model")
    if method == "pwls-ultra":
        p = ultra_of(cfg, io.load_union(model_dir))
        return lambda s: (pwls_ultra_reconstruct(s.y, s.w, A, p, s.init, s.init), None)
    _check_hash(_model_hash(model_dir), A.hash(), f"model {model_dir}")
    if method == "supervised":
        theta = io.load_network(model_dir)
        return lambda s: (forward(theta, s.init), None)
    if method == "boosting":
        model = io.load_boosting(model_dir)
        return lambda s: (apply_boosting(model, s.init), None)
    pipe = io.load_pipeline(model_dir)
    if pipe.variant != method.split("-")[0]:
        raise CliError(f"model {model_dir} is a {pipe.variant} pipeline, not {method}")

    def run(s):
        x, trace = apply_parallel_super(pipe, A, s.y, s.w, s.init)
        return x, [(b + 1, pipe.blocks[b].lam, t["output"]) for b, t in enumerate(trace)]
    return run


def _append_csv(path, columns, rows):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def masked_row(slice_id, method, x, x_star):
    """RMSE over the body (reference above air); NaN when the reference is all air."""
    body = np.asarray(x_star) > 0
    value = metrics.rmse_hu(x, x_star, body) if body.any() else float("nan")
    return {"slice_id": slice_id, "method": method, "rmse_hu_masked": repr(value)}


def metric_row(slice_id, method, x, x_star):
    rep = metrics.report(x, x_star)
    return {"slice_id": slice_id, "method": method, "rmse_hu": repr(rep["rmse_hu"]),
            "snr_db": repr(rep["snr_db"]), "ssim": repr(rep["ssim"])}


def cmd_reconstruct(args, cfg: RunConfig):
    method = args.method or cfg.method
    if method is None:
        raise CliError("no method given (positional argument or config 'method')")
    ds = load_dataset_dir(args.dataset)
    slices = ds[args.split]
    if args.slice is not None:
        slices = [s for s in slices if s.index == args.slice]
    if not slices:
        raise MissingInput(f"no slices in split {args.split!r}")
    A = system_for(ds)
    data_hash = json.loads((Path(args.dataset) / "manifest.json").read_text())["geometry_hash"]
    _check_hash(data_hash, A.hash(), "dataset")
    run = _reconstructor(method, cfg, ds, A, args.model)

    out = Path(args.out)
    img_dir = out / method
    if img_dir.exists() and any(img_dir.iterdir()):
        if not args.force:
            raise OutputConflict(f"{img_dir} exists (use --force)")
        shutil.rmtree(img_dir)
    img_dir.mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max(1, args.jobs)) as pool:
        results = list(pool.map(run, slices))
    rows, masked, block_rows = [], [], []
    for s, (x, trace) in zip(slices, results):
        sid = f"{args.split}_{s.index:04d}"
        x = x.astype(np.float32).astype(np.float64)  # metrics describe the stored raster
        io.write_raster(img_dir / f"{sid}.raw", x, geometry_hash=A.hash(), extra={"method": method})
        if args.png:
            plotting.save_png(img_dir / f"{sid}.png", x)
        rows.append(metric_row(sid, method, x, s.x_star))
        masked.append(masked_row(sid, method, x, s.x_star))
        for block, lam, xb in trace or []:
            block_rows.append({"run": method, "slice_id": sid, "block": block,
                               "lambda": "" if lam is None else repr(lam),
                               "rmse_output": repr(metrics.rmse_hu(xb, s.x_star))})
    _append_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    _append_csv(out / "metrics_masked.csv", MASKED_COLUMNS, masked)
    if block_rows:
        _append_csv(out / "blocks.csv", ("run", "slice_id", "block", "lambda", "rmse_output"), block_rows)
    run_file = out / "run.json"
    info = json.loads(run_file.read_text()) if run_file.exists() else {}
    _check_hash(info.get("geometry_hash"), A.hash(), f"results {out}")
    info.update({"geometry_hash": A.hash(), "grid": list(ds.grid.shape), "creator_version": __version__})
    write_json(run_file, info)
    for r in rows:
        log.info("%s %s rmse %s HU", r["slice_id"], method, r["rmse_hu"])
    return 0


# -- evaluate --------------------------------------------------------------------------

SUMMARY_STATS = ("n", "mean", "median", "q1", "q3", "min", "max")


def summarize(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": len(v), "mean": float(v.mean()), "median": float(med), "q1": float(q1),
            "q3": float(q3), "min": float(v[0]), "max": float(v[-1])}


def summary_table(rows):
    """Per (method, metric) statistics; rows are metrics-CSV dicts."""
    table = []
    for method in sorted({r["method"] for r in rows}):
        mine = [r for r in rows if r["method"] == method]
        for metric in SUMMARY_METRICS:
            vals = [float(r[metric]) for r in mine if metric in r]
            vals = [v for v in vals if not np.isnan(v)]  # all-air slices have no masked RMSE
            if not vals:
                continue
            table.append({"method": method, "metric": metric, **summarize(vals)})
    return table


def block_table(block_rows):
    acc = {}
    for r in block_rows:
        key = (r["run"], int(r["block"]))
        acc.setdefault(key, {"rmse": [], "lambda": r.get("lambda", "")})["rmse"].append(float(r["rmse_output"]))
    return [{"run": run, "block": block, "lambda": v["lambda"], "rmse_output": float(np.mean(v["rmse"]))}
            for (run, block), v in sorted(acc.items())]


def _read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_evaluate(args, cfg: RunConfig):
    rows, block_rows, hashes = [], [], set()
    for d in args.results:
        d = require_dir(d, "results")
        if not (d / "metrics.csv").exists():
            raise MissingInput(f"{d} has no metrics.csv")
        mine = _read_csv(d / "metrics.csv")
        if (d / "metrics_masked.csv").exists():
            extra = {(r["slice_id"], r["method"]): r["rmse_hu_masked"]
                     for r in _read_csv(d / "metrics_masked.csv")}
            for r in mine:
                if (r["slice_id"], r["method"]) in extra:
                    r["rmse_hu_masked"] = extra[(r["slice_id"], r["method"])]
        rows += mine
        if (d / "blocks.csv").exists():
            block_rows += _read_csv(d / "blocks.csv")
        if (d / "run.json").exists():
            hashes.add(json.loads((d / "run.json").read_text()).get("geometry_hash"))
    hashes.discard(None)
    if len(hashes) > 1:
        raise GeometryMismatch(f"results come from different grids/geometries: {sorted(hashes)}")
    if not rows:
        raise MissingInput("no result rows")
    out = prepare_output(args.out, args.force)
    table = summary_table(rows)
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("method", "metric") + SUMMARY_STATS)
        writer.writeheader()
        writer.writerows(table)
    blocks = block_table(block_rows)
    with (out / "rmse_evolution.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("run", "block", "lambda", "rmse_output"))
        writer.writeheader()
        writer.writerows(blocks)
    for metric in SUMMARY_METRICS:
        if not any(metric in r for r in rows):
            continue
        plotting.metric_boxplot(rows, metric, out / f"box_{metric}.png")
    if blocks:
        plotting.rmse_evolution(blocks, out / "rmse_evolution.png")
        plotting.lambda_per_block(blocks, out / "lambda_per_block.png")
    log.info("summary written to %s", out)
    return 0


# -- entry point -----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. ultra.outer=3 (repeatable)")
    common.add_argument("--seed", type=int, help="overrides config seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers within a command")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="superct", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="build a synthetic dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("kind", choices=TRAIN_KINDS)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--union", help="pre-trained transform union for SUPER with ULTRA")

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct dataset slices")
    p.add_argument("method", nargs="?", choices=METHODS)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--slice", type=int, help="only this slice index")
    p.add_argument("--model", help="model directory (pwls-ultra and learned methods)")
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write windowed PNGs")

    p = sub.add_parser("evaluate", parents=[common], help="summarise result directories")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        cfg = load_config(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](args, cfg)
    except CliError as err:
        log.error("%s", err)
        return err.code
    except FileNotFoundError as err:
        log.error("missing input: %s", err)
        return MissingInput.code
    except Exception as err:  # noqa: BLE001 - top-level report
        log.error("%s: %s", type(err).__name__, err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
