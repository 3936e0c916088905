"""Self-describing artifact files.

Every array is stored as a raw little-endian payload (row-major) next to a
JSON sidecar holding dims, dtype, units, geometry hash, creator version and
the payload's sha256.  Images and sinograms use ``f32le``; model parameters
use ``f64le`` so checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .denoisers import DenoiserRef
from .geometry import FanBeamGeometry, ImageGrid, geometry_hash
from .mbir import AdmmParams, UltraReconParams
from .neural import ConvNetParams
from .sim import SPLITS, Dataset, NoiseModel, Slice
from .ultra import PatchConfig, TransformUnion

DTYPES = {"f32le": "<f4", "f64le": "<f8"}


class ArtifactError(ValueError):
    """Corrupt, inconsistent or unreadable artifact."""


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_raster(path, array, units="offset-HU", geometry_hash=None, dtype="f32le", extra=None):
    path = Path(path)
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    payload = np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes(order="C")
    meta = {
        "dims": list(np.shape(array)),
        "dtype": dtype,
        "units": units,
        "geometry_hash": geometry_hash,
        "creator_version": __version__,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        meta["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return meta


def read_raster(path, with_meta=False):
    """Load a raster, checking payload length and checksum against the sidecar."""
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise FileNotFoundError(f"raster {path} or its sidecar is missing")
    meta = json.loads(side.read_text())
    payload = path.read_bytes()
    dt = np.dtype(DTYPES[meta["dtype"]])
    n = int(np.prod(meta["dims"], dtype=np.int64))
    if len(payload) != n * dt.itemsize:
        raise ArtifactError(f"{path}: payload is {len(payload)} bytes, expected {n * dt.itemsize}")
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise ArtifactError(f"{path}: checksum mismatch")
    arr = np.frombuffer(payload, dtype=dt).reshape(meta["dims"]).astype(np.float64)
    return (arr, meta) if with_meta else arr


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return json.loads(path.read_text())


# -- geometry ---------------------------------------------------------------------

def scan_to_dict(grid: ImageGrid, geometry: FanBeamGeometry):
    return {"grid": dataclasses.asdict(grid), "geometry": dataclasses.asdict(geometry),
            "geometry_hash": geometry_hash(geometry, grid)}


def scan_from_dict(d):
    return ImageGrid(**d["grid"]), FanBeamGeometry(**d["geometry"])


# -- transform union ----------------------------------------------------------------

def save_union(directory, U: TransformUnion):
    directory = Path(directory)
    write_raster(directory / "transforms.raw", U.transforms, units="1", dtype="f64le")
    _write_json(directory / "union.json", {
        "lambda0": U.lambda0, "eta": U.eta, "patch": dataclasses.asdict(U.patch),
        "training_log": U.training_log,
    })


def load_union(directory) -> TransformUnion:
    directory = Path(directory)
    meta = _read_json(directory / "union.json")
    return TransformUnion(read_raster(directory / "transforms.raw"), meta["lambda0"], meta["eta"],
                          PatchConfig(**meta["patch"]), meta.get("training_log", []))


# -- network --------------------------------------------------------------------------

def save_network(directory, params: ConvNetParams, trace=None):
    directory = Path(directory)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        write_raster(directory / f"w{k}.raw", w, units="1", dtype="f64le")
        write_raster(directory / f"b{k}.raw", b, units="1", dtype="f64le")
    _write_json(directory / "network.json", {
        "architecture": params.architecture, "init_seed": params.init_seed,
        "scale": params.scale, "layers": len(params.weights),
    })
    if trace is not None:
        _write_json(directory / "log.json", trace)


def load_network(directory) -> ConvNetParams:
    directory = Path(directory)
    meta = _read_json(directory / "network.json")
    n = meta["layers"]
    weights = [read_raster(directory / f"w{k}.raw") for k in range(n)]
    biases = [read_raster(directory / f"b{k}.raw") for k in range(n)]
    return ConvNetParams(weights, biases, meta["architecture"], meta["init_seed"], meta["scale"])


# -- unsupervised solver parameters ---------------------------------------------------

def unsup_params_to_dict(params):
    d = {f.name: getattr(params, f.name) for f in dataclasses.fields(params) if f.name != "union"}
    if isinstance(params, AdmmParams):
        d["denoiser"] = dataclasses.asdict(params.denoiser)
    return d


def unsup_params_from_dict(kind, d, union=None):
    if kind == "ultra":
        if union is None:
            raise ArtifactError("PWLS-ULTRA parameters need a transform union")
        return UltraReconParams(union=union, **d)
    d = dict(d)
    d["denoiser"] = DenoiserRef(**d["denoiser"])
    return AdmmParams(**d)


# -- pipelines --------------------------------------------------------------------

def save_pipeline(directory, pipe):
    """One subdirectory per block (network, lambda, log) plus a top-level pipeline.json."""
    from .pipeline import SuperPipeline

    assert isinstance(pipe, SuperPipeline)
    directory = Path(directory)
    kind = pipe.blocks[0].unsup_kind if pipe.blocks else None
    params = pipe.blocks[0].unsup_params if pipe.blocks else None
    if isinstance(params, UltraReconParams):
        save_union(directory / "union", params.union)
    for l, (block, entry) in enumerate(zip(pipe.blocks, pipe.training_log), start=1):
        sub = directory / f"block_{l:02d}"
        save_network(sub / "network", block.theta)
        _write_json(sub / "lambda.json", {"lambda": block.lam})
        _write_json(sub / "log.json", entry)
    _write_json(directory / "pipeline.json", {
        "type": "super",
        "variant": pipe.variant,
        "n_blocks": len(pipe.blocks),
        "lambda_lb": pipe.lambda_lb,
        "lambda_ub": pipe.lambda_ub,
        "geometry_hash": pipe.geometry_hash,
        "unsup_kind": kind,
        "unsup_params": unsup_params_to_dict(params) if params is not None else None,
        "creator_version": __version__,
    })


def load_pipeline(directory):
    from .pipeline import SuperBlock, SuperPipeline

    directory = Path(directory)
    meta = _read_json(directory / "pipeline.json")
    if meta.get("type") != "super":
        raise ArtifactError(f"{directory} is not a SUPER pipeline")
    kind = meta["unsup_kind"]
    union = load_union(directory / "union") if kind == "ultra" else None
    params = unsup_params_from_dict(kind, meta["unsup_params"], union) if kind else None
    blocks, logs = [], []
    for l in range(1, meta["n_blocks"] + 1):
        sub = directory / f"block_{l:02d}"
        theta = load_network(sub / "network")
        lam = _read_json(sub / "lambda.json")["lambda"]
        logs.append(_read_json(sub / "log.json"))
        blocks.append(SuperBlock(theta, lam, kind, params))
    return SuperPipeline(blocks, meta["lambda_lb"], meta["lambda_ub"], meta["variant"],
                         meta["geometry_hash"], logs)


def save_boosting(directory, model):
    directory = Path(directory)
    for n, theta in enumerate(model.stages, start=1):
        save_network(directory / f"stage_{n:02d}", theta)
    _write_json(directory / "pipeline.json", {
        "type": "boosting", "n_stages": len(model.stages),
        "training_log": getattr(model, "training_log", []),
        "creator_version": __version__,
    })


def load_boosting(directory):
    from .pipeline import BoostingModel

    directory = Path(directory)
    meta = _read_json(directory / "pipeline.json")
    if meta.get("type") != "boosting":
        raise ArtifactError(f"{directory} is not a boosting model")
    model = BoostingModel([load_network(directory / f"stage_{n:02d}")
                           for n in range(1, meta["n_stages"] + 1)])
    model.training_log = meta.get("training_log", [])
    return model


# -- datasets -----------------------------------------------------------------------

SLICE_FIELDS = {"x_star": "offset-HU", "y": "line-integral", "w": "1", "fbp": "offset-HU",
                "init": "offset-HU"}


def save_dataset(directory, ds: Dataset):
    """Write every slice's rasters and a manifest with seeds and checksums."""
    directory = Path(directory)
    scan = scan_to_dict(ds.grid, ds.geometry)
    manifest = {
        "creator_version": __version__,
        "seed": ds.seed,
        "noise": dataclasses.asdict(ds.noise),
        **scan,
        "splits": {},
    }
    for split in SPLITS:
        entries = []
        for s in ds.splits.get(split, []):
            sub = directory / split / f"{s.index:04d}"
            sums = {}
            for name, units in SLICE_FIELDS.items():
                meta = write_raster(sub / f"{name}.raw", getattr(s, name), units=units,
                                    geometry_hash=scan["geometry_hash"])
                sums[name] = meta["sha256"]
            entries.append({"index": s.index, "phantom_seed": s.phantom_seed,
                            "noise_seed": s.noise_seed, "path": f"{split}/{s.index:04d}",
                            "sha256": sums})
        manifest["splits"][split] = entries
    _write_json(directory / "manifest.json", manifest)
    return manifest


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    man = _read_json(directory / "manifest.json")
    grid, geometry = scan_from_dict(man)
    splits = {}
    for split in SPLITS:
        slices = []
        for e in man["splits"].get(split, []):
            sub = directory / e["path"]
            arrays = {name: read_raster(sub / f"{name}.raw") for name in SLICE_FIELDS}
            slices.append(Slice(split, e["index"], e["phantom_seed"], e["noise_seed"], **arrays))
        splits[split] = slices
    return Dataset(grid, geometry, NoiseModel(**man["noise"]), man["seed"], splits)
