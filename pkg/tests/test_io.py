import json

import numpy as np
import pytest

from superct import io
from superct.denoisers import DenoiserRef
from superct.geometry import build_system_matrix
from superct.mbir import AdmmParams
from superct.neural import ConvNetParams
from superct.pipeline import BoostingModel, SuperBlock, SuperPipeline
from superct.presets import desk_ep, desk_scan, desk_ultra
from superct.sim import NoiseModel, make_dataset
from superct.ultra import PatchConfig, TransformUnion, initial_transforms


def test_raster_round_trip(tmp_path, rng):
    x = rng.normal(1000, 300, (7, 5)).astype(np.float32)
    meta = io.write_raster(tmp_path / "a.raw", x, geometry_hash="abc")
    assert (tmp_path / "a.raw").stat().st_size == 7 * 5 * 4
    back, side = io.read_raster(tmp_path / "a.raw", with_meta=True)
    np.testing.assert_array_equal(back, x)
    assert side == meta
    assert side["dims"] == [7, 5] and side["dtype"] == "f32le" and side["units"] == "offset-HU"
    assert side["creator_version"]


def test_raster_is_little_endian_row_major(tmp_path):
    x = np.arange(6.0).reshape(2, 3)
    io.write_raster(tmp_path / "a.raw", x)
    np.testing.assert_array_equal(np.fromfile(tmp_path / "a.raw", dtype="<f4"), [0, 1, 2, 3, 4, 5])


def test_f64_raster_is_bit_exact(tmp_path, rng):
    x = rng.normal(size=(3, 4, 2))
    io.write_raster(tmp_path / "w.raw", x, dtype="f64le")
    np.testing.assert_array_equal(io.read_raster(tmp_path / "w.raw"), x)
    with pytest.raises(ValueError):
        io.write_raster(tmp_path / "bad.raw", x, dtype="i16")


def test_corruption_is_detected(tmp_path, rng):
    path = tmp_path / "a.raw"
    io.write_raster(path, rng.normal(size=(4, 4)))
    data = bytearray(path.read_bytes())
    data[3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(io.ArtifactError, match="checksum"):
        io.read_raster(path)
    path.write_bytes(bytes(data[:-4]))
    with pytest.raises(io.ArtifactError, match="bytes"):
        io.read_raster(path)
    with pytest.raises(FileNotFoundError):
        io.read_raster(tmp_path / "missing.raw")


def test_union_round_trip(tmp_path):
    U = TransformUnion(initial_transforms(3, 4, seed=2), 0.01, 15.0, PatchConfig(4, 2),
                       [{"iteration": 0, "objective": 1.5, "cluster_sizes": [1, 2, 3]}])
    io.save_union(tmp_path, U)
    back = io.load_union(tmp_path)
    np.testing.assert_array_equal(back.transforms, U.transforms)
    assert (back.lambda0, back.eta, back.patch, back.training_log) == (U.lambda0, U.eta, U.patch,
                                                                       U.training_log)


def test_network_round_trip(tmp_path):
    params = ConvNetParams.init(seed=9)
    io.save_network(tmp_path, params, trace={"epoch_loss": [1.0, 0.5]})
    back = io.load_network(tmp_path)
    for a, b in zip(params.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
    assert back.init_seed == 9 and back.scale == params.scale
    assert json.loads((tmp_path / "log.json").read_text())["epoch_loss"] == [1.0, 0.5]


@pytest.mark.parametrize("kind", ["ultra", "pnp_admm"])
def test_pipeline_round_trip(tmp_path, kind):
    if kind == "ultra":
        params = desk_ultra(TransformUnion(initial_transforms(2, 4), patch=PatchConfig(4, 1)))
    else:
        params = AdmmParams(denoiser=DenoiserRef("nonlocal_means", 4000.0))
    blocks = [SuperBlock(ConvNetParams.init(seed=l), 0.1 * l, kind, params) for l in (1, 2)]
    logs = [{"block": 1, "lambda": 0.1}, {"block": 2, "lambda": 0.2}]
    pipe = SuperPipeline(blocks, 0.05, 0.95, "parallel", "hash", logs)
    io.save_pipeline(tmp_path, pipe)
    assert (tmp_path / "block_02" / "lambda.json").exists()
    back = io.load_pipeline(tmp_path)
    assert [b.lam for b in back.blocks] == [0.1, 0.2]
    assert back.training_log == logs and back.geometry_hash == "hash"
    if kind == "ultra":
        np.testing.assert_array_equal(back.blocks[0].unsup_params.union.transforms,
                                      params.union.transforms)
        assert back.blocks[0].unsup_params.beta == params.beta
    else:
        assert back.blocks[1].unsup_params == params
    np.testing.assert_array_equal(back.blocks[1].theta.weights[2], blocks[1].theta.weights[2])
    with pytest.raises(io.ArtifactError):
        io.load_boosting(tmp_path)


def test_boosting_round_trip(tmp_path):
    model = BoostingModel([ConvNetParams.init(seed=s) for s in range(3)])
    model.training_log = [{"stage": 1}]
    io.save_boosting(tmp_path, model)
    back = io.load_boosting(tmp_path)
    assert len(back.stages) == 3 and back.training_log == [{"stage": 1}]
    np.testing.assert_array_equal(back.stages[2].biases[0], model.stages[2].biases[0])
    with pytest.raises(io.ArtifactError):
        io.load_pipeline(tmp_path)


def test_dataset_round_trip(tmp_path):
    grid, geo = desk_scan(n=16, n_detectors=32, n_views=30)
    A = build_system_matrix(geo, grid)
    ds = make_dataset(2, 1, 1, grid, geo, NoiseModel(seed=3), seed=5, A=A, init_params=desk_ep(5))
    manifest = io.save_dataset(tmp_path, ds)
    assert manifest["geometry_hash"] == A.hash()
    back = io.load_dataset(tmp_path)
    assert back.grid == grid and back.geometry == geo and back.noise == ds.noise and back.seed == 5
    for split in ("train", "val", "test"):
        for a, b in zip(ds[split], back[split]):
            assert (a.index, a.phantom_seed, a.noise_seed) == (b.index, b.phantom_seed, b.noise_seed)
            np.testing.assert_array_equal(b.y, a.y.astype(np.float32))
            np.testing.assert_array_equal(b.init, a.init.astype(np.float32))
