import logging

import numpy as np
import pytest

from superct import metrics, pipeline
from superct.denoisers import DenoiserRef
from superct.geometry import build_system_matrix
from superct.mbir import AdmmParams
from superct.neural import ConvNetParams, TrainConfig, forward, train_supervised
from superct.pipeline import (PipelineError, SuperBlock, SuperConfig, SuperPipeline, apply_boosting,
                              apply_parallel_super, combine, combined_loss, optimal_lambda,
                              samples_from, solve_lambda, train_boosting, train_parallel_super,
                              train_serial_super)
from superct.presets import desk_ep, desk_scan
from superct.sim import NoiseModel, make_dataset

ADMM = AdmmParams(rho0=1e6 * 2**-28, beta=25 * 2**-28, mu=5e5 * 2**-28 * 0.1, iters=4, inner=4,
                  denoiser=DenoiserRef("gaussian_blur", 1.0))
TRAIN = TrainConfig(epochs=3, lr_start=1e-2, lr_end=1e-3, seed=11)


def grid_lambdas(lb, ub):
    return np.linspace(lb, ub, int(round((ub - lb) / 0.001)) + 1)


@pytest.fixture(scope="module")
def small():
    grid, geo = desk_scan(n=32, n_detectors=64, n_views=60)
    A = build_system_matrix(geo, grid)
    ds = make_dataset(4, 0, 1, grid, geo, NoiseModel(), seed=77, A=A, init_params=desk_ep(40))
    return A, samples_from(ds["train"]), samples_from(ds["test"])


@pytest.fixture(scope="module")
def trained(small):
    A, train, _ = small
    return train_parallel_super(train, A, 2, SuperConfig("pnp_admm", ADMM, TRAIN))


# -- combination weight ----------------------------------------------------------

def test_lambda_perfect_supervised_goes_to_upper_bound(rng):
    refs = [rng.normal(size=16) for _ in range(3)]
    unsup = [r + rng.normal(size=16) for r in refs]
    assert optimal_lambda(refs, unsup, refs) == pytest.approx(1.0, abs=1e-14)
    assert solve_lambda(refs, unsup, refs) == 0.95


def test_lambda_perfect_unsupervised_goes_to_lower_bound(rng):
    refs = [rng.normal(size=16) for _ in range(3)]
    sup = [r + rng.normal(size=16) for r in refs]
    assert optimal_lambda(sup, refs, refs) == 0.0
    assert solve_lambda(sup, refs, refs) == 0.05


def test_lambda_is_grid_argmin(rng):
    for _ in range(10):
        g, m, r = ([rng.normal(size=16)] for _ in range(3))
        lam = solve_lambda(g, m, r)
        best = min(combined_loss(t, g, m, r) for t in grid_lambdas(0.05, 0.95))
        assert combined_loss(lam, g, m, r) <= best + 1e-9


def test_clipped_endpoint_beats_interior(rng):
    refs = [rng.normal(size=16)]
    sup = [refs[0] + 0.01 * rng.normal(size=16)]
    unsup = [refs[0] + rng.normal(size=16)]
    assert optimal_lambda(sup, unsup, refs) > 0.95
    interior = grid_lambdas(0.05, 0.95)[:-1]
    assert all(combined_loss(0.95, sup, unsup, refs) < combined_loss(t, sup, unsup, refs) for t in interior)


def test_lambda_zero_denominator_and_errors(rng):
    x = [rng.normal(size=16)]
    assert solve_lambda(x, x, [rng.normal(size=16)], 0.1, 0.7) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        solve_lambda([], [], [])
    with pytest.raises(ValueError):
        solve_lambda(x, x + x, x)


def test_combination_is_affine(rng):
    a = rng.normal(size=(8, 8))
    for lam in (0.0, 0.05, 0.3, 0.95, 1.0):
        np.testing.assert_array_equal(combine(lam, a, a), a)


def test_pipeline_bounds_validation():
    with pytest.raises(ValueError):
        SuperPipeline([], 0.6, 0.5)
    with pytest.raises(ValueError):
        SuperConfig("ultra", ADMM, lambda_lb=-0.1)
    with pytest.raises(ValueError):
        SuperConfig("nope", ADMM)


# -- parallel SUPER training and replay ---------------------------------------------

def test_forced_half_lambda_is_exact_average(small):
    A, train, _ = small
    pipe = train_parallel_super(train[:2], A, 1, SuperConfig("pnp_admm", ADMM, TRAIN, 0.5, 0.5))
    for s, out in zip(train[:2], pipe.final_train_outputs):
        _, trace = apply_parallel_super(pipe, A, s.y, s.w, s.x0)
        np.testing.assert_array_equal(out, (trace[0]["supervised"] + trace[0]["unsupervised"]) / 2)


def test_replay_reproduces_training_outputs(small, trained):
    A, train, _ = small
    for s, out in zip(train, trained.final_train_outputs):
        x, _ = apply_parallel_super(trained, A, s.y, s.w, s.x0)
        np.testing.assert_array_equal(x, out)


def test_block_lambda_is_grid_optimal(small, trained):
    A, train, _ = small
    traces = [apply_parallel_super(trained, A, s.y, s.w, s.x0)[1] for s in train]
    refs = [s.x_star for s in train]
    for l, entry in enumerate(trained.training_log):
        assert 0.05 <= entry["lambda"] <= 0.95
        g = [t[l]["supervised"] for t in traces]
        m = [t[l]["unsupervised"] for t in traces]
        at = combined_loss(entry["lambda"], g, m, refs)
        best = min(combined_loss(t, g, m, refs) for t in grid_lambdas(0.05, 0.95))
        assert at <= best + 1e-9 * max(1.0, best)
        assert entry["rmse_output"] == pytest.approx(
            np.mean([metrics.rmse_hu(t[l]["output"], r) for t, r in zip(traces, refs)]))


def test_training_is_deterministic(small, trained):
    A, train, _ = small
    again = train_parallel_super(train, A, 2, SuperConfig("pnp_admm", ADMM, TRAIN))
    assert [b.lam for b in again.blocks] == [b.lam for b in trained.blocks]
    for a, b in zip(again.final_train_outputs, trained.final_train_outputs):
        np.testing.assert_array_equal(a, b)


def test_block_cache_reused(small, tmp_path, caplog):
    A, train, _ = small
    cfg = SuperConfig("pnp_admm", ADMM, TRAIN, cache_dir=tmp_path)
    first = train_parallel_super(train[:2], A, 1, cfg)
    assert (tmp_path / "block_01" / "unsupervised.npz").exists()
    with caplog.at_level(logging.INFO, logger="superct.pipeline"):
        second = train_parallel_super(train[:2], A, 1, cfg)
    assert "cache hit" in caplog.text
    np.testing.assert_array_equal(first.final_train_outputs[0], second.final_train_outputs[0])


def test_threaded_jobs_match_serial(small, trained):
    A, train, _ = small
    cfg = SuperConfig("pnp_admm", ADMM, TRAIN, jobs=3)
    threaded = train_parallel_super(train, A, 2, cfg)
    for a, b in zip(threaded.final_train_outputs, trained.final_train_outputs):
        np.testing.assert_array_equal(a, b)


def test_geometry_mismatch_rejected(small, trained):
    _, _, test = small
    grid, geo = desk_scan(n=32, n_detectors=64, n_views=30)
    other = build_system_matrix(geo, grid)
    with pytest.raises(ValueError, match="geometry"):
        apply_parallel_super(trained, other, test[0].y, test[0].w, test[0].x0)


def test_identity_network_expansion(small):
    A, _, test = small
    s = test[0]
    block = SuperBlock(ConvNetParams.zeros(), 0.95, "pnp_admm", ADMM)
    pipe = SuperPipeline([block, block], geometry_hash=A.hash())
    x, trace = apply_parallel_super(pipe, A, s.y, s.w, s.x0)
    prev = s.x0
    for t in trace:
        np.testing.assert_array_equal(t["output"], 0.95 * prev + (1 - 0.95) * t["unsupervised"])
        prev = t["output"]
    np.testing.assert_array_equal(x, prev)


def test_pipeline_is_not_idempotent(small, trained):
    A, _, test = small
    s = test[0]
    one = SuperPipeline(trained.blocks[:1], geometry_hash=A.hash())
    x1, _ = apply_parallel_super(one, A, s.y, s.w, s.x0)
    x2, _ = apply_parallel_super(one, A, s.y, s.w, x1)
    assert not np.allclose(x1, x2)


def test_step_errors_are_labelled(small, monkeypatch):
    A, train, _ = small

    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setitem(pipeline.UNSUPERVISED, "pnp_admm", broken)
    with pytest.raises(PipelineError) as err:
        train_parallel_super(train[:1], A, 2, SuperConfig("pnp_admm", ADMM, TRAIN))
    assert err.value.block == 1 and err.value.step.startswith("(1)")
    monkeypatch.undo()
    monkeypatch.setattr(pipeline, "train_supervised", broken)
    with pytest.raises(PipelineError) as err:
        train_parallel_super(train[:1], A, 1, SuperConfig("pnp_admm", ADMM, TRAIN))
    assert err.value.step.startswith("(2)") and "boom" in str(err.value)


# -- serial SUPER -----------------------------------------------------------------

def test_serial_huge_mu_returns_network_output(small):
    A, train, test = small
    stiff = AdmmParams(**{**ADMM.__dict__, "mu": 1e12, "nonneg": False})
    pipe = train_serial_super(train[:2], A, 1, SuperConfig("pnp_admm", stiff, TRAIN))
    assert pipe.variant == "serial" and pipe.blocks[0].lam is None
    s = test[0]
    x, trace = apply_parallel_super(pipe, A, s.y, s.w, s.x0)
    assert np.abs(x - trace[0]["supervised"]).max() < 0.1
    # with the nonnegativity constraint the anchor is reached up to clipping
    for block in pipe.blocks:
        block.unsup_params = AdmmParams(**{**stiff.__dict__, "nonneg": True})
    x, trace = apply_parallel_super(pipe, A, s.y, s.w, s.x0)
    assert np.abs(x - np.maximum(trace[0]["supervised"], 0)).max() < 0.1


def test_zero_blocks_is_identity(small):
    A, train, test = small
    for trainer in (train_serial_super, train_parallel_super):
        pipe = trainer(train[:1], A, 0, SuperConfig("pnp_admm", ADMM, TRAIN))
        x, trace = apply_parallel_super(pipe, A, test[0].y, test[0].w, test[0].x0)
        np.testing.assert_array_equal(x, test[0].x0)
        assert trace == []


# -- deep boosting -----------------------------------------------------------------

def test_single_stage_boosting_is_supervised(small):
    _, train, test = small
    pairs = [(s.x0, s.x_star) for s in train]
    model = train_boosting(pairs, 1, TRAIN)
    theta, _ = train_supervised(pairs, TRAIN)
    np.testing.assert_array_equal(apply_boosting(model, test[0].x0), forward(theta, test[0].x0))


def test_second_stage_input_doubles_signal():
    x0 = np.full((16, 16), 1000.0)
    model = train_boosting([(x0, x0)] * 3, 2, TRAIN)
    _, trace = apply_boosting(model, x0, return_trace=True)
    assert len(trace) == 2
    assert np.mean(x0 + trace[0]) / np.mean(x0) == pytest.approx(2.0, rel=0.02)


def test_sos_strengthening_raises_snr(rng):
    for _ in range(20):
        x_star = rng.uniform(500, 1500, (16, 16))
        x0 = x_star + rng.normal(0, 50, x_star.shape)
        x_hat = x_star + rng.uniform(0.1, 0.9) * (x0 - x_star) + rng.normal(0, 5, x_star.shape)
        assert metrics.rmse_hu(x_hat, x_star) < metrics.rmse_hu(x0, x_star)
        assert metrics.snr_db(x0 + x_hat, 2 * x_star) > metrics.snr_db(x0, x_star)


def test_boosting_validation():
    with pytest.raises(ValueError):
        train_boosting([(np.zeros((8, 8)), np.zeros((8, 8)))], 0)
    with pytest.raises(ValueError):
        pipeline.BoostingModel([])
