import json

import numpy as np
import pytest

from bilevel_analysis.datagen import make_dataset
from bilevel_analysis.denoise import DenoiseConfig
from bilevel_analysis.imgops import load_filterbank, make_dct_filterbank
from bilevel_analysis.train import (
    DEFAULT_SCHEDULE,
    TrainConfig,
    _patches,
    beta_sweep,
    default_beta_grid,
    format_schedule,
    parse_schedule,
    sgd_train,
    sparsity_objective,
    unsupervised_train,
)

FAST = DenoiseConfig(rho=10.0, relax=1.7, outer_iters=2000, tol=1e-6)


@pytest.fixture(scope="module")
def toy():
    return make_dataset(seed=3, T=1, N=16, n_rects=10)


@pytest.fixture(scope="module")
def small():
    return make_dataset(seed=5, T=3, N=16, n_rects=10)


def test_schedule_parsing():
    assert parse_schedule("1x5000,5x2500,10x2500") == DEFAULT_SCHEDULE
    assert parse_schedule([[2, 3]]) == ((2, 3),)
    assert format_schedule(DEFAULT_SCHEDULE) == "1x5000,5x2500,10x2500"
    with pytest.raises(ValueError):
        parse_schedule("1x")


@pytest.mark.parametrize("bad", [dict(beta=0), dict(step_size=-1), dict(schedule=()),
                                 dict(schedule=((0, 5),)), dict(snapshot_every=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_roundtrip():
    cfg = TrainConfig(beta=0.03, schedule="2x4,1x1", seed=9)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


def test_zero_step_keeps_filters(toy):
    cfg = TrainConfig(beta=0.02, step_size=0.0, schedule=((1, 5),), denoise=FAST)
    run = sgd_train(toy, cfg)
    np.testing.assert_array_equal(run.final_fb.filters, make_dct_filterbank(False).filters)
    assert len(set(run.loss_log)) == 1


def test_toy_descent(toy):
    cfg = TrainConfig(beta=0.02, schedule=((1, 200),), denoise=FAST)
    run = sgd_train(toy, cfg)
    assert len(run.loss_log) == 200
    assert run.loss_log[-1] < run.loss_log[0]
    assert not run.unreliable


def test_batches_without_replacement(small):
    seen = []
    cfg = TrainConfig(beta=0.02, schedule=((1, 6),), denoise=FAST)
    sgd_train(small, cfg, callback=lambda step, fb, rec: seen.append(rec["pairs"][0]["pair"]))
    assert sorted(seen[:3]) == [0, 1, 2] and sorted(seen[3:]) == [0, 1, 2]


def test_deterministic(small):
    cfg = TrainConfig(beta=0.02, schedule=((1, 3), (2, 2)), denoise=FAST)
    a, b = sgd_train(small, cfg), sgd_train(small, cfg)
    assert a.loss_log == b.loss_log
    np.testing.assert_array_equal(a.final_fb.filters, b.final_fb.filters)


def test_resume_matches_uninterrupted(small, tmp_path):
    cfg = TrainConfig(beta=0.02, schedule=((1, 4), (2, 3)), denoise=FAST, snapshot_every=2)
    full = sgd_train(small, cfg, run_dir=tmp_path / "full")

    class Stop(Exception):
        pass

    def interrupt(step, fb, rec):
        if step == 4:
            raise Stop

    with pytest.raises(Stop):
        sgd_train(small, cfg, run_dir=tmp_path / "cut", callback=interrupt)
    resumed = sgd_train(small, cfg, run_dir=tmp_path / "cut", resume=True)
    assert resumed.loss_log == full.loss_log
    np.testing.assert_array_equal(resumed.final_fb.filters, full.final_fb.filters)
    for name in ("loss.csv", "final.json", "summary.json"):
        assert (tmp_path / "cut" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()
    snaps = sorted(p.name for p in (tmp_path / "full" / "snapshots").glob("*.json"))
    assert snaps == ["theta_000000.json", "theta_000002.json", "theta_000004.json",
                     "theta_000006.json", "theta_000007.json"]
    assert load_filterbank(tmp_path / "full" / "final.json") == full.final_fb


def test_resume_rejects_changed_config(small, tmp_path):
    cfg = TrainConfig(beta=0.02, schedule=((1, 2),), denoise=FAST)
    sgd_train(small, cfg, run_dir=tmp_path)
    with pytest.raises(ValueError):
        sgd_train(small, TrainConfig(beta=0.03, schedule=((1, 2),), denoise=FAST),
                  run_dir=tmp_path, resume=True)


def test_inaccurate_solves_mark_run_unreliable(toy):
    cfg = TrainConfig(beta=0.02, schedule=((1, 3),),
                      denoise=DenoiseConfig(outer_iters=2, tol=1e-8))
    run = sgd_train(toy, cfg)
    assert run.n_flagged == 3 and run.unreliable


def test_batch_larger_than_dataset(toy):
    with pytest.raises(ValueError):
        sgd_train(toy, TrainConfig(schedule=((2, 1),)))


def test_unsupervised_constraints(small):
    info = unsupervised_train(small.clean, iters=50, beta=0.02, return_info=True)
    F = info.F
    assert np.max(np.abs(F @ F.T - np.eye(9))) <= 1e-8
    assert info.best_iter > 0
    assert min(info.objective) < info.init_objective
    assert sparsity_objective(F, _patches(small.clean, 3)) <= info.init_objective
    assert info.fb.K == 8
    # the dropped row is the one closest to the constant filter
    const = np.full(9, 1 / 3)
    assert abs(F[info.dropped] @ const) == pytest.approx(np.max(np.abs(F @ const)))


def test_unsupervised_weight_only_sets_threshold(small):
    a = unsupervised_train(small.clean, iters=20, rho=1.0, beta=0.05)
    b = unsupervised_train(small.clean, iters=20, rho=20.0, beta=1.0)
    np.testing.assert_allclose(a.filters, b.filters, atol=1e-10)
    with pytest.raises(ValueError):
        unsupervised_train(small.clean, beta=0.0)


def test_unsupervised_zero_iters_is_dct(small):
    fb = unsupervised_train(small.clean, iters=0)
    np.testing.assert_allclose(fb.filters, make_dct_filterbank(False).filters, atol=1e-15)


def test_default_grid():
    g = default_beta_grid()
    assert len(g) == 15 and g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(1.0)


def test_sweep_single_entry(small):
    res = beta_sweep("tv", small, grid=[0.07])
    assert res.best_beta == 0.07 and len(res.table) == 1


def test_sweep_picks_max_and_refines(small):
    res = beta_sweep("tv", small, grid=[0.001, 0.03, 1.0], refine=2)
    table = dict(res.table)
    assert res.best_beta == max(table, key=table.get)
    assert len(table) == 5
    lines = res.to_csv().splitlines()
    assert lines[0] == "beta,snr_db" and len(lines) == 6


def test_sweep_rejects_bad_grid(small):
    with pytest.raises(ValueError):
        beta_sweep("tv", small, grid=[])
    with pytest.raises(ValueError):
        beta_sweep("tv", small, grid=[-1.0])
