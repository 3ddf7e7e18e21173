import numpy as np
import pytest

from adaptive_depth.backbone import BackboneConfig
from adaptive_depth.data import Dataset, generate
from adaptive_depth.errors import InputError, ParameterError, TrainingError
from adaptive_depth.predictor import PredictorConfig
from adaptive_depth.trainer import (BACKBONE, PPO, PREDICTOR, TrainConfig, epsilon_at, fold_and_finetune, lr_at,
                                    param_hash, report_lines, run, run_baseline, schedule)


def small_cfg(**kw) -> TrainConfig:
    base = dict(epochs=4, batch_size=32, seed=5,
                backbone=BackboneConfig(num_layers=3, d_model=16, num_heads=2, max_len=12),
                predictor=PredictorConfig(n_trees=10))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_ds():
    return generate(300, 2)


@pytest.fixture(scope="module")
def small_run(small_ds):
    return run(small_ds, small_cfg())


def test_schedule_alternates():
    phases = [schedule(e).second for e in range(7)]
    assert phases == [PPO, BACKBONE, BACKBONE, PPO, BACKBONE, BACKBONE, PPO]
    assert all(schedule(e).phases[0] == PREDICTOR for e in range(7))
    with pytest.raises(ParameterError):
        schedule(-1)


def test_lr_halving_examples():
    assert lr_at(0) == pytest.approx(1e-4)
    assert lr_at(9) == pytest.approx(1e-4)
    assert lr_at(10) == pytest.approx(5e-5)
    assert lr_at(25) == pytest.approx(2.5e-5)
    with pytest.raises(ParameterError):
        lr_at(-2)


def test_epsilon_decay_with_floor():
    cfg = small_cfg(epsilon=0.1, epsilon_decay=0.5, epsilon_floor=0.02)
    assert epsilon_at(cfg, 0) == 0.1
    assert epsilon_at(cfg, 1) == 0.05
    assert epsilon_at(cfg, 5) == 0.02


def test_config_round_trip_and_validation():
    cfg = small_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ParameterError):
        small_cfg(epochs=0)
    with pytest.raises(ParameterError):
        small_cfg(val_fraction=1.0)


def test_frozen_components_per_stage(small_ds):
    seen = []

    def hook(epoch, phase, system):
        seen.append((epoch, phase, param_hash(system.backbone.params), param_hash(system.policy.params),
                     param_hash(system.predictor.to_arrays())))

    run(small_ds, small_cfg(epochs=3), hooks=hook)
    assert [(e, p) for e, p, *_ in seen] == [(0, PREDICTOR), (0, PPO), (1, PREDICTOR), (1, BACKBONE),
                                            (2, PREDICTOR), (2, BACKBONE)]
    for before, after in zip(seen, seen[1:]):
        _, phase, bb0, pol0, pr0 = before
        _, next_phase, bb1, pol1, pr1 = after
        if next_phase == PREDICTOR:
            assert (bb1, pol1) == (bb0, pol0)
        elif next_phase == PPO:
            assert (bb1, pr1) == (bb0, pr0)
            assert pol1 != pol0
        else:
            assert (pol1, pr1) == (pol0, pr0)
            assert bb1 != bb0


def test_fixed_seed_reports_identical(small_ds, small_run):
    again = run(small_ds, small_cfg())
    assert report_lines(again.report) == report_lines(small_run.report)
    assert param_hash(again.system.backbone.params) == param_hash(small_run.system.backbone.params)


def test_report_fields(small_run):
    rep = small_run.report
    assert [r["epoch"] for r in rep] == list(range(len(rep)))
    for r in rep:
        assert r["phase"] in (PPO, BACKBONE)
        assert 0.0 <= r["val_accuracy"] <= 1.0
        assert 1.0 <= r["val_mean_depth"] <= 3.0
        assert ("train_loss" in r) == (r["phase"] == BACKBONE)
        assert ("reward_mean" in r) == (r["phase"] == PPO)


def test_best_epoch_has_minimum_val_loss(small_run):
    losses = [r["val_loss"] for r in small_run.report]
    assert small_run.best_epoch == int(np.argmin(losses))
    ev = small_run.system.evaluate(small_run.val)
    assert ev.val_loss == pytest.approx(losses[small_run.best_epoch], rel=1e-12)


def test_early_stop_prefix(small_ds):
    cfg = small_cfg(epochs=8, patience=1, min_delta=10.0)
    stopped = run(small_ds, cfg)
    full = run(small_ds, cfg, ignore_early_stop=True)
    # min_delta this large means only the first epoch counts as improvement
    assert stopped.stopped_early
    assert len(stopped.report) == 2
    assert len(full.report) == 8
    assert report_lines(full.report[:2]) == report_lines(stopped.report)
    assert stopped.best_epoch == full.best_epoch == 0


def test_mean_flops_matches_table(small_run):
    ev = small_run.system.evaluate(small_run.val)
    table = small_run.system.depth_flops()
    assert ev.mean_flops == pytest.approx(np.mean(table[ev.chosen_depth - 1]), rel=1e-12)
    assert ev.flops_ratio == pytest.approx(ev.mean_flops / table[-1], rel=1e-12)
    assert np.all(np.diff(table) > 0)


def test_non_finite_loss_raises(small_ds):
    def poison(epoch, phase, system):
        if phase == PREDICTOR:
            for v in system.backbone.params.values():
                v[...] = np.nan

    with pytest.raises(TrainingError):
        run(small_ds, small_cfg(epochs=2), hooks=poison)


def test_input_errors(small_ds):
    with pytest.raises(InputError):
        run(Dataset([], {}), small_cfg())
    with pytest.raises(ParameterError):
        run(small_ds, small_cfg(batch_size=10_000))


def test_baseline_uses_backbone_epochs_only(small_ds):
    _, rep = run_baseline(small_ds, small_cfg(epochs=5))
    assert [r["epoch"] for r in rep] == [1, 2, 4]


def test_fold_and_finetune(small_run):
    res = fold_and_finetune(small_run.system, small_run.train, small_cfg(), energy_ratio=0.9, epochs=1)
    assert res.system.backbone.folded
    assert all(f.energy_retained >= 0.9 - 1e-12 for f in res.factors.values())
    assert res.params_before == small_run.system.backbone.num_params()
    assert res.params_after == res.system.backbone.num_params()
    assert len(res.losses) == 1 and np.isfinite(res.losses[0])
    # predictor and controller carried over
    assert param_hash(res.system.policy.params) == param_hash(small_run.system.policy.params)
    ev = res.system.evaluate(small_run.val)
    assert 0.0 <= ev.accuracy <= 1.0


def test_fold_factors_not_aliased_by_finetune(small_run):
    res = fold_and_finetune(small_run.system, small_run.train, small_cfg(), epochs=1)
    name = next(iter(res.factors))
    assert not np.array_equal(res.factors[name].left, res.system.backbone.params[name + "@left"])
    w = small_run.system.backbone.params[name]
    energy = np.sum(res.factors[name].reconstruct() ** 2) / np.sum(w ** 2)
    assert energy >= 0.9
