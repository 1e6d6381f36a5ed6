import hashlib

import numpy as np
import pytest

from risloc.config import parse_config
from risloc.pipeline import (
    PipelineError,
    SWEEP_CSV_HEADER,
    build_individual_spec,
    run_full_pipeline,
    run_method,
    run_sweep,
    stage1_train_initial_estimator,
    stage2_evolve_policies,
    stage3_retrain_estimator,
    train_position_estimator,
)
from risloc.rollout import generate_random_episodes
from risloc.util import derive_rng

MICRO = {
    "scenario": {"n_ris": 4},
    "rollout": {"horizon": 3},
    "training": {
        "stage1_dataset_size": 500,
        "stage3_dataset_size": 500,
        "supervised_dataset_size": 500,
        "epochs": 3,
        "batch_size": 128,
        "eval_episodes": 100,
    },
    "networks": {
        "policy_lstm": [8, 8], "ris_head_hidden": 8, "bit_head_hidden": 4,
        "power_lstm": [8, 8], "power_head_hidden": 4,
        "estimator_lstm": [8, 8], "estimator_head_hidden": [8],
        "supervised_hidden": [32, 32],
    },
    "ne": {"population_size": 8, "generations": 2, "episodes_per_eval": 4, "elite_count": 1},
    "sweep": {"n_ris": [4], "noise_dbm": [-80.0], "methods": ["uniform", "supervised"]},
}


def micro_cfg(seed=1, **extra):
    overrides = {k: (dict(v) if isinstance(v, dict) else list(v)) for k, v in MICRO.items()}
    for key, section in extra.items():
        if isinstance(section, dict):
            overrides.setdefault(key, {})
            overrides[key].update(section)
        else:
            overrides[key] = section
    return parse_config(preset="desk", seed=seed, overrides=overrides)


def params_hash(params):
    return hashlib.sha256(np.ascontiguousarray(params).tobytes()).hexdigest()


class TestStage1:
    def test_memorizes_single_noiseless_position(self):
        # degenerate dataset: one fixed UE position, no noise, no fading
        cfg = micro_cfg(
            scenario={"ue_half": [0.0, 0.0]},
            channel={"noise_power_dbm": -np.inf, "ricean_kappa_db": np.inf},
            training={"stage1_dataset_size": 400, "epochs": 10, "batch_size": 64},
        )
        estimator, history = stage1_train_initial_estimator(cfg)
        data = generate_random_episodes(64, cfg.scenario, cfg.rollout, derive_rng(9, 9))
        pred = estimator.predict(data.observations)
        rmse = float(np.sqrt(np.mean(np.sum((pred - data.positions) ** 2, axis=1))))
        assert rmse < 0.1

    def test_learning_curve_improves_over_seeds(self):
        wins = 0
        for seed in range(10):
            cfg = micro_cfg(seed=seed, training={"epochs": 5, "stage1_dataset_size": 800})
            _, history = stage1_train_initial_estimator(cfg)
            if history.train_losses[-1] < history.train_losses[0]:
                wins += 1
        assert wins == 10

    def test_divergence_aborts_with_diagnostic(self):
        cfg = micro_cfg(training={"learning_rate": 1e200, "epochs": 3})
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(PipelineError):
            stage1_train_initial_estimator(cfg)

    def test_full_scale_preset_dataset_sizes(self):
        paper = parse_config(preset="paper")
        assert paper.training.stage1_dataset_size == 50000
        assert paper.training.stage3_dataset_size == 50000
        assert paper.training.supervised_dataset_size == 70000


class TestStage2:
    def test_bookkeeping_and_isolation(self):
        cfg = micro_cfg()
        estimator, _ = stage1_train_initial_estimator(cfg)
        before = params_hash(estimator.params)
        policy, power, best_fitness, stats = stage2_evolve_policies(estimator, cfg)
        assert params_hash(estimator.params) == before  # stage 2 never touches E_I
        assert best_fitness == stats[-1].best_so_far
        spec = build_individual_spec(cfg.networks, cfg.scenario, cfg.rollout)
        rebuilt = spec.concatenate(policy.params, power.params)
        np.testing.assert_array_equal(spec.split(rebuilt)[0], policy.params)

    def test_single_agent_variant(self):
        cfg = micro_cfg()
        estimator, _ = stage1_train_initial_estimator(cfg)
        policy, power, _, _ = stage2_evolve_policies(estimator, cfg, single_agent=True)
        assert power is None
        assert policy.exact_power


class TestStage3:
    def test_fresh_initialization_differs_from_warm_start(self):
        cfg = micro_cfg()
        estimator, _ = stage1_train_initial_estimator(cfg)
        policy, power, _, _ = stage2_evolve_policies(estimator, cfg)
        fresh, _ = stage3_retrain_estimator(policy, power, cfg, initial_estimator=estimator)
        warm_cfg = micro_cfg(training={"warm_start_stage3": True})
        warm, _ = stage3_retrain_estimator(policy, power, warm_cfg, initial_estimator=estimator)
        assert params_hash(fresh.params) != params_hash(warm.params)

    def test_warm_start_requires_initial(self):
        cfg = micro_cfg(training={"warm_start_stage3": True})
        estimator, _ = stage1_train_initial_estimator(cfg)
        policy, power, _, _ = stage2_evolve_policies(estimator, cfg)
        with pytest.raises(PipelineError):
            stage3_retrain_estimator(policy, power, cfg, initial_estimator=None)


class TestTrainer:
    def test_validation_split_keeps_best_epoch(self):
        cfg = micro_cfg(training={"epochs": 4})
        data = generate_random_episodes(300, cfg.scenario, cfg.rollout, derive_rng(1, 1))
        _, history = train_position_estimator(
            data.observations, data.positions, cfg.scenario, cfg.rollout, cfg.networks,
            cfg.training, derive_rng(1, 2),
        )
        assert 0 <= history.best_epoch < 4
        assert len(history.train_losses) == 4
        assert len(history.val_losses) == 4


class TestSweep:
    def test_rows_structure_and_determinism(self):
        cfg = micro_cfg()
        rows1 = run_sweep(cfg)
        rows2 = run_sweep(cfg)
        assert len(rows1) == len(cfg.sweep.n_ris) * len(cfg.sweep.noise_dbm) * len(cfg.sweep.methods)
        for r1, r2 in zip(rows1, rows2):
            assert r1.csv_values() == r2.csv_values()
        assert [r.method for r in rows1] == ["uniform", "supervised"]
        assert len(SWEEP_CSV_HEADER) == 8

    def test_full_ma_method_row(self):
        cfg = micro_cfg()
        row = run_method(cfg, "ma")
        assert np.isfinite(row.rmse_m)
        assert row.n_ris == 4
        assert row.seed == 1

    def test_unknown_method_rejected(self):
        with pytest.raises(PipelineError):
            run_method(micro_cfg(), "oracle")


class TestFullPipeline:
    def test_end_to_end_finite(self):
        cfg = micro_cfg()
        result = run_full_pipeline(cfg)
        assert np.isfinite(result.best_fitness)
        assert result.estimator_final is not result.estimator_initial
        assert len(result.generation_stats) == cfg.ne.generations + 1
