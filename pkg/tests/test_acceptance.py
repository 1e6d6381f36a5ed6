"""Acceptance suite for the desk preset.

Each test prints one `[acceptance] ...` verdict line (visible with -s) and
asserts the shipped guarantee at its stated tolerance. The ten seeded
pipeline runs are shared session-wide, so `pytest tests/test_acceptance.py`
runs the whole gate in one go.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

from risloc import nn
from risloc.agents import input_scale_for, make_estimator_arch, make_supervised_arch
from risloc.baselines import build_fingerprint_db, evaluate_fingerprint, fingerprint_localize, rss_sequences, train_supervised_baseline
from risloc.channel import sample_channel, sample_ue_position, synthesize_observation
from risloc.config import STAGE_EVAL, parse_config
from risloc.cosyne import fitness_from_stats
from risloc.pipeline import (
    build_individual_spec,
    evaluate_method_controller,
    run_full_pipeline,
    uniform_power_reference,
)
from risloc.rollout import (
    FixedSequenceController,
    MultiAgentController,
    RandomController,
    SingleAgentController,
    draw_episode_block,
    run_episode_batch,
)
from risloc.util import derive_rng

RNG = np.random.default_rng
STAGE_AUDIT = 99  # fresh-episode stream for the budget audit


def report(line: str) -> None:
    print(f"[acceptance] {line}")


@pytest.fixture(scope="session")
def desk_cfg():
    return parse_config(preset="desk")


@pytest.fixture(scope="session")
def ten_runs():
    """Ten seeded desk pipelines with paired method evaluations."""
    runs = []
    for seed in range(10):
        cfg = parse_config(preset="desk", seed=seed)
        result = run_full_pipeline(cfg)
        ma = MultiAgentController(result.policy, result.power, "argmax")
        ev_final = evaluate_method_controller(ma, result.estimator_final, cfg, decode_mode="argmax")
        ev_initial = evaluate_method_controller(ma, result.estimator_initial, cfg, decode_mode="argmax")
        ev_uniform = uniform_power_reference(result.estimator_initial, cfg)
        _, sup_history = train_supervised_baseline(cfg)
        runs.append(
            {
                "seed": seed,
                "cfg": cfg,
                "result": result,
                "ma_rmse": ev_final.rmse_m,
                "ma_power": ev_final.mean_power,
                "ma_einit_rmse": ev_initial.rmse_m,
                "uniform_rmse": ev_uniform.rmse_m,
                "supervised_rmse": sup_history["heldout_rmse_m"],
            }
        )
    return runs


class TestC1GradientCorrectness:
    def test_bptt_matches_finite_differences(self):
        # Central differences are invalid where the +-eps interval straddles a
        # ReLU kink, so coordinates whose perturbation flips any activation
        # pattern are excluded (and counted; they must stay rare).
        started = time.time()
        worst = 0.0
        checked = skipped = 0
        rng = RNG(20250810)
        est_arch = make_estimator_arch(2, (32, 32), (16, 16))
        ff_arch = make_supervised_arch(10, (16, 16))
        eps = 1e-5
        for draw in range(100):
            if draw % 2 == 0:
                arch = est_arch
                params = nn.init_params(arch, rng)
                x = rng.standard_normal((5, 2, 2))
                targets = rng.standard_normal((2, 3))
                _, grad = nn.backward_bptt(params, arch, x, targets)

                def head_input(p, x=x, arch=arch):
                    views = nn.ParamViews(arch, p)
                    h_seq, _ = nn.lstm_forward(views, x)
                    return views, h_seq.mean(axis=0)

            else:
                arch = ff_arch
                params = nn.init_params(arch, rng)
                x = rng.standard_normal((2, 10))
                targets = rng.standard_normal((2, 3))
                _, grad = nn.backward_ff(params, arch, x, targets)

                def head_input(p, x=x, arch=arch):
                    return nn.ParamViews(arch, p), x

            def forward(p, targets=targets, arch=arch, head_input=head_input):
                views, a = head_input(p)
                pattern = []
                for (w, b), act in zip(views.heads[0], arch.heads[0].activations):
                    z = a @ w.T + b
                    a = nn.apply_activation(act, z)
                    if act == "relu":
                        pattern.append(z > 0)
                return nn.mse_loss(a, targets), pattern

            # spot-check a random subset of coordinates in every block
            views = nn.ParamViews(arch, params)
            indices = []
            offset = 0
            for name in views.names():
                size = views[name].size
                indices.extend((offset + rng.integers(0, size, 3)).tolist())
                offset += size
            for idx in indices:
                up, down = params.copy(), params.copy()
                up[idx] += eps
                down[idx] -= eps
                loss_up, pat_up = forward(up)
                loss_down, pat_down = forward(down)
                if any(not np.array_equal(a, b) for a, b in zip(pat_up, pat_down)):
                    skipped += 1
                    continue
                fd = (loss_up - loss_down) / (2 * eps)
                denom = max(abs(grad[idx]), abs(fd), 1e-6)
                worst = max(worst, abs(grad[idx] - fd) / denom)
                checked += 1
        elapsed = time.time() - started
        report(f"criterion 1 gradient check: max rel err {worst:.3e} over {checked} coordinates "
               f"({skipped} at ReLU kinks excluded), tol 1e-4, {elapsed:.1f} s: "
               + ("PASS" if worst < 1e-4 and elapsed < 60 else "FAIL"))
        assert worst < 1e-4
        assert skipped < 0.02 * (checked + skipped)
        assert elapsed < 60


class TestC2SignalModelOracle:
    def test_brute_force_summation(self, desk_cfg):
        scenario = replace(desk_cfg.scenario, channel=replace(desk_cfg.scenario.channel, noise_power_dbm=-np.inf))
        geometry, params, phases = scenario.geometry, scenario.channel, scenario.phase_set
        rng = derive_rng(2, 0)
        worst = 0.0
        for _ in range(10_000):
            ue = sample_ue_position(geometry, rng)
            real = sample_channel(geometry, params, ue, rng)
            profile = rng.integers(0, phases.n, size=geometry.n_ris)
            power = rng.uniform(0.0, 1.0)
            y = synthesize_observation(real, profile, power, phases, params, rng, power_max_watt=1.0)
            acc = complex(real.h_direct)
            for i in range(geometry.n_ris):
                acc += real.h_bs_ris[i] * np.exp(1j * np.pi * phases.values[profile[i]]) * real.h_ris_ue[i]
            expected = np.sqrt(power) * acc
            worst = max(worst, abs(y - expected) / abs(expected))
        report(f"criterion 2 signal-model oracle: max rel err {worst:.3e} (tol 1e-12): "
               + ("PASS" if worst <= 1e-12 else "FAIL"))
        assert worst <= 1e-12


class TestC3ConstraintSuite:
    def test_constraints_over_random_parameterizations(self, desk_cfg):
        cfg = desk_cfg
        spec = build_individual_spec(cfg.networks, cfg.scenario, cfg.rollout)
        sample_cfg = replace(cfg.rollout, decode_mode="sample")
        episodes = 0
        for draw in range(100):
            vector = spec.init_individual(derive_rng(3, 0, draw))
            policy, power = spec.build_agents(vector)
            controller = MultiAgentController(policy, power, "sample", audit=True)
            draws = draw_episode_block(cfg.scenario, sample_cfg, 100, derive_rng(3, 1, draw))
            batch = run_episode_batch(controller, draws, cfg.scenario, sample_cfg)
            episodes += batch.batch
            assert batch.profiles.min() >= 0
            assert batch.profiles.max() < cfg.scenario.phase_set.n
            assert batch.powers.min() >= 0.0
            assert batch.powers.max() <= cfg.rollout.power_max_watt
            assert len(controller.ue_inputs) == cfg.rollout.horizon
            for ue_in in controller.ue_inputs:
                assert set(np.unique(ue_in)) <= {0.0, 1.0}

            # per-element softmax normalization on this parameterization
            h, _ = nn.lstm_step(policy.views, policy.init_state(4),
                                derive_rng(3, 2, draw).standard_normal((4, 2)))
            probs = nn.grouped_softmax(nn.feed_forward(policy.views, 0, h), cfg.scenario.phase_set.n)
            assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) < 1e-9
        report(f"criterion 3 constraint suite: {episodes} episodes x 100 parameterizations, "
               "phase/power/softmax/1-bit constraints all hold: PASS")


class TestC4FitnessBranches:
    def test_hand_constructed_branches(self, desk_cfg):
        assert fitness_from_stats(6.0, 12.0, budget=5.0) == -6.0
        assert fitness_from_stats(4.0, 2.5, budget=5.0) == -2.5
        # episode-level: fixed powers make the episodic sum exact
        cfg = desk_cfg
        seq = np.full(cfg.rollout.horizon, 0.8)
        controller = FixedSequenceController(
            np.zeros((cfg.rollout.horizon, cfg.scenario.geometry.n_ris), dtype=np.int64),
            cfg.rollout.power_max_watt, power_sequence=seq,
        )
        draws = draw_episode_block(cfg.scenario, cfg.rollout, 64, derive_rng(4, 0))
        batch = run_episode_batch(controller, draws, cfg.scenario, cfg.rollout)
        mean_power = float(batch.power_totals().mean())
        assert mean_power == pytest.approx(4.0, abs=1e-12)
        center = np.array([20.0, 20.0, -20.0])
        mean_dist = float(np.linalg.norm(center - batch.positions, axis=1).mean())
        assert fitness_from_stats(mean_power, mean_dist, budget=2.5) == -mean_power
        assert fitness_from_stats(mean_power, mean_dist, budget=100.0) == -mean_dist

        rng = RNG(44)
        floor = min(fitness_from_stats(rng.uniform(0, 10), rng.uniform(0, 30), rng.uniform(0, 8))
                    for _ in range(10_000))
        report(f"criterion 4 fitness branches exact, fuzz max over 1e4 draws <= 0 (min {floor:.2f}): PASS")
        assert floor <= 0.0


class TestC5NeImprovement:
    def test_best_so_far_monotone_and_improving(self, ten_runs):
        improved = 0
        for run in ten_runs:
            stats = run["result"].generation_stats
            best_so_far = [s.best_so_far for s in stats]
            assert all(b >= a for a, b in zip(best_so_far, best_so_far[1:]))
            if best_so_far[-1] > stats[0].best:
                improved += 1
        report(f"criterion 5 NE improvement: best-so-far monotone in 10/10 runs, "
               f"final > generation-0 in {improved}/10 (need >= 9): "
               + ("PASS" if improved >= 9 else "FAIL"))
        assert improved >= 9


class TestC6BudgetFeasibility:
    def test_returned_pair_respects_budget(self, ten_runs):
        worst = 0.0
        for run in ten_runs:
            cfg = run["cfg"]
            result = run["result"]
            audit_cfg = replace(cfg.rollout, decode_mode=cfg.ne.fitness_decode_mode)
            controller = MultiAgentController(result.policy, result.power, audit_cfg.decode_mode)
            draws = draw_episode_block(cfg.scenario, audit_cfg, 10 * cfg.ne.episodes_per_eval,
                                       derive_rng(cfg.master_seed, STAGE_AUDIT))
            batch = run_episode_batch(controller, draws, cfg.scenario, audit_cfg)
            mean_power = float(batch.power_totals().mean())
            worst = max(worst, mean_power / cfg.ne.power_budget)
        report(f"criterion 6 budget audit over 10x{320} fresh episodes: worst mean power "
               f"{worst:.4f} x budget (tol 1.05): " + ("PASS" if worst <= 1.05 else "FAIL"))
        assert worst <= 1.05


class TestC7OrderingClaim:
    def test_ma_beats_supervised_at_median(self, ten_runs, desk_cfg):
        ma = np.array([run["ma_rmse"] for run in ten_runs])
        sup = np.array([run["supervised_rmse"] for run in ten_runs])
        fp_db = build_fingerprint_db(desk_cfg)
        fp = evaluate_fingerprint(fp_db, desk_cfg)
        report("criterion 7 per-seed RMSE (MA | supervised): "
               + ", ".join(f"{a:.2f}|{b:.2f}" for a, b in zip(ma, sup)))
        report(f"criterion 7 ordering: MA median {np.median(ma):.3f} m < supervised median "
               f"{np.median(sup):.3f} m; fingerprinting (reported) {fp.rmse_m:.3f} m: "
               + ("PASS" if np.median(ma) < np.median(sup) else "FAIL"))
        assert np.median(ma) < np.median(sup)


class TestSpecExamplesDeskScale:
    """Paired desk-scale comparisons around the frozen initial estimator."""

    def test_stage3_retraining_helps_at_median(self, ten_runs):
        final = np.array([run["ma_rmse"] for run in ten_runs])
        with_initial = np.array([run["ma_einit_rmse"] for run in ten_runs])
        report(f"stage-3 check: final estimator median {np.median(final):.3f} m <= "
               f"initial-estimator median {np.median(with_initial):.3f} m: "
               + ("PASS" if np.median(final) <= np.median(with_initial) else "FAIL"))
        assert np.median(final) <= np.median(with_initial)

    def test_stage2_policies_with_initial_estimator_at_median(self, ten_runs):
        evolved = np.array([run["ma_einit_rmse"] for run in ten_runs])
        uniform = np.array([run["uniform_rmse"] for run in ten_runs])
        report(f"stage-2 check: evolved+initial median {np.median(evolved):.3f} m vs "
               f"uniform+initial median {np.median(uniform):.3f} m "
               f"(evolved spends {np.mean([r['ma_power'] for r in ten_runs]):.2f} W-frames vs 2.5 uniform)")
        assert np.median(evolved) <= np.median(uniform)


class TestC8ObservationFormats:
    def test_rss_pipeline_end_to_end(self):
        cfg = parse_config(preset="desk", seed=3, overrides={"observation_format": "rss"})
        assert cfg.rollout.observation_format == "rss"  # pure config switch
        result = run_full_pipeline(cfg)
        ma = MultiAgentController(result.policy, result.power, "argmax")
        ev = evaluate_method_controller(ma, result.estimator_final, cfg, decode_mode="argmax")
        report(f"criterion 8 RSS format end-to-end: rmse {ev.rmse_m:.3f} m, power {ev.mean_power:.3f}: "
               + ("PASS" if np.isfinite(ev.rmse_m) else "FAIL"))
        assert np.isfinite(ev.rmse_m)
        assert result.policy.arch.input_dim == 1


class TestC9SingleAgentVariant:
    def test_exact_power_variant_end_to_end(self, ten_runs):
        cfg = parse_config(preset="desk", seed=0)
        result = run_full_pipeline(cfg, single_agent=True)
        controller = SingleAgentController(result.policy, "argmax")
        ev = evaluate_method_controller(controller, result.estimator_final, cfg, decode_mode="argmax")
        ma_rmse = ten_runs[0]["ma_rmse"]
        report(f"criterion 9 single-agent exact power: rmse {ev.rmse_m:.3f} m vs MA {ma_rmse:.3f} m "
               f"(reported side by side), power {ev.mean_power:.3f}: "
               + ("PASS" if np.isfinite(ev.rmse_m) else "FAIL"))
        assert np.isfinite(ev.rmse_m)
        assert result.power is None


class TestC10Reproducibility:
    def test_desk_double_run_bit_identical(self, tmp_path):
        from risloc.cli import main

        outputs = []
        for name in ("runs_a", "runs_b"):
            out = tmp_path / name
            for command in ("gen-data", "train-estimator", "evolve", "retrain", "eval"):
                code = main([command, "--preset", "desk", "--out", str(out)])
                assert code == 0, command
            cfg = parse_config(preset="desk", output_dir=str(out))
            outputs.append(cfg.run_dir())
        compared = []
        for fname in ("dataset_stage1.bin", "estimator_initial.ckpt", "policy.ckpt", "power.ckpt",
                      "estimator_final.ckpt", "cosyne_stats.csv", "results.csv"):
            a = open(os.path.join(outputs[0], fname), "rb").read()
            b = open(os.path.join(outputs[1], fname), "rb").read()
            assert a == b, f"{fname} differs between identical runs"
            compared.append(fname)
        report(f"criterion 10 reproducibility: {len(compared)} artifacts bit-identical across "
               "two desk runs from one master seed: PASS")


class TestC11FingerprintSanity:
    def test_block_center_queries_within_grid_bound(self):
        cfg = parse_config(preset="desk", overrides={
            "channel": {"noise_power_dbm": -np.inf, "ricean_kappa_db": np.inf},
        })
        db = build_fingerprint_db(cfg)
        rng = derive_rng(11, 0)
        sel = rng.choice(db.n_blocks, size=300, replace=False)
        centers = db.block_centers[sel]
        controller = FixedSequenceController(db.profile_sequence, cfg.rollout.power_max_watt,
                                             db.power_sequence)
        draws = draw_episode_block(cfg.scenario, cfg.rollout, 300, rng, positions=centers)
        batch = run_episode_batch(controller, draws, cfg.scenario, cfg.rollout)
        estimates = fingerprint_localize(db, rss_sequences(batch.observations),
                                         k=cfg.fingerprint.k_neighbors)
        err = np.linalg.norm(estimates - centers, axis=1)
        report(f"criterion 11 fingerprint sanity: {len(sel)} block-center queries, max error "
               f"{err.max():.4f} m (tol 2 m): " + ("PASS" if err.max() <= 2.0 else "FAIL"))
        assert err.max() <= 2.0
