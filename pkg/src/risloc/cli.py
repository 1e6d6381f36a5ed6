"""The `risloc` experiment front-end.

Each subcommand maps to one pipeline or baseline operation and works inside
a run directory named by the config hash, refusing to mix artifacts from
different configs. Exit codes: 0 success, 2 usage/artifact error (with a
machine-readable JSON line on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from filelock import FileLock, Timeout

from . import baselines, pipeline
from .agents import (
    load_estimator,
    load_policy,
    load_power,
    read_manifest,
    save_agent,
    verify_manifest,
)
from .config import STAGE_DATASET1, STAGE_TRAIN1, ExperimentConfig, parse_config
from .cosyne import GenerationStats
from .pipeline import SWEEP_CSV_HEADER
from .rollout import (
    MultiAgentController,
    SingleAgentController,
    export_episodes_csv,
    generate_random_episodes,
    load_episodes,
    save_episodes,
)
from .util import append_csv_row, default_workers, derive_rng, sha256_file

DATASET_FILE = "dataset_stage1.bin"
ESTIMATOR_INITIAL = "estimator_initial.ckpt"
ESTIMATOR_FINAL = "estimator_final.ckpt"
POLICY_FILE = "policy.ckpt"
POWER_FILE = "power.ckpt"
SA_POLICY_FILE = "policy_single_agent.ckpt"
SA_ESTIMATOR_FILE = "estimator_single_agent.ckpt"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.json"
STATS_FILE = "cosyne_stats.csv"
RESULTS_FILE = "results.csv"
SWEEP_FILE = "sweep.csv"


class CliError(RuntimeError):
    def __init__(self, message: str, code: str = "error"):
        super().__init__(message)
        self.code = code


def _load_config(args) -> ExperimentConfig:
    return parse_config(path=args.config, preset=args.preset, seed=args.seed, output_dir=args.out)


def _run_dir(cfg: ExperimentConfig, create: bool = True) -> str:
    path = cfg.run_dir()
    if create:
        os.makedirs(path, exist_ok=True)
        cfg.dump_yaml(os.path.join(path, "config.yaml"))
    return path


def _artifact(run_dir: str, name: str) -> str:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise CliError(f"missing artifact {name} in {run_dir}; run the upstream stage first", "missing_artifact")
    return path


def _check_hash(extra: dict, cfg: ExperimentConfig, name: str) -> None:
    stored = extra.get("config_hash")
    if stored is not None and stored != cfg.config_hash():
        raise CliError(f"{name} was produced under config {stored[:12]}, current is {cfg.config_hash()[:12]}", "config_mismatch")


def _read_metrics(run_dir: str) -> dict:
    path = os.path.join(run_dir, METRICS_FILE)
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def _write_metrics(run_dir: str, metrics: dict) -> None:
    with open(os.path.join(run_dir, METRICS_FILE), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _agent_extra(cfg: ExperimentConfig, **fields) -> dict:
    extra = {"config_hash": cfg.config_hash()}
    extra.update(fields)
    return extra


def _save_estimator(path, estimator, cfg: ExperimentConfig) -> None:
    save_agent(
        path,
        "estimator",
        estimator.params,
        estimator.arch,
        _agent_extra(
            cfg,
            observation_format=estimator.observation_format,
            input_scale=estimator.input_scale,
            output_offset=list(estimator.output_offset),
            output_scale=list(estimator.output_scale),
        ),
    )


def _load_estimator_checked(path, cfg: ExperimentConfig):
    from . import nn

    _, _, extra = nn.load_params(path)
    _check_hash(extra, cfg, os.path.basename(path))
    return load_estimator(path)


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg)
    data = generate_random_episodes(
        cfg.training.stage1_dataset_size,
        cfg.scenario,
        cfg.rollout,
        derive_rng(cfg.master_seed, STAGE_DATASET1),
    )
    meta = {
        "config_hash": cfg.config_hash(),
        "n_phases": cfg.scenario.phase_set.n,
        "observation_format": cfg.rollout.observation_format,
        "power_max_watt": cfg.rollout.power_max_watt,
    }
    path = os.path.join(run_dir, DATASET_FILE)
    save_episodes(path, data, meta)
    if args.csv:
        export_episodes_csv(os.path.join(run_dir, "dataset_stage1.csv"), data)
    print(f"wrote {data.batch} episodes to {path}")
    return 0


def cmd_train_estimator(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg)
    data, header = load_episodes(_artifact(run_dir, DATASET_FILE))
    _check_hash(header, cfg, DATASET_FILE)
    estimator, history = pipeline.train_position_estimator(
        data.observations,
        data.positions,
        cfg.scenario,
        cfg.rollout,
        cfg.networks,
        cfg.training,
        derive_rng(cfg.master_seed, STAGE_TRAIN1),
    )
    path = os.path.join(run_dir, ESTIMATOR_INITIAL)
    _save_estimator(path, estimator, cfg)
    metrics = _read_metrics(run_dir)
    metrics["stage1"] = {
        "final_train_loss": history.final_train_loss,
        "final_val_loss": history.final_val_loss,
        "best_epoch": history.best_epoch,
    }
    _write_metrics(run_dir, metrics)
    print(f"stage-1 estimator saved to {path} "
          f"(train loss {history.final_train_loss:.6f}, val loss {history.final_val_loss:.6f})")
    return 0


def cmd_evolve(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg)
    estimator = _load_estimator_checked(_artifact(run_dir, ESTIMATOR_INITIAL), cfg)
    stats_path = os.path.join(run_dir, STATS_FILE)
    if os.path.exists(stats_path):
        os.remove(stats_path)

    def sink(stats):
        append_csv_row(stats_path, GenerationStats.CSV_HEADER, stats.csv_values())

    spec = pipeline.build_individual_spec(cfg.networks, cfg.scenario, cfg.rollout)

    def checkpoint_cb(gen, best_vector, best_fitness):
        if best_vector is None:
            return
        snap_policy, snap_power = spec.build_agents(best_vector)
        save_agent(
            os.path.join(run_dir, f"evolve_best_gen{gen:04d}_policy.ckpt"),
            "policy", snap_policy.params, snap_policy.arch,
            _agent_extra(cfg, n_ris=snap_policy.n_ris, n_phases=snap_policy.n_phases,
                         observation_format=snap_policy.observation_format,
                         input_scale=snap_policy.input_scale, generation=gen,
                         best_fitness=best_fitness),
        )
        save_agent(
            os.path.join(run_dir, f"evolve_best_gen{gen:04d}_power.ckpt"),
            "power", snap_power.params, snap_power.arch,
            _agent_extra(cfg, power_max_watt=snap_power.power_max_watt, generation=gen),
        )

    policy, power, best_fitness, _ = pipeline.stage2_evolve_policies(
        estimator, cfg, single_agent=False, stats_sink=sink,
        checkpoint_cb=checkpoint_cb if cfg.ne.checkpoint_every > 0 else None,
        workers=args.workers,
    )
    policy_path = os.path.join(run_dir, POLICY_FILE)
    save_agent(
        policy_path,
        "policy",
        policy.params,
        policy.arch,
        _agent_extra(
            cfg,
            n_ris=policy.n_ris,
            n_phases=policy.n_phases,
            observation_format=policy.observation_format,
            input_scale=policy.input_scale,
        ),
    )
    power_path = os.path.join(run_dir, POWER_FILE)
    save_agent(power_path, "power", power.params, power.arch, _agent_extra(cfg, power_max_watt=power.power_max_watt))
    metrics = _read_metrics(run_dir)
    metrics["stage2"] = {"best_fitness": best_fitness}
    _write_metrics(run_dir, metrics)
    print(f"evolved policies saved (best fitness {best_fitness:.4f}); stats in {stats_path}")
    return 0


def cmd_retrain(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg)
    policy = load_policy(_artifact(run_dir, POLICY_FILE))
    power = load_power(_artifact(run_dir, POWER_FILE))
    initial = _load_estimator_checked(_artifact(run_dir, ESTIMATOR_INITIAL), cfg)
    estimator, history = pipeline.stage3_retrain_estimator(policy, power, cfg, initial_estimator=initial)
    path = os.path.join(run_dir, ESTIMATOR_FINAL)
    _save_estimator(path, estimator, cfg)
    metrics = _read_metrics(run_dir)
    metrics["stage3"] = {
        "final_train_loss": history.final_train_loss,
        "final_val_loss": history.final_val_loss,
        "best_epoch": history.best_epoch,
    }
    _write_metrics(run_dir, metrics)
    print(f"stage-3 estimator saved to {path}")
    return 0


def _append_result(run_dir: str, row) -> None:
    append_csv_row(os.path.join(run_dir, RESULTS_FILE), SWEEP_CSV_HEADER, row.csv_values())


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg)
    policy = load_policy(_artifact(run_dir, POLICY_FILE))
    power = load_power(_artifact(run_dir, POWER_FILE))
    estimator = _load_estimator_checked(_artifact(run_dir, ESTIMATOR_FINAL), cfg)
    controller = MultiAgentController(policy, power, cfg.rollout.decode_mode)
    ev = pipeline.evaluate_method_controller(controller, estimator, cfg)
    row = pipeline.SweepRow(
        method="ma" if cfg.rollout.decode_mode == "argmax" else "ma_sample",
        n_ris=cfg.scenario.geometry.n_ris,
        noise_dbm=cfg.scenario.channel.noise_power_dbm,
        observation_format=cfg.rollout.observation_format,
        rmse_m=ev.rmse_m,
        mean_power=ev.mean_power,
        budget_ok=bool(ev.mean_power <= 1.05 * cfg.ne.power_budget),
        seed=cfg.master_seed,
    )
    _append_result(run_dir, row)
    metrics = _read_metrics(run_dir)
    metrics["eval"] = {
        "rmse_m": ev.rmse_m,
        "mean_power": ev.mean_power,
        "decode_mode": cfg.rollout.decode_mode,
        "eval_episodes": cfg.training.eval_episodes,
        "checkpoints": {
            name: sha256_file(os.path.join(run_dir, name))
            for name in (POLICY_FILE, POWER_FILE, ESTIMATOR_FINAL)
        },
    }
    _write_metrics(run_dir, metrics)
    from .agents import write_manifest

    write_manifest(
        os.path.join(run_dir, MANIFEST_FILE),
        cfg.config_hash(),
        {
            "policy": os.path.join(run_dir, POLICY_FILE),
            "power": os.path.join(run_dir, POWER_FILE),
            "estimator": os.path.join(run_dir, ESTIMATOR_FINAL),
        },
        metrics={"rmse_m": ev.rmse_m, "mean_power": ev.mean_power},
    )
    print(f"rmse_m={ev.rmse_m!r} mean_power={ev.mean_power!r}")
    return 0


def cmd_replay(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg, create=False)
    if not os.path.isdir(run_dir):
        raise CliError(f"run directory {run_dir} does not exist", "missing_artifact")
    manifest = read_manifest(_artifact(run_dir, MANIFEST_FILE))
    if manifest["config_hash"] != cfg.config_hash():
        raise CliError("manifest belongs to a different config", "config_mismatch")
    bad = verify_manifest(manifest, run_dir)
    if bad:
        raise CliError(f"checkpoint hash mismatch for: {', '.join(bad)}", "tampered_checkpoint")
    metrics = _read_metrics(run_dir)
    logged = metrics.get("eval")
    if logged is None:
        raise CliError("no logged evaluation to replay; run `eval` first", "missing_artifact")
    policy = load_policy(os.path.join(run_dir, POLICY_FILE))
    power = load_power(os.path.join(run_dir, POWER_FILE))
    estimator = load_estimator(os.path.join(run_dir, ESTIMATOR_FINAL))
    controller = MultiAgentController(policy, power, logged["decode_mode"])
    ev = pipeline.evaluate_method_controller(controller, estimator, cfg, decode_mode=logged["decode_mode"])
    if ev.rmse_m != logged["rmse_m"] or ev.mean_power != logged["mean_power"]:
        raise CliError(
            f"replay mismatch: rmse {ev.rmse_m!r} vs logged {logged['rmse_m']!r}",
            "replay_mismatch",
        )
    print(f"replay ok: rmse_m={ev.rmse_m!r} mean_power={ev.mean_power!r}")
    return 0


def cmd_baseline(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg)
    if args.scheme == "fingerprint":
        db = baselines.build_fingerprint_db(cfg)
        baselines.save_fingerprint_db(os.path.join(run_dir, "fingerprints.bin"), db)
        ev = baselines.evaluate_fingerprint(db, cfg)
        row = _method_row(cfg, "fingerprint", ev)
    elif args.scheme == "supervised":
        model, history = baselines.train_supervised_baseline(cfg)
        save_agent(
            os.path.join(run_dir, "supervised.ckpt"),
            "supervised",
            model.params,
            model.arch,
            _agent_extra(
                cfg,
                observation_format=model.observation_format,
                input_scale=model.input_scale,
                output_offset=list(model.output_offset),
                output_scale=list(model.output_scale),
            ),
        )
        row = pipeline.run_method(cfg, "supervised", workers=args.workers)
    elif args.scheme == "single-agent":
        estimator = _load_estimator_checked(_artifact(run_dir, ESTIMATOR_INITIAL), cfg)
        policy, _, best_fitness, _ = pipeline.stage2_evolve_policies(
            estimator, cfg, single_agent=True, workers=args.workers
        )
        sa_estimator, _ = pipeline.stage3_retrain_estimator(policy, None, cfg, single_agent=True)
        save_agent(
            os.path.join(run_dir, SA_POLICY_FILE),
            "policy_exact_power",
            policy.params,
            policy.arch,
            _agent_extra(
                cfg,
                n_ris=policy.n_ris,
                n_phases=policy.n_phases,
                observation_format=policy.observation_format,
                input_scale=policy.input_scale,
                power_max_watt=policy.power_max_watt,
            ),
        )
        _save_estimator(os.path.join(run_dir, SA_ESTIMATOR_FILE), sa_estimator, cfg)
        controller = SingleAgentController(policy, "argmax")
        ev = pipeline.evaluate_method_controller(controller, sa_estimator, cfg, decode_mode="argmax")
        row = _method_row(cfg, "single_agent", ev)
    elif args.scheme == "uniform":
        estimator = _load_estimator_checked(_artifact(run_dir, ESTIMATOR_INITIAL), cfg)
        ev = pipeline.uniform_power_reference(estimator, cfg)
        row = _method_row(cfg, "uniform", ev)
    else:
        raise CliError(f"unknown baseline {args.scheme!r}")
    _append_result(run_dir, row)
    print(f"{row.method}: rmse_m={row.rmse_m!r} mean_power={row.mean_power!r}")
    return 0


def _method_row(cfg: ExperimentConfig, method: str, ev) -> pipeline.SweepRow:
    return pipeline.SweepRow(
        method=method,
        n_ris=cfg.scenario.geometry.n_ris,
        noise_dbm=cfg.scenario.channel.noise_power_dbm,
        observation_format=cfg.rollout.observation_format,
        rmse_m=ev.rmse_m,
        mean_power=ev.mean_power,
        budget_ok=bool(ev.mean_power <= 1.05 * cfg.ne.power_budget),
        seed=cfg.master_seed,
    )


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg)
    path = os.path.join(run_dir, SWEEP_FILE)
    if os.path.exists(path):
        os.remove(path)

    def sink(row):
        append_csv_row(path, SWEEP_CSV_HEADER, row.csv_values())

    rows = pipeline.run_sweep(cfg, row_sink=sink, workers=args.workers)
    print(f"sweep wrote {len(rows)} rows to {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-estimator": cmd_train_estimator,
    "evolve": cmd_evolve,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "sweep": cmd_sweep,
    "replay": cmd_replay,
}

MUTATING = {"gen-data", "train-estimator", "evolve", "retrain", "eval", "baseline", "sweep"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="risloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config overriding the preset")
        p.add_argument("--preset", default="paper", choices=["desk", "paper"], help="base preset")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory (env RISLOC_OUTPUT_DIR)")
        p.add_argument("--workers", type=int, default=default_workers(), help="parallel fitness workers (env RISLOC_WORKERS)")

    p = sub.add_parser("gen-data", help="generate the stage-1 random episode dataset")
    common(p)
    p.add_argument("--csv", action="store_true", help="also export an inspection CSV")
    common(sub.add_parser("train-estimator", help="stage 1: train the initial estimator"))
    common(sub.add_parser("evolve", help="stage 2: evolve policy and power networks"))
    common(sub.add_parser("retrain", help="stage 3: retrain the estimator under learned policies"))
    common(sub.add_parser("eval", help="evaluate the trained triple on held-out episodes"))
    p = sub.add_parser("baseline", help="run one baseline scheme")
    p.add_argument("scheme", choices=["fingerprint", "supervised", "single-agent", "uniform"])
    common(p)
    common(sub.add_parser("sweep", help="full sweep over RIS sizes / noise levels and methods"))
    common(sub.add_parser("replay", help="re-evaluate logged checkpoints and verify the metrics"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        handler = COMMANDS[args.command]
        if args.command in MUTATING:
            run_dir = cfg.run_dir()
            os.makedirs(run_dir, exist_ok=True)
            lock = FileLock(os.path.join(run_dir, ".lock"), timeout=0)
            try:
                with lock:
                    return handler(cfg, args)
            except Timeout:
                raise CliError(f"run directory {run_dir} is in use by another invocation", "locked")
        return handler(cfg, args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # config errors carry field paths in the message
        print(json.dumps({"error": exc.__class__.__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
