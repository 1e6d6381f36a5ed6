"""Experiment configuration: presets, YAML parsing, validation, run naming.

A config file only needs the fields it overrides; everything else comes from
the chosen preset (`paper` reproduces the published setup, `desk` is the
small CI-friendly variant). All unit conversions (dBm to watts, dB to linear)
happen here, so the rest of the code never sees dB values for powers.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .channel import ChannelParams, PhaseSet, ScenarioGeometry, dbm_to_watt
from .cosyne import NEConfig
from .rollout import RolloutConfig, Scenario

# Seed-derivation stage ids: every random stream is derive_rng(master_seed,
# stage, task...) so parallel scheduling cannot change any draw.
STAGE_DATASET1 = 1
STAGE_TRAIN1 = 2
# STAGE_EVOLVE = 3 lives in cosyne
STAGE_COLLECT3 = 4
STAGE_TRAIN3 = 5
STAGE_EVAL = 6
STAGE_SUP_DATA = 7
STAGE_SUP_TRAIN = 8
STAGE_FP_SEQUENCE = 9
STAGE_FP_DB = 10
STAGE_SA_EVOLVE = 12
STAGE_SA_COLLECT3 = 13
STAGE_SA_TRAIN3 = 14


class ConfigError(ValueError):
    """Raised with one line per offending field path."""


@dataclass
class NetworkSizes:
    policy_lstm: tuple = (512, 512)
    ris_head_hidden: int = 128
    bit_head_hidden: int = 32
    power_lstm: tuple = (512, 512)
    power_head_hidden: int = 64
    estimator_lstm: tuple = (512, 512)
    estimator_head_hidden: tuple = (128, 128)
    supervised_hidden: tuple = (400, 400, 400, 400)


@dataclass
class TrainingPlan:
    stage1_dataset_size: int = 50000
    stage3_dataset_size: int = 50000
    supervised_dataset_size: int = 70000
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    validation_fraction: float = 0.05
    warm_start_stage3: bool = False
    eval_episodes: int = 2000


@dataclass
class SweepPlan:
    n_ris: tuple = (225, 400, 625, 900, 1225, 1600)
    noise_dbm: tuple = (-60.0,)
    methods: tuple = ("ma", "single_agent", "supervised", "fingerprint", "uniform")


@dataclass
class FingerprintConfig:
    samples_per_block: int = 5
    block_size_m: float = 1.0
    query_power_mode: str = "fixed"  # fixed | matched (ablation)
    k_neighbors: int = 5


@dataclass
class ExperimentConfig:
    raw: dict
    master_seed: int
    output_dir: str
    scenario: Scenario
    rollout: RolloutConfig
    ne: NEConfig
    networks: NetworkSizes
    training: TrainingPlan
    sweep: SweepPlan
    fingerprint: FingerprintConfig

    def config_hash(self) -> str:
        hashed = {k: v for k, v in self.raw.items() if k != "output_dir"}
        blob = json.dumps(hashed, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def run_dir(self) -> str:
        return os.path.join(self.output_dir, self.config_hash()[:12])

    def dump_yaml(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=True)


PAPER_PRESET = {
    "master_seed": 1,
    "output_dir": "runs",
    "power_scaling": "sqrt",
    "observation_format": "stacked",
    "scenario": {
        "bs_position": [40.0, -40.0, 10.0],
        "ris_origin": [0.0, 0.0, 0.0],
        "n_ris": 400,
        "element_spacing": None,  # half wavelength
        "ue_center": [20.0, 20.0],
        "ue_half": [15.0, 20.0],
        "ue_z": -20.0,
    },
    "channel": {
        "carrier_frequency_hz": 3.5e9,
        "ricean_kappa_db": 10.0,
        "direct_extra_attenuation_db": 10.0,
        "noise_power_dbm": -60.0,
    },
    "phase_levels": [0.0, 1.0],
    "rollout": {
        "horizon": 10,
        "power_max_dbm": 30.0,
        "initial_power_dbm": 30.0,
        "decode_mode": "argmax",
        "episode_static_channel": False,
    },
    "ne": {
        "population_size": 50,
        "generations": 100,
        "mutation_prob": 0.5,
        "mutation_std": 0.5,
        "episodes_per_eval": 64,
        "power_budget": None,  # 0.5 * horizon * power_max
        "elite_count": 2,
        "fitness_decode_mode": "sample",
        "checkpoint_every": 0,
        "confirmation_episodes": None,
    },
    "networks": {
        "policy_lstm": [512, 512],
        "ris_head_hidden": 128,
        "bit_head_hidden": 32,
        "power_lstm": [512, 512],
        "power_head_hidden": 64,
        "estimator_lstm": [512, 512],
        "estimator_head_hidden": [128, 128],
        "supervised_hidden": [400, 400, 400, 400],
    },
    "training": {
        "stage1_dataset_size": 50000,
        "stage3_dataset_size": 50000,
        "supervised_dataset_size": 70000,
        "epochs": 30,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "validation_fraction": 0.05,
        "warm_start_stage3": False,
        "eval_episodes": 2000,
    },
    "sweep": {
        "n_ris": [225, 400, 625, 900, 1225, 1600],
        "noise_dbm": [-60.0],
        "methods": ["ma", "single_agent", "supervised", "fingerprint", "uniform"],
    },
    "fingerprint": {
        "samples_per_block": 5,
        "block_size_m": 1.0,
        "query_power_mode": "fixed",
        "k_neighbors": 5,
    },
}

DESK_PRESET_OVERRIDES = {
    "scenario": {"n_ris": 16},
    # Quieter noise floor than the paper setup: with a 4x4 RIS and T=5 the
    # direct path at -60 dBm carries almost no position information, so the
    # desk scenario would be unlearnable for every method.
    "channel": {"noise_power_dbm": -80.0},
    "rollout": {"horizon": 5},
    "ne": {"population_size": 20, "generations": 50, "episodes_per_eval": 32},
    "networks": {
        "policy_lstm": [32, 32],
        "ris_head_hidden": 32,
        "bit_head_hidden": 16,
        "power_lstm": [32, 32],
        "power_head_hidden": 16,
        "estimator_lstm": [32, 32],
        "estimator_head_hidden": [16, 16],
        "supervised_hidden": [128, 128, 128, 128],
    },
    "training": {
        "stage1_dataset_size": 5000,
        "stage3_dataset_size": 5000,
        "supervised_dataset_size": 5000,
        "eval_episodes": 1000,
    },
    "sweep": {"n_ris": [16, 64], "noise_dbm": [-60.0], "methods": ["ma", "supervised", "uniform"]},
}

PRESETS = {"paper": None, "desk": None}  # filled below


def _deep_merge(base: dict, overrides: dict) -> dict:
    out = {}
    for key, value in base.items():
        out[key] = json.loads(json.dumps(value))  # deep copy of plain data
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


PRESETS["paper"] = PAPER_PRESET
PRESETS["desk"] = _deep_merge(PAPER_PRESET, DESK_PRESET_OVERRIDES)


def _num(raw, path, errors, minimum=None, maximum=None):
    try:
        value = float(raw)
    except (TypeError, ValueError):
        errors.append(f"{path}: expected a number, got {raw!r}")
        return 0.0
    if not math.isfinite(value):
        errors.append(f"{path}: must be finite")
    if minimum is not None and value < minimum:
        errors.append(f"{path}: must be >= {minimum}")
    if maximum is not None and value > maximum:
        errors.append(f"{path}: must be <= {maximum}")
    return value


def _int(raw, path, errors, minimum=None):
    try:
        value = int(raw)
    except (TypeError, ValueError):
        errors.append(f"{path}: expected an integer, got {raw!r}")
        return 0
    if minimum is not None and value < minimum:
        errors.append(f"{path}: must be >= {minimum}")
    return value


def _choice(raw, path, errors, options):
    if raw not in options:
        errors.append(f"{path}: must be one of {sorted(options)}, got {raw!r}")
    return raw


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a fully merged config dict and construct the typed objects."""
    errors: list[str] = []
    sc, ch, ro, ne, nets, tr, sw, fp = (
        raw["scenario"],
        raw["channel"],
        raw["rollout"],
        raw["ne"],
        raw["networks"],
        raw["training"],
        raw["sweep"],
        raw["fingerprint"],
    )

    master_seed = _int(raw.get("master_seed"), "master_seed", errors, minimum=0)
    _choice(raw.get("power_scaling"), "power_scaling", errors, {"sqrt", "literal"})
    _choice(raw.get("observation_format"), "observation_format", errors, {"stacked", "rss"})

    n_ris = _int(sc.get("n_ris"), "scenario.n_ris", errors, minimum=1)
    side = math.isqrt(max(n_ris, 1))
    if side * side != n_ris:
        errors.append(f"scenario.n_ris: must be a perfect square (square RIS grid), got {n_ris}")
    carrier = _num(ch.get("carrier_frequency_hz"), "channel.carrier_frequency_hz", errors, minimum=1.0)
    spacing = sc.get("element_spacing")
    if spacing is None:
        spacing = 0.5 * 299_792_458.0 / carrier if carrier > 0 else 1.0
    else:
        spacing = _num(spacing, "scenario.element_spacing", errors, minimum=1e-9)
    ue_half = sc.get("ue_half", [0.0, 0.0])
    half_x = _num(ue_half[0], "scenario.ue_half[0]", errors, minimum=0.0)
    half_y = _num(ue_half[1], "scenario.ue_half[1]", errors, minimum=0.0)

    phase_levels = raw.get("phase_levels") or []
    if len(phase_levels) < 2:
        errors.append("phase_levels: at least two levels required")
    if len(set(phase_levels)) != len(phase_levels):
        errors.append("phase_levels: levels must be distinct")
    for i, level in enumerate(phase_levels):
        _num(level, f"phase_levels[{i}]", errors, minimum=0.0)
        if isinstance(level, (int, float)) and not (0.0 <= float(level) < 2.0):
            errors.append(f"phase_levels[{i}]: must lie in [0, 2)")

    horizon = _int(ro.get("horizon"), "rollout.horizon", errors, minimum=1)
    power_max_dbm = _num(ro.get("power_max_dbm"), "rollout.power_max_dbm", errors)
    initial_power_dbm = _num(ro.get("initial_power_dbm"), "rollout.initial_power_dbm", errors)
    power_max_watt = dbm_to_watt(power_max_dbm)
    initial_power_watt = dbm_to_watt(initial_power_dbm)
    if not 0.0 <= initial_power_watt <= power_max_watt:
        errors.append("rollout.initial_power_dbm: initial power outside [0, power_max]")
    _choice(ro.get("decode_mode"), "rollout.decode_mode", errors, {"sample", "argmax"})

    population = _int(ne.get("population_size"), "ne.population_size", errors, minimum=4)
    if population // 4 < 2:
        errors.append("ne.population_size: floor(L/4) must be >= 2")
    generations = _int(ne.get("generations"), "ne.generations", errors, minimum=0)
    mutation_prob = _num(ne.get("mutation_prob"), "ne.mutation_prob", errors, minimum=0.0, maximum=1.0)
    mutation_std = _num(ne.get("mutation_std"), "ne.mutation_std", errors, minimum=0.0)
    episodes_per_eval = _int(ne.get("episodes_per_eval"), "ne.episodes_per_eval", errors, minimum=1)
    budget = ne.get("power_budget")
    if budget is None:
        budget = 0.5 * horizon * power_max_watt
    else:
        budget = _num(budget, "ne.power_budget", errors, minimum=0.0)
    elite_count = _int(ne.get("elite_count"), "ne.elite_count", errors, minimum=0)
    if elite_count >= population:
        errors.append("ne.elite_count: must be smaller than the population")
    _choice(ne.get("fitness_decode_mode"), "ne.fitness_decode_mode", errors, {"sample", "argmax"})
    confirmation = ne.get("confirmation_episodes")
    if confirmation is not None:
        confirmation = _int(confirmation, "ne.confirmation_episodes", errors, minimum=1)

    batch_size = _int(tr.get("batch_size"), "training.batch_size", errors, minimum=1)
    for name in ("stage1_dataset_size", "stage3_dataset_size", "supervised_dataset_size"):
        size = _int(tr.get(name), f"training.{name}", errors, minimum=1)
        if size < batch_size:
            errors.append(f"training.{name}: must be >= batch_size")
    _num(tr.get("learning_rate"), "training.learning_rate", errors, minimum=1e-12)
    _num(tr.get("validation_fraction"), "training.validation_fraction", errors, minimum=0.0, maximum=0.5)
    _int(tr.get("epochs"), "training.epochs", errors, minimum=1)
    _int(tr.get("eval_episodes"), "training.eval_episodes", errors, minimum=1)

    for i, value in enumerate(sw.get("n_ris", [])):
        m = _int(value, f"sweep.n_ris[{i}]", errors, minimum=1)
        s = math.isqrt(max(m, 1))
        if s * s != m:
            errors.append(f"sweep.n_ris[{i}]: must be a perfect square, got {m}")
    known_methods = {"ma", "ma_sample", "single_agent", "single_agent_sample", "supervised", "fingerprint", "uniform"}
    for i, meth in enumerate(sw.get("methods", [])):
        _choice(meth, f"sweep.methods[{i}]", errors, known_methods)

    _int(fp.get("samples_per_block"), "fingerprint.samples_per_block", errors, minimum=1)
    _num(fp.get("block_size_m"), "fingerprint.block_size_m", errors, minimum=1e-6)
    _choice(fp.get("query_power_mode"), "fingerprint.query_power_mode", errors, {"matched", "fixed"})
    _int(fp.get("k_neighbors"), "fingerprint.k_neighbors", errors, minimum=1)

    if errors:
        raise ConfigError("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))

    geometry = ScenarioGeometry(
        bs_position=np.asarray([float(v) for v in sc["bs_position"]]),
        ris_origin=np.asarray([float(v) for v in sc["ris_origin"]]),
        ris_rows=side,
        ris_cols=side,
        element_spacing=spacing,
        ue_center_x=float(sc["ue_center"][0]),
        ue_half_x=half_x,
        ue_center_y=float(sc["ue_center"][1]),
        ue_half_y=half_y,
        ue_z=float(sc["ue_z"]),
    )
    channel = ChannelParams(
        carrier_frequency_hz=carrier,
        ricean_kappa_db=_num(ch.get("ricean_kappa_db"), "channel.ricean_kappa_db", errors),
        direct_extra_attenuation_db=_num(
            ch.get("direct_extra_attenuation_db"), "channel.direct_extra_attenuation_db", errors
        ),
        noise_power_dbm=_num(ch.get("noise_power_dbm"), "channel.noise_power_dbm", errors),
    )
    scenario = Scenario(
        geometry=geometry,
        channel=channel,
        phase_set=PhaseSet(tuple(float(v) for v in phase_levels)),
        power_scaling=raw["power_scaling"],
    )
    rollout_cfg = RolloutConfig(
        horizon=horizon,
        initial_power_watt=initial_power_watt,
        power_max_watt=power_max_watt,
        observation_format=raw["observation_format"],
        decode_mode=ro["decode_mode"],
        episode_static_channel=bool(ro.get("episode_static_channel", False)),
    )
    ne_cfg = NEConfig(
        population_size=population,
        generations=generations,
        mutation_prob=mutation_prob,
        mutation_std=mutation_std,
        episodes_per_eval=episodes_per_eval,
        power_budget=budget,
        elite_count=elite_count,
        fitness_decode_mode=ne["fitness_decode_mode"],
        checkpoint_every=_int(ne.get("checkpoint_every", 0), "ne.checkpoint_every", errors, minimum=0),
        confirmation_episodes=confirmation,
    )
    networks = NetworkSizes(
        policy_lstm=tuple(int(v) for v in nets["policy_lstm"]),
        ris_head_hidden=int(nets["ris_head_hidden"]),
        bit_head_hidden=int(nets["bit_head_hidden"]),
        power_lstm=tuple(int(v) for v in nets["power_lstm"]),
        power_head_hidden=int(nets["power_head_hidden"]),
        estimator_lstm=tuple(int(v) for v in nets["estimator_lstm"]),
        estimator_head_hidden=tuple(int(v) for v in nets["estimator_head_hidden"]),
        supervised_hidden=tuple(int(v) for v in nets["supervised_hidden"]),
    )
    training = TrainingPlan(
        stage1_dataset_size=int(tr["stage1_dataset_size"]),
        stage3_dataset_size=int(tr["stage3_dataset_size"]),
        supervised_dataset_size=int(tr["supervised_dataset_size"]),
        epochs=int(tr["epochs"]),
        batch_size=batch_size,
        learning_rate=float(tr["learning_rate"]),
        validation_fraction=float(tr["validation_fraction"]),
        warm_start_stage3=bool(tr.get("warm_start_stage3", False)),
        eval_episodes=int(tr["eval_episodes"]),
    )
    sweep = SweepPlan(
        n_ris=tuple(int(v) for v in sw["n_ris"]),
        noise_dbm=tuple(float(v) for v in sw["noise_dbm"]),
        methods=tuple(sw["methods"]),
    )
    fingerprint = FingerprintConfig(
        samples_per_block=int(fp["samples_per_block"]),
        block_size_m=float(fp["block_size_m"]),
        query_power_mode=fp["query_power_mode"],
        k_neighbors=int(fp["k_neighbors"]),
    )
    return ExperimentConfig(
        raw=raw,
        master_seed=master_seed,
        output_dir=str(raw.get("output_dir", "runs")),
        scenario=scenario,
        rollout=rollout_cfg,
        ne=ne_cfg,
        networks=networks,
        training=training,
        sweep=sweep,
        fingerprint=fingerprint,
    )


def parse_config(
    path=None,
    preset: str = "paper",
    seed: int | None = None,
    output_dir: str | None = None,
    overrides: dict | None = None,
) -> ExperimentConfig:
    """Merge preset <- file <- explicit overrides, validate and build."""
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    raw = PRESETS[preset]
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _deep_merge(raw, loaded)
    else:
        raw = _deep_merge(raw, {})
    if overrides:
        raw = _deep_merge(raw, overrides)
    if seed is not None:
        raw["master_seed"] = int(seed)
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    env_out = os.environ.get("RISLOC_OUTPUT_DIR")
    if env_out and output_dir is None:
        raw["output_dir"] = env_out
    return build_config(raw)


def config_with(cfg: ExperimentConfig, **section_overrides) -> ExperimentConfig:
    """Derive a config with nested overrides, e.g. scenario={'n_ris': 64}."""
    return build_config(_deep_merge(cfg.raw, section_overrides))
