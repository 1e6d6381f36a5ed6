"""Three-stage training: supervised estimator, policy evolution, retraining.

Stage 1 fits an initial position estimator on random sensing episodes.
Stage 2 evolves the policy/power pair against that frozen estimator.
Stage 3 retrains a fresh estimator on episodes collected under the learned
policies. Sweeps rerun the whole thing per grid point and evaluate every
method on a shared block of held-out episode seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import baselines, cosyne, nn
from .agents import (
    PositionEstimator,
    input_scale_for,
    make_estimator_arch,
    make_policy_arch,
    make_power_arch,
    observation_dim,
)
from .config import (
    STAGE_COLLECT3,
    STAGE_DATASET1,
    STAGE_EVAL,
    STAGE_SA_COLLECT3,
    STAGE_SA_EVOLVE,
    STAGE_SA_TRAIN3,
    STAGE_TRAIN1,
    STAGE_TRAIN3,
    ExperimentConfig,
    NetworkSizes,
    TrainingPlan,
    config_with,
)
from .cosyne import STAGE_EVOLVE, IndividualSpec
from .rollout import (
    MultiAgentController,
    RandomController,
    RolloutConfig,
    Scenario,
    SingleAgentController,
    evaluate_controller,
    generate_episodes,
    generate_random_episodes,
    target_normalization,
)
from .util import derive_rng


class PipelineError(RuntimeError):
    pass


def build_individual_spec(
    networks: NetworkSizes,
    scenario: Scenario,
    rollout_cfg: RolloutConfig,
    single_agent: bool = False,
) -> IndividualSpec:
    obs_dim = observation_dim(rollout_cfg.observation_format)
    policy_arch = make_policy_arch(
        obs_dim,
        networks.policy_lstm,
        networks.ris_head_hidden,
        networks.bit_head_hidden,
        scenario.geometry.n_ris,
        scenario.phase_set.n,
    )
    power_arch = None if single_agent else make_power_arch(networks.power_lstm, networks.power_head_hidden)
    return IndividualSpec(
        policy_arch=policy_arch,
        power_arch=power_arch,
        n_ris=scenario.geometry.n_ris,
        n_phases=scenario.phase_set.n,
        observation_format=rollout_cfg.observation_format,
        input_scale=input_scale_for(scenario.channel.noise_power_watt),
        power_max_watt=rollout_cfg.power_max_watt,
    )


@dataclass
class TrainingHistory:
    train_losses: list
    val_losses: list
    best_epoch: int

    @property
    def final_train_loss(self) -> float:
        return self.train_losses[-1]

    @property
    def final_val_loss(self) -> float:
        return self.val_losses[-1] if self.val_losses else float("nan")


def _estimator_val_loss(params, arch, enc_val, targets_val) -> float:
    views = nn.ParamViews(arch, params)
    h_seq, _ = nn.lstm_forward(views, enc_val)
    pred = nn.feed_forward(views, 0, h_seq.mean(axis=0))
    return nn.mse_loss(pred, targets_val)


def train_position_estimator(
    observations: np.ndarray,
    positions: np.ndarray,
    scenario: Scenario,
    rollout_cfg: RolloutConfig,
    networks: NetworkSizes,
    plan: TrainingPlan,
    rng: np.random.Generator,
    initial_params: np.ndarray | None = None,
):
    """Minibatch-Adam MSE training of the recurrent estimator.

    observations is (T, N) complex, positions (N, 3). Targets are trained in
    normalized coordinates; the returned estimator denormalizes on predict.
    Keeps the parameters of the best validation epoch.
    """
    obs_dim = observation_dim(rollout_cfg.observation_format)
    arch = make_estimator_arch(obs_dim, networks.estimator_lstm, networks.estimator_head_hidden)
    offset, scale = target_normalization(scenario)
    input_scale = input_scale_for(scenario.channel.noise_power_watt)

    proto = PositionEstimator(
        params=np.zeros(nn.param_count(arch)),
        arch=arch,
        observation_format=rollout_cfg.observation_format,
        input_scale=input_scale,
        output_offset=offset,
        output_scale=scale,
    )
    enc = proto.encode(observations)
    targets = proto.normalize_targets(np.asarray(positions, dtype=float))

    n_total = targets.shape[0]
    perm = rng.permutation(n_total)
    n_val = int(round(plan.validation_fraction * n_total))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise PipelineError("no training samples left after the validation split")

    params = nn.init_params(arch, rng) if initial_params is None else initial_params.copy()
    state = nn.AdamState(learning_rate=plan.learning_rate)
    best_params = params.copy()
    best_val = np.inf
    best_epoch = -1
    train_losses, val_losses = [], []

    for epoch in range(plan.epochs):
        order = rng.permutation(train_idx.size)
        epoch_loss = 0.0
        for start in range(0, train_idx.size, plan.batch_size):
            rows = train_idx[order[start : start + plan.batch_size]]
            try:
                loss, grad = nn.backward_bptt(params, arch, enc[:, rows], targets[rows])
            except FloatingPointError as exc:
                raise PipelineError(f"estimator training diverged at epoch {epoch}: {exc}") from exc
            params = nn.adam_step(params, grad, state)
            epoch_loss += loss * rows.size
        train_losses.append(epoch_loss / train_idx.size)
        if val_idx.size:
            val_loss = _estimator_val_loss(params, arch, enc[:, val_idx], targets[val_idx])
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch
                best_params = params.copy()
        else:
            best_params, best_epoch = params.copy(), epoch
    estimator = replace(proto, params=best_params)
    return estimator, TrainingHistory(train_losses, val_losses, best_epoch)


def stage1_train_initial_estimator(cfg: ExperimentConfig):
    """Train the initial estimator on randomly sensed episodes."""
    data = generate_random_episodes(
        cfg.training.stage1_dataset_size,
        cfg.scenario,
        cfg.rollout,
        derive_rng(cfg.master_seed, STAGE_DATASET1),
    )
    estimator, history = train_position_estimator(
        data.observations,
        data.positions,
        cfg.scenario,
        cfg.rollout,
        cfg.networks,
        cfg.training,
        derive_rng(cfg.master_seed, STAGE_TRAIN1),
    )
    return estimator, history


def stage2_evolve_policies(
    estimator: PositionEstimator,
    cfg: ExperimentConfig,
    single_agent: bool = False,
    stats_sink=None,
    checkpoint_cb=None,
    workers=None,
):
    """Evolve the sensing/power networks against the frozen estimator."""
    spec = build_individual_spec(cfg.networks, cfg.scenario, cfg.rollout, single_agent)
    key = (STAGE_SA_EVOLVE,) if single_agent else (STAGE_EVOLVE,)
    best, best_fitness, stats = cosyne.evolve(
        cfg.ne,
        spec,
        estimator,
        cfg.scenario,
        cfg.rollout,
        cfg.master_seed,
        key=key,
        stats_sink=stats_sink,
        checkpoint_cb=checkpoint_cb,
        workers=workers,
    )
    policy, power = spec.build_agents(best)
    return policy, power, best_fitness, stats


def stage3_retrain_estimator(policy, power, cfg: ExperimentConfig, initial_estimator=None, single_agent=False):
    """Collect episodes under the learned agents and retrain from scratch.

    Collection uses stochastic profile decoding so the estimator sees the
    same action distribution the policies were scored on. With
    warm_start_stage3 the optimizer starts from the initial estimator's
    weights instead of a fresh draw.
    """
    collect_cfg = replace(cfg.rollout, decode_mode="sample")
    if single_agent:
        controller = SingleAgentController(policy, collect_cfg.decode_mode)
        collect_key, train_key = STAGE_SA_COLLECT3, STAGE_SA_TRAIN3
    else:
        controller = MultiAgentController(policy, power, collect_cfg.decode_mode)
        collect_key, train_key = STAGE_COLLECT3, STAGE_TRAIN3
    data = generate_episodes(
        controller,
        cfg.training.stage3_dataset_size,
        cfg.scenario,
        collect_cfg,
        derive_rng(cfg.master_seed, collect_key),
    )
    warm = None
    if cfg.training.warm_start_stage3:
        if initial_estimator is None:
            raise PipelineError("warm start requested but no initial estimator given")
        warm = initial_estimator.params
    estimator, history = train_position_estimator(
        data.observations,
        data.positions,
        cfg.scenario,
        cfg.rollout,
        cfg.networks,
        cfg.training,
        derive_rng(cfg.master_seed, train_key),
        initial_params=warm,
    )
    return estimator, history


@dataclass
class PipelineResult:
    estimator_initial: PositionEstimator
    policy: object
    power: object
    estimator_final: PositionEstimator
    best_fitness: float
    generation_stats: list
    history_stage1: TrainingHistory
    history_stage3: TrainingHistory


def run_full_pipeline(cfg: ExperimentConfig, single_agent: bool = False, stats_sink=None, workers=None) -> PipelineResult:
    estimator_initial, hist1 = stage1_train_initial_estimator(cfg)
    policy, power, best_fitness, stats = stage2_evolve_policies(
        estimator_initial, cfg, single_agent=single_agent, stats_sink=stats_sink, workers=workers
    )
    estimator_final, hist3 = stage3_retrain_estimator(
        policy, power, cfg, initial_estimator=estimator_initial, single_agent=single_agent
    )
    return PipelineResult(
        estimator_initial=estimator_initial,
        policy=policy,
        power=power,
        estimator_final=estimator_final,
        best_fitness=best_fitness,
        generation_stats=stats,
        history_stage1=hist1,
        history_stage3=hist3,
    )


# -- evaluation and sweeps -------------------------------------------------------

SWEEP_CSV_HEADER = ["method", "n_ris", "noise_dbm", "format", "rmse_m", "mean_power", "budget_ok", "seed"]


@dataclass
class SweepRow:
    method: str
    n_ris: int
    noise_dbm: float
    observation_format: str
    rmse_m: float
    mean_power: float
    budget_ok: bool
    seed: int

    def csv_values(self):
        return [
            self.method,
            self.n_ris,
            self.noise_dbm,
            self.observation_format,
            self.rmse_m,
            self.mean_power,
            self.budget_ok,
            self.seed,
        ]


def evaluate_method_controller(controller, estimator, cfg: ExperimentConfig, decode_mode=None):
    """Shared held-out evaluation; the eval seed depends only on the config."""
    eval_cfg = cfg.rollout if decode_mode is None else replace(cfg.rollout, decode_mode=decode_mode)
    return evaluate_controller(
        controller,
        estimator,
        cfg.training.eval_episodes,
        cfg.scenario,
        eval_cfg,
        derive_rng(cfg.master_seed, STAGE_EVAL),
    )


def uniform_power_reference(estimator, cfg: ExperimentConfig):
    """Random profiles, powers U[0, P_max]; the non-adaptive reference row."""
    controller = RandomController(cfg.scenario.geometry.n_ris, cfg.scenario.phase_set.n, cfg.rollout.power_max_watt)
    return evaluate_method_controller(controller, estimator, cfg)


def run_method(cfg: ExperimentConfig, method: str, workers=None) -> SweepRow:
    """Train (if needed) and evaluate one sweep method on the shared eval block."""
    budget = cfg.ne.power_budget
    if method in ("ma", "ma_sample", "single_agent", "single_agent_sample"):
        single = method.startswith("single_agent")
        decode = "sample" if method.endswith("_sample") else "argmax"
        result = run_full_pipeline(cfg, single_agent=single, workers=workers)
        if single:
            controller = SingleAgentController(result.policy, decode)
        else:
            controller = MultiAgentController(result.policy, result.power, decode)
        ev = evaluate_method_controller(controller, result.estimator_final, cfg, decode_mode=decode)
    elif method == "supervised":
        model, _ = baselines.train_supervised_baseline(cfg)
        controller = RandomController(
            cfg.scenario.geometry.n_ris, cfg.scenario.phase_set.n, cfg.rollout.power_max_watt
        )
        ev = evaluate_method_controller(controller, model, cfg)
    elif method == "fingerprint":
        db = baselines.build_fingerprint_db(cfg)
        ev = baselines.evaluate_fingerprint(db, cfg)
    elif method == "uniform":
        estimator, _ = stage1_train_initial_estimator(cfg)
        ev = uniform_power_reference(estimator, cfg)
    else:
        raise PipelineError(f"unknown sweep method {method!r}")
    return SweepRow(
        method=method,
        n_ris=cfg.scenario.geometry.n_ris,
        noise_dbm=cfg.scenario.channel.noise_power_dbm,
        observation_format=cfg.rollout.observation_format,
        rmse_m=ev.rmse_m,
        mean_power=ev.mean_power,
        budget_ok=bool(ev.mean_power <= 1.05 * budget),
        seed=cfg.master_seed,
    )


def run_sweep(cfg: ExperimentConfig, row_sink=None, workers=None) -> list:
    """Cartesian sweep over (n_ris, noise) x methods; one row per cell."""
    rows = []
    for n_ris in cfg.sweep.n_ris:
        for noise_dbm in cfg.sweep.noise_dbm:
            point = config_with(
                cfg,
                scenario={"n_ris": int(n_ris)},
                channel={"noise_power_dbm": float(noise_dbm)},
            )
            for method in cfg.sweep.methods:
                row = run_method(point, method, workers=workers)
                rows.append(row)
                if row_sink is not None:
                    row_sink(row)
    return rows
