"""Cooperative synapse neuroevolution over joint policy/power weight vectors.

Individuals concatenate the sensing-policy weights with the power-control
weights (or just the policy in the exact-power variant). Fitness is the
negated mean episodic power when the budget is exceeded, otherwise the
negated mean localization error, so it is never positive and feasibility
dominates. Every individual in a generation is scored on one shared block
of pre-drawn episodes (common random numbers).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import partial

import numpy as np

from . import nn
from .agents import PolicyAgent, PositionEstimator, PowerAgent
from .rollout import (
    MultiAgentController,
    RolloutConfig,
    Scenario,
    SingleAgentController,
    draw_episode_block,
    run_episode_batch,
)
from .util import derive_rng, parallel_map

STAGE_EVOLVE = 3
_KEY_INIT, _KEY_EPISODES, _KEY_OPS, _KEY_CONFIRM = 0, 1, 2, 3


@dataclass
class NEConfig:
    population_size: int = 50
    generations: int = 100
    mutation_prob: float = 0.5
    mutation_std: float = 0.5  # std deviation of the additive Gaussian noise
    episodes_per_eval: int = 64
    power_budget: float = 5.0  # watt-frames over the episode horizon
    elite_count: int = 2
    fitness_decode_mode: str = "sample"
    checkpoint_every: int = 0
    # generation champions are re-scored on this many episodes before they
    # can become the returned best-ever individual (None: 10x per-eval);
    # crowning on the small selection block alone picks lucky-block noise
    confirmation_episodes: int | None = None

    def __post_init__(self):
        if self.population_size < 4 or self.population_size // 4 < 2:
            raise ValueError("population_size must be >= 8 so the parent pool has >= 2 members")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must be within [0, 1]")
        if self.mutation_std < 0:
            raise ValueError("mutation_std must be >= 0")
        if self.episodes_per_eval < 1:
            raise ValueError("episodes_per_eval must be >= 1")
        if not 0 <= self.elite_count < self.population_size:
            raise ValueError("elite_count must be smaller than the population")
        if self.power_budget < 0:
            raise ValueError("power_budget must be >= 0")
        if self.confirmation_episodes is not None and self.confirmation_episodes < 1:
            raise ValueError("confirmation_episodes must be >= 1")

    @property
    def resolved_confirmation_episodes(self) -> int:
        if self.confirmation_episodes is None:
            return 10 * self.episodes_per_eval
        return self.confirmation_episodes


@dataclass
class GenerationStats:
    """best/mean/worst are selection-block scores; best_so_far tracks the
    confirmed best-ever fitness (running max, non-decreasing)."""

    generation: int
    best: float
    mean: float
    worst: float
    feasible_fraction: float
    best_so_far: float

    CSV_HEADER = ["generation", "best", "mean", "worst", "feasible_fraction", "best_so_far"]

    def csv_values(self):
        return [self.generation, self.best, self.mean, self.worst, self.feasible_fraction, self.best_so_far]


@dataclass
class IndividualSpec:
    """Shapes and metadata needed to turn a flat vector into agents."""

    policy_arch: nn.ArchitectureSpec
    power_arch: nn.ArchitectureSpec | None
    n_ris: int
    n_phases: int
    observation_format: str
    input_scale: float
    power_max_watt: float

    @property
    def policy_len(self) -> int:
        return nn.param_count(self.policy_arch)

    @property
    def power_len(self) -> int:
        return 0 if self.power_arch is None else nn.param_count(self.power_arch)

    @property
    def total_len(self) -> int:
        return self.policy_len + self.power_len

    def split(self, vector: np.ndarray):
        vector = np.asarray(vector)
        if vector.shape != (self.total_len,):
            raise ValueError(f"individual must have length {self.total_len}")
        policy = vector[: self.policy_len]
        power = None if self.power_arch is None else vector[self.policy_len :]
        return policy, power

    def concatenate(self, policy_params: np.ndarray, power_params: np.ndarray | None) -> np.ndarray:
        if self.power_arch is None:
            return np.asarray(policy_params, dtype=float).copy()
        return np.concatenate([policy_params, power_params]).astype(float)

    def build_agents(self, vector: np.ndarray):
        policy_params, power_params = self.split(vector)
        policy = PolicyAgent(
            params=policy_params,
            arch=self.policy_arch,
            n_ris=self.n_ris,
            n_phases=self.n_phases,
            observation_format=self.observation_format,
            input_scale=self.input_scale,
            exact_power=self.power_arch is None,
            power_max_watt=self.power_max_watt,
        )
        power = None
        if self.power_arch is not None:
            power = PowerAgent(params=power_params, arch=self.power_arch, power_max_watt=self.power_max_watt)
        return policy, power

    def build_controller(self, vector: np.ndarray, decode_mode: str):
        policy, power = self.build_agents(vector)
        if power is None:
            return SingleAgentController(policy, decode_mode)
        return MultiAgentController(policy, power, decode_mode)

    def init_individual(self, rng: np.random.Generator) -> np.ndarray:
        parts = [nn.init_params(self.policy_arch, rng)]
        if self.power_arch is not None:
            parts.append(nn.init_params(self.power_arch, rng))
        return np.concatenate(parts)


def fitness_from_stats(mean_power: float, mean_distance: float, budget: float) -> float:
    """Budget-penalized fitness; negated quantities, so 0 is the maximum."""
    if not (np.isfinite(mean_power) and np.isfinite(mean_distance)):
        return -np.inf
    if mean_power > budget:
        return -mean_power
    return -mean_distance


def _score_vector(vector, spec: IndividualSpec, estimator: PositionEstimator, scenario, cfg, budget, draws):
    controller = spec.build_controller(vector, cfg.decode_mode)
    batch = run_episode_batch(controller, draws, scenario, cfg)
    estimates = estimator.predict(batch.observations)
    if not (np.all(np.isfinite(estimates)) and np.all(np.isfinite(batch.powers))):
        return -np.inf, np.inf, np.inf
    mean_power = float(batch.power_totals().mean())
    mean_distance = float(np.linalg.norm(estimates - batch.positions, axis=1).mean())
    return fitness_from_stats(mean_power, mean_distance, budget), mean_power, mean_distance


def evaluate_fitness(
    individual: np.ndarray,
    spec: IndividualSpec,
    estimator: PositionEstimator,
    scenario: Scenario,
    rollout_cfg: RolloutConfig,
    ne_cfg: NEConfig,
    rng: np.random.Generator,
) -> float:
    """Score one individual on a fresh block of Monte Carlo episodes."""
    cfg = replace(rollout_cfg, decode_mode=ne_cfg.fitness_decode_mode)
    draws = draw_episode_block(scenario, cfg, ne_cfg.episodes_per_eval, rng)
    fitness, _, _ = _score_vector(individual, spec, estimator, scenario, cfg, ne_cfg.power_budget, draws)
    return fitness


def select_parents(fitness: np.ndarray, pool_size: int | None = None) -> np.ndarray:
    """Indices of the top floor(L/4) by fitness; ties keep the lower index."""
    fitness = np.asarray(fitness)
    if pool_size is None:
        pool_size = len(fitness) // 4
    order = np.argsort(-fitness, kind="stable")
    return order[:pool_size]


def crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform crossover, each coordinate from either parent with prob 1/2."""
    if a.shape != b.shape:
        raise ValueError("parents must have equal length")
    mask = rng.random(a.shape[0]) < 0.5
    return np.where(mask, a, b)


def mutate(vector: np.ndarray, mutation_prob: float, mutation_std: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, std^2) noise to each coordinate independently with prob p.

    Both the mask and the noise are always drawn full-length so the stream
    position does not depend on the probability.
    """
    mask = rng.random(vector.shape[0]) < mutation_prob
    noise = rng.standard_normal(vector.shape[0]) * mutation_std
    return vector + mask * noise


def shuffle_probability(rank: int, population_size: int) -> float:
    """Per-gene shuffle probability from fitness rank (0 = best).

    1 - sqrt(fraction of the population ranked strictly below): the best
    individual is never shuffled, the worst always. Isolated here so the
    schedule can be swapped wholesale.
    """
    if population_size <= 1:
        return 0.0
    below = (population_size - 1 - rank) / (population_size - 1)
    return 1.0 - np.sqrt(below)


def permute_synapses(
    population: np.ndarray,
    rng: np.random.Generator,
    protected: int = 0,
    column_chunk: int = 1 << 20,
) -> np.ndarray:
    """Column-wise gene mixing across the fitness-ranked population.

    Rows must be ordered best first. Marked genes within each coordinate
    column are permuted uniformly among themselves, so every column keeps
    its exact multiset of values. The first `protected` rows never move.
    """
    population = np.asarray(population)
    n_ind, n_genes = population.shape
    out = population.copy()
    if n_ind <= 1:
        return out
    probs = np.array([shuffle_probability(r, n_ind) for r in range(n_ind)])
    probs[: min(protected, n_ind)] = 0.0
    for start in range(0, n_genes, column_chunk):
        cols = slice(start, min(start + column_chunk, n_genes))
        width = out[:, cols].shape[1]
        mask = rng.random((n_ind, width)) < probs[:, None]
        keys = np.where(mask, rng.random((n_ind, width)), 2.0)
        rand_order = np.argsort(keys, axis=0, kind="stable")
        pos_order = np.argsort(~mask, axis=0, kind="stable")
        counts = mask.sum(axis=0)
        valid = np.arange(n_ind)[:, None] < counts[None, :]
        col_idx = np.broadcast_to(np.arange(width), (n_ind, width))
        block = out[:, cols]
        block[pos_order[valid], col_idx[valid]] = population[:, cols][rand_order[valid], col_idx[valid]]
    return out


def evolve(
    ne_cfg: NEConfig,
    spec: IndividualSpec,
    estimator: PositionEstimator,
    scenario: Scenario,
    rollout_cfg: RolloutConfig,
    master_seed: int,
    key: tuple = (STAGE_EVOLVE,),
    stats_sink=None,
    checkpoint_cb=None,
    workers: int | None = None,
):
    """Run the full evolutionary loop; returns (best vector, fitness, stats).

    Generation 0 scores the random initial population; each later generation
    is reproduce (elites, parent selection, crossover, mutation, gene
    permutation) then score. A generation champion only replaces the
    best-ever individual after being confirmed on a larger fresh episode
    block, so the returned fitness (and the best_so_far trace) is free of
    the selection block's lucky-draw bias.
    """
    cfg = replace(rollout_cfg, decode_mode=ne_cfg.fitness_decode_mode)
    pop = np.stack(
        [spec.init_individual(derive_rng(master_seed, *key, _KEY_INIT, i)) for i in range(ne_cfg.population_size)]
    )
    best_vector = None
    best_fitness = -np.inf
    stats_list = []

    for gen in range(ne_cfg.generations + 1):
        episode_rng = derive_rng(master_seed, *key, _KEY_EPISODES, gen)
        draws = draw_episode_block(scenario, cfg, ne_cfg.episodes_per_eval, episode_rng)
        score = partial(
            _score_vector,
            spec=spec,
            estimator=estimator,
            scenario=scenario,
            cfg=cfg,
            budget=ne_cfg.power_budget,
            draws=draws,
        )
        results = parallel_map(score, list(pop), workers=workers)
        fitness = np.array([r[0] for r in results])
        mean_powers = np.array([r[1] for r in results])

        order = np.argsort(-fitness, kind="stable")
        gen_best = int(order[0])
        if fitness[gen_best] > best_fitness:
            confirm_rng = derive_rng(master_seed, *key, _KEY_CONFIRM, gen)
            confirm_draws = draw_episode_block(
                scenario, cfg, ne_cfg.resolved_confirmation_episodes, confirm_rng
            )
            confirmed, _, _ = _score_vector(
                pop[gen_best], spec, estimator, scenario, cfg, ne_cfg.power_budget, confirm_draws
            )
            if confirmed > best_fitness or best_vector is None:
                best_fitness = max(float(confirmed), best_fitness)
                best_vector = pop[gen_best].copy()
        stats = GenerationStats(
            generation=gen,
            best=float(fitness[gen_best]),
            mean=float(np.mean(fitness)),
            worst=float(fitness[order[-1]]),
            feasible_fraction=float(np.mean(mean_powers <= ne_cfg.power_budget)),
            best_so_far=best_fitness,
        )
        stats_list.append(stats)
        if stats_sink is not None:
            stats_sink(stats)
        if checkpoint_cb is not None and ne_cfg.checkpoint_every > 0 and gen % ne_cfg.checkpoint_every == 0:
            checkpoint_cb(gen, best_vector, best_fitness)
        if gen == ne_cfg.generations:
            break

        ops_rng = derive_rng(master_seed, *key, _KEY_OPS, gen)
        pool = select_parents(fitness)
        elites = pop[order[: ne_cfg.elite_count]].copy()
        children = []
        for _ in range(ne_cfg.population_size - ne_cfg.elite_count):
            ia = pool[ops_rng.integers(len(pool))]
            ib = pool[ops_rng.integers(len(pool))]
            child = crossover(pop[ia], pop[ib], ops_rng)
            children.append(mutate(child, ne_cfg.mutation_prob, ne_cfg.mutation_std, ops_rng))
        ranked = np.vstack([elites] + children) if ne_cfg.elite_count else np.stack(children)
        pop = permute_synapses(ranked, ops_rng, protected=ne_cfg.elite_count)

    return best_vector, best_fitness, stats_list
