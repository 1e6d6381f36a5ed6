"""Episode rollouts: the T-frame sensing loop, random baselines, evaluation.

One vectorized loop serves every controller (multi-agent, single-agent
exact power, random sensing): randomness for a block of episodes is drawn
up front in a fixed order (positions, per-frame channels, noise, decode
uniforms, power uniforms), so two controllers evaluated on the same block
see identical worlds and a single-episode run is just a block of one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .agents import PolicyAgent, PowerAgent, PositionEstimator
from .channel import (
    ChannelParams,
    PhaseSet,
    ScenarioGeometry,
    sample_channel_batch,
    sample_ue_positions,
    synthesize_observation_batch,
    _complex_normal,
)


@dataclass
class Scenario:
    """Static experiment world shared by every module."""

    geometry: ScenarioGeometry
    channel: ChannelParams
    phase_set: PhaseSet
    power_scaling: str = "sqrt"


@dataclass
class RolloutConfig:
    horizon: int
    initial_power_watt: float
    power_max_watt: float
    observation_format: str = "stacked"
    decode_mode: str = "sample"
    episode_static_channel: bool = False
    initial_profile: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 <= self.initial_power_watt <= self.power_max_watt):
            raise ValueError("initial power outside [0, power_max]")

    def start_profile(self, n_ris: int) -> np.ndarray:
        if self.initial_profile is None:
            return np.zeros(n_ris, dtype=np.int64)  # broadside: all elements at level 0
        return np.asarray(self.initial_profile, dtype=np.int64)


@dataclass
class EpisodeDraws:
    """All randomness for a block of episodes, pre-drawn in fixed order."""

    positions: np.ndarray  # (B, 3)
    channels: list  # T ChannelBatch entries
    noise: np.ndarray  # (T, B) complex
    decode_uniforms: np.ndarray  # (T, B, n_ris)
    power_uniforms: np.ndarray  # (T, B)


def draw_episode_block(
    scenario: Scenario,
    cfg: RolloutConfig,
    batch: int,
    rng: np.random.Generator,
    positions: np.ndarray | None = None,
) -> EpisodeDraws:
    if positions is None:
        positions = sample_ue_positions(scenario.geometry, batch, rng)
    else:
        positions = np.asarray(positions, dtype=float)
        if positions.shape != (batch, 3):
            raise ValueError("pinned positions must be (batch, 3)")
    if cfg.episode_static_channel:
        frame = sample_channel_batch(scenario.geometry, scenario.channel, positions, rng)
        channels = [frame] * cfg.horizon
    else:
        channels = [
            sample_channel_batch(scenario.geometry, scenario.channel, positions, rng)
            for _ in range(cfg.horizon)
        ]
    sigma = np.sqrt(scenario.channel.noise_power_watt)
    noise = _complex_normal(rng, (cfg.horizon, batch)) * sigma
    decode_uniforms = rng.random((cfg.horizon, batch, scenario.geometry.n_ris))
    power_uniforms = rng.random((cfg.horizon, batch))
    return EpisodeDraws(positions, channels, noise, decode_uniforms, power_uniforms)


@dataclass
class EpisodeBatch:
    positions: np.ndarray  # (B, 3)
    observations: np.ndarray  # (T, B) complex
    profiles: np.ndarray  # (T, B, n_ris) int
    powers: np.ndarray  # (T, B) watts
    bits: np.ndarray  # (T, B) uint8
    estimates: np.ndarray | None = None  # (B, 3)

    @property
    def batch(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.observations.shape[0]

    def power_totals(self) -> np.ndarray:
        return self.powers.sum(axis=0)


@dataclass
class Episode:
    """One recorded trajectory."""

    position: np.ndarray
    observations: np.ndarray
    profiles: np.ndarray
    powers: np.ndarray
    bits: np.ndarray
    estimate: np.ndarray | None = None

    @staticmethod
    def from_batch(batch: EpisodeBatch, index: int) -> "Episode":
        return Episode(
            position=batch.positions[index],
            observations=batch.observations[:, index],
            profiles=batch.profiles[:, index],
            powers=batch.powers[:, index],
            bits=batch.bits[:, index],
            estimate=None if batch.estimates is None else batch.estimates[index],
        )


def episode_power_total(episode) -> float:
    """Cumulative transmit power sum_t P(t) in watt-frames."""
    return float(np.sum(episode.powers if hasattr(episode, "powers") else episode))


def target_normalization(scenario: Scenario):
    """Affine map taking UE-region positions to O(1) training targets.

    Trainers fit in normalized coordinates; models denormalize on predict.
    Degenerate axes (zero half-width) keep scale 1 so targets stay finite.
    """
    g = scenario.geometry
    offset = np.array([g.ue_center_x, g.ue_center_y, g.ue_z])
    scale = np.array(
        [g.ue_half_x if g.ue_half_x > 0 else 1.0, g.ue_half_y if g.ue_half_y > 0 else 1.0, 1.0]
    )
    return offset, scale


# -- controllers ---------------------------------------------------------------
#
# Protocol: begin(cfg, draws) returns what frame 0 transmits; step(t, y, draws)
# returns (profiles, powers, bits) for frame t+1 after observing y(t). The
# last step's outputs are computed but never transmitted, mirroring how the
# agents behave. Open-loop controllers (random, fixed sequence) predetermine
# every frame and therefore own frame 0 as well.

class MultiAgentController:
    """BS policy picks profiles and a feedback bit; UE power net picks P(t+1).

    The only value crossing to the UE side each frame is the single bit;
    with audit=True the exact inputs handed to the power net are recorded.
    """

    def __init__(self, policy: PolicyAgent, power: PowerAgent, decode_mode: str, audit: bool = False):
        self.policy = policy
        self.power = power
        self.decode_mode = decode_mode
        self.audit = audit
        self.ue_inputs = []

    def begin(self, cfg: "RolloutConfig", draws: EpisodeDraws):
        batch = draws.positions.shape[0]
        self._policy_state = self.policy.init_state(batch)
        self._power_state = self.power.init_state(batch)
        self.ue_inputs = []
        profiles = np.broadcast_to(cfg.start_profile(self.policy.n_ris), (batch, self.policy.n_ris)).copy()
        return profiles, np.full(batch, cfg.initial_power_watt)

    def step(self, t: int, y: np.ndarray, draws: EpisodeDraws):
        profiles, bits, self._policy_state = self.policy.step(
            y, self._policy_state, self.decode_mode, draws.decode_uniforms[t]
        )
        ue_in = bits.astype(float)
        if self.audit:
            self.ue_inputs.append(ue_in.copy())
        powers, self._power_state = self.power.step(ue_in, self._power_state)
        return profiles, powers, bits


class SingleAgentController:
    """Exact-power variant: the BS transmits the power value itself."""

    def __init__(self, policy: PolicyAgent, decode_mode: str):
        if not policy.exact_power:
            raise ValueError("single-agent controller needs an exact-power policy head")
        self.policy = policy
        self.decode_mode = decode_mode

    def begin(self, cfg: "RolloutConfig", draws: EpisodeDraws):
        batch = draws.positions.shape[0]
        self._state = self.policy.init_state(batch)
        profiles = np.broadcast_to(cfg.start_profile(self.policy.n_ris), (batch, self.policy.n_ris)).copy()
        return profiles, np.full(batch, cfg.initial_power_watt)

    def step(self, t: int, y: np.ndarray, draws: EpisodeDraws):
        profiles, powers, self._state = self.policy.step(
            y, self._state, self.decode_mode, draws.decode_uniforms[t]
        )
        bits = np.zeros(len(powers), dtype=np.uint8)
        return profiles, powers, bits


class RandomController:
    """Non-adaptive reference: profiles uniform over the phase set and powers
    i.i.d. U[0, P_max] for every frame, including the first."""

    def __init__(self, n_ris: int, n_phases: int, power_max_watt: float):
        self.n_ris = n_ris
        self.n_phases = n_phases
        self.power_max_watt = power_max_watt

    def _frame(self, t: int, draws: EpisodeDraws):
        u = draws.decode_uniforms[t]
        profiles = np.minimum((u * self.n_phases).astype(np.int64), self.n_phases - 1)
        powers = draws.power_uniforms[t] * self.power_max_watt
        return profiles, powers

    def begin(self, cfg: "RolloutConfig", draws: EpisodeDraws):
        return self._frame(0, draws)

    def step(self, t: int, y: np.ndarray, draws: EpisodeDraws):
        horizon = draws.noise.shape[0]
        profiles, powers = self._frame(min(t + 1, horizon - 1), draws)
        return profiles, powers, np.zeros(y.shape[0], dtype=np.uint8)


class FixedSequenceController:
    """Replays a predetermined profile sequence; powers fixed or uniform."""

    def __init__(self, profile_sequence: np.ndarray, power_max_watt: float, power_sequence: np.ndarray | None = None):
        self.profile_sequence = np.asarray(profile_sequence)
        self.power_sequence = None if power_sequence is None else np.asarray(power_sequence, dtype=float)
        self.power_max_watt = power_max_watt

    def _frame(self, t: int, draws: EpisodeDraws):
        batch = draws.positions.shape[0]
        profiles = np.broadcast_to(self.profile_sequence[t], (batch, self.profile_sequence.shape[1])).copy()
        if self.power_sequence is None:
            powers = draws.power_uniforms[t] * self.power_max_watt
        else:
            powers = np.full(batch, self.power_sequence[t])
        return profiles, powers

    def begin(self, cfg: "RolloutConfig", draws: EpisodeDraws):
        return self._frame(0, draws)

    def step(self, t: int, y: np.ndarray, draws: EpisodeDraws):
        horizon = self.profile_sequence.shape[0]
        profiles, powers = self._frame(min(t + 1, horizon - 1), draws)
        return profiles, powers, np.zeros(y.shape[0], dtype=np.uint8)


# -- the loop -------------------------------------------------------------------

def run_episode_batch(controller, draws: EpisodeDraws, scenario: Scenario, cfg: RolloutConfig) -> EpisodeBatch:
    """Run the T-frame loop for every episode in the block.

    Frame t transmits with the profile/power the controller decided after
    frame t-1 (its begin() values at t=0); the controller then observes
    y(t) and decides the next pair. Records hold the used values, so power
    and profile constraints are checked on exactly what was transmitted.
    """
    batch = draws.positions.shape[0]
    n_ris = scenario.geometry.n_ris
    horizon = cfg.horizon

    observations = np.empty((horizon, batch), dtype=complex)
    profiles = np.empty((horizon, batch, n_ris), dtype=np.int64)
    powers = np.empty((horizon, batch))
    bits = np.empty((horizon, batch), dtype=np.uint8)

    cur_profiles, cur_powers = controller.begin(cfg, draws)
    for t in range(horizon):
        y = synthesize_observation_batch(
            draws.channels[t],
            cur_profiles,
            cur_powers,
            scenario.phase_set,
            scenario.channel,
            power_max_watt=cfg.power_max_watt,
            power_scaling=scenario.power_scaling,
            noise=draws.noise[t],
        )
        observations[t] = y
        profiles[t] = cur_profiles
        powers[t] = cur_powers
        next_profiles, next_powers, bits[t] = controller.step(t, y, draws)
        cur_profiles = next_profiles
        cur_powers = next_powers
    return EpisodeBatch(draws.positions, observations, profiles, powers, bits)


def run_episode(
    policy: PolicyAgent,
    power: PowerAgent,
    cfg: RolloutConfig,
    scenario: Scenario,
    rng: np.random.Generator,
) -> Episode:
    """Single multi-agent episode (block of one)."""
    controller = MultiAgentController(policy, power, cfg.decode_mode)
    draws = draw_episode_block(scenario, cfg, 1, rng)
    return Episode.from_batch(run_episode_batch(controller, draws, scenario, cfg), 0)


def run_random_episode(cfg: RolloutConfig, scenario: Scenario, rng: np.random.Generator) -> Episode:
    controller = RandomController(scenario.geometry.n_ris, scenario.phase_set.n, cfg.power_max_watt)
    draws = draw_episode_block(scenario, cfg, 1, rng)
    return Episode.from_batch(run_episode_batch(controller, draws, scenario, cfg), 0)


def generate_episodes(
    controller,
    count: int,
    scenario: Scenario,
    cfg: RolloutConfig,
    rng: np.random.Generator,
    chunk: int = 512,
) -> EpisodeBatch:
    """Run `count` episodes in memory-bounded chunks and concatenate."""
    parts = []
    remaining = count
    while remaining > 0:
        size = min(chunk, remaining)
        draws = draw_episode_block(scenario, cfg, size, rng)
        parts.append(run_episode_batch(controller, draws, scenario, cfg))
        remaining -= size
    return EpisodeBatch(
        positions=np.concatenate([p.positions for p in parts], axis=0),
        observations=np.concatenate([p.observations for p in parts], axis=1),
        profiles=np.concatenate([p.profiles for p in parts], axis=1),
        powers=np.concatenate([p.powers for p in parts], axis=1),
        bits=np.concatenate([p.bits for p in parts], axis=1),
    )


def generate_random_episodes(count, scenario, cfg, rng, chunk: int = 512) -> EpisodeBatch:
    controller = RandomController(scenario.geometry.n_ris, scenario.phase_set.n, cfg.power_max_watt)
    return generate_episodes(controller, count, scenario, cfg, rng, chunk)


@dataclass
class EvalResult:
    rmse_m: float
    mean_power: float
    mean_distance: float


def evaluate_controller(
    controller,
    estimator: PositionEstimator,
    n_episodes: int,
    scenario: Scenario,
    cfg: RolloutConfig,
    rng: np.random.Generator,
    chunk: int = 512,
) -> EvalResult:
    """RMSE, mean episodic power and mean distance over fresh episodes."""
    sq_err = 0.0
    dist = 0.0
    power = 0.0
    remaining = n_episodes
    while remaining > 0:
        size = min(chunk, remaining)
        draws = draw_episode_block(scenario, cfg, size, rng)
        batch = run_episode_batch(controller, draws, scenario, cfg)
        estimates = estimator.predict(batch.observations)
        err = np.linalg.norm(estimates - batch.positions, axis=1)
        sq_err += float(np.sum(err * err))
        dist += float(np.sum(err))
        power += float(np.sum(batch.power_totals()))
        remaining -= size
    return EvalResult(
        rmse_m=float(np.sqrt(sq_err / n_episodes)),
        mean_power=power / n_episodes,
        mean_distance=dist / n_episodes,
    )


def evaluate_rmse(
    policy: PolicyAgent,
    power: PowerAgent,
    estimator: PositionEstimator,
    n_episodes: int,
    scenario: Scenario,
    cfg: RolloutConfig,
    rng: np.random.Generator,
):
    """(rmse meters, mean episodic power) under the multi-agent scheme."""
    controller = MultiAgentController(policy, power, cfg.decode_mode)
    result = evaluate_controller(controller, estimator, n_episodes, scenario, cfg, rng)
    return result.rmse_m, result.mean_power


# -- dataset persistence --------------------------------------------------------

DATASET_MAGIC = b"RLEP1\n"


def _record_dtype(horizon: int, n_ris: int) -> np.dtype:
    return np.dtype(
        [
            ("position", "<f8", (3,)),
            ("observations", "<c16", (horizon,)),
            ("profiles", "<u2", (horizon, n_ris)),
            ("powers", "<f8", (horizon,)),
            ("bits", "u1", (horizon,)),
        ]
    )


def save_episodes(path, batch: EpisodeBatch, meta: dict) -> None:
    """Binary container: magic, uint32 JSON header length, header, records."""
    horizon, n_ris = batch.horizon, batch.profiles.shape[2]
    header = dict(meta)
    header.update({"format": 1, "horizon": horizon, "n_ris": n_ris, "count": batch.batch})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    records = np.empty(batch.batch, dtype=_record_dtype(horizon, n_ris))
    records["position"] = batch.positions
    records["observations"] = batch.observations.T
    records["profiles"] = batch.profiles.transpose(1, 0, 2)
    records["powers"] = batch.powers.T
    records["bits"] = batch.bits.T
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        fh.write(records.tobytes())


def load_episodes(path):
    """Returns (EpisodeBatch, header dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(DATASET_MAGIC)) != DATASET_MAGIC:
            raise ValueError(f"{path}: not an episode dataset")
        (length,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(length)).decode("utf-8"))
        records = np.frombuffer(fh.read(), dtype=_record_dtype(header["horizon"], header["n_ris"]))
    if records.shape[0] != header["count"]:
        raise ValueError(f"{path}: truncated dataset")
    batch = EpisodeBatch(
        positions=records["position"].astype(float),
        observations=records["observations"].T.astype(complex),
        profiles=records["profiles"].transpose(1, 0, 2).astype(np.int64),
        powers=records["powers"].T.astype(float),
        bits=records["bits"].T.astype(np.uint8),
    )
    return batch, header


def export_episodes_csv(path, batch: EpisodeBatch) -> None:
    """Flat CSV for eyeballing; one row per (episode, frame)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("episode,frame,x,y,z,obs_re,obs_im,power_watt,bit,profile\n")
        for b in range(batch.batch):
            px, py, pz = batch.positions[b]
            for t in range(batch.horizon):
                y = batch.observations[t, b]
                prof = " ".join(str(int(v)) for v in batch.profiles[t, b])
                fh.write(
                    f"{b},{t},{px!r},{py!r},{pz!r},{y.real!r},{y.imag!r},"
                    f"{batch.powers[t, b]!r},{int(batch.bits[t, b])},{prof}\n"
                )
