"""The three networks: sensing policy (BS), power control (UE), estimator (BS).

The policy LSTM reads the latest observation and emits per-element logits
over the discrete phase levels plus a scalar that becomes the 1-bit power
feedback (tanh then sign, sign(0) -> 1). The power LSTM reads only that bit
stream and emits a level in [0, power_max] via a sigmoid. The estimator
averages its per-step LSTM outputs over the episode before regressing the
position.

Raw complex observations are scaled by `input_scale` (1/sqrt(noise power))
before encoding; the constant travels with every checkpoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .util import sha256_file


def observation_encode(y, observation_format: str) -> np.ndarray:
    """stacked -> [Re, Im]; rss -> [|y|^2]. Adds a trailing feature axis."""
    y = np.asarray(y)
    if observation_format == "stacked":
        return np.stack([y.real, y.imag], axis=-1)
    if observation_format == "rss":
        return (y.real * y.real + y.imag * y.imag)[..., None]
    raise ValueError(f"unknown observation format {observation_format!r}")


def observation_dim(observation_format: str) -> int:
    return 2 if observation_format == "stacked" else 1


def input_scale_for(noise_power_watt: float) -> float:
    """Normalization so pilot observations enter the networks at O(1).

    Clamped so (near-)noiseless configurations do not blow inputs up to the
    point of overflow; 1e8 keeps any plausible pilot amplitude below ~1e4.
    """
    if noise_power_watt > 0:
        return float(min(1.0 / np.sqrt(noise_power_watt), 1e8))
    return 1.0


def decode_feedback_bits(preactivation: np.ndarray) -> np.ndarray:
    """tanh then sign; nonnegative maps to bit 1."""
    return (np.tanh(preactivation) >= 0.0).astype(np.uint8)


def decode_ris_profiles(logits: np.ndarray, n_phases: int, mode: str, uniforms: np.ndarray | None = None):
    """Per-element softmax over the phase levels, then sample or argmax."""
    probs = nn.grouped_softmax(logits, n_phases)
    if mode == "argmax":
        return nn.argmax_grouped(probs), probs
    if mode == "sample":
        if uniforms is None:
            raise ValueError("sample decoding needs uniforms")
        return nn.sample_grouped(probs, uniforms), probs
    raise ValueError(f"unknown decode mode {mode!r}")


def make_policy_arch(obs_dim, lstm_sizes, ris_head_hidden, bit_head_hidden, n_ris, n_phases):
    return nn.ArchitectureSpec(
        input_dim=obs_dim,
        lstm_sizes=tuple(lstm_sizes),
        heads=(
            nn.HeadSpec((ris_head_hidden, n_ris * n_phases), ("relu", "identity")),
            nn.HeadSpec((bit_head_hidden, 1), ("relu", "identity")),
        ),
    )


def make_power_arch(lstm_sizes, head_hidden):
    return nn.ArchitectureSpec(
        input_dim=1,
        lstm_sizes=tuple(lstm_sizes),
        heads=(nn.HeadSpec((head_hidden, 1), ("relu", "identity")),),
    )


def make_estimator_arch(obs_dim, lstm_sizes, head_hidden):
    return nn.ArchitectureSpec(
        input_dim=obs_dim,
        lstm_sizes=tuple(lstm_sizes),
        heads=(nn.HeadSpec(tuple(head_hidden) + (3,), ("relu",) * len(head_hidden) + ("identity",)),),
    )


def make_supervised_arch(flat_dim, hidden_layers):
    return nn.ArchitectureSpec(
        input_dim=flat_dim,
        lstm_sizes=(),
        heads=(nn.HeadSpec(tuple(hidden_layers) + (3,), ("relu",) * len(hidden_layers) + ("identity",)),),
    )


@dataclass
class PolicyAgent:
    """BS-side sensing policy over one LSTM trunk and two FF heads.

    With exact_power=True (single-agent variant) the second head outputs the
    transmit power directly (sigmoid * power_max) instead of a feedback bit.
    """

    params: np.ndarray
    arch: nn.ArchitectureSpec
    n_ris: int
    n_phases: int
    observation_format: str
    input_scale: float
    exact_power: bool = False
    power_max_watt: float | None = None

    def __post_init__(self):
        self.views = nn.ParamViews(self.arch, self.params)

    def init_state(self, batch: int):
        return nn.init_lstm_state(self.arch, batch)

    def step(self, y: np.ndarray, state, mode: str, uniforms: np.ndarray | None = None):
        """Advance one frame from raw complex observations y of shape (B,).

        Returns (profiles (B, n_ris), aux (B,), new_state) where aux is the
        feedback bit (uint8) or, in exact-power mode, the power in watts.
        """
        obs = observation_encode(np.asarray(y) * self.input_scale, self.observation_format)
        h, new_state = nn.lstm_step(self.views, state, obs)
        ris_logits = nn.feed_forward(self.views, 0, h)
        scalar = nn.feed_forward(self.views, 1, h)[:, 0]
        profiles, _ = decode_ris_profiles(ris_logits, self.n_phases, mode, uniforms)
        if self.exact_power:
            aux = nn.sigmoid(scalar) * self.power_max_watt
        else:
            aux = decode_feedback_bits(scalar)
        return profiles, aux, new_state


@dataclass
class PowerAgent:
    """UE-side power control; its only input is the 1-bit feedback stream."""

    params: np.ndarray
    arch: nn.ArchitectureSpec
    power_max_watt: float

    def __post_init__(self):
        self.views = nn.ParamViews(self.arch, self.params)

    def init_state(self, batch: int):
        return nn.init_lstm_state(self.arch, batch)

    def step(self, bits: np.ndarray, state):
        """bits (B,) in {0, 1} -> (powers (B,) in [0, power_max], new state)."""
        x = np.asarray(bits, dtype=float)[:, None]
        h, new_state = nn.lstm_step(self.views, state, x)
        raw = nn.feed_forward(self.views, 0, h)[:, 0]
        return nn.sigmoid(raw) * self.power_max_watt, new_state


@dataclass
class PositionEstimator:
    """Sequence-to-position regressor with output denormalization.

    The network is trained on targets affinely mapped to O(1); predictions
    are mapped back with output_offset + output_scale * raw. Offsets and
    scales are stored in the checkpoint alongside input_scale.
    """

    params: np.ndarray
    arch: nn.ArchitectureSpec
    observation_format: str
    input_scale: float
    output_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    output_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.output_offset = np.asarray(self.output_offset, dtype=float)
        self.output_scale = np.asarray(self.output_scale, dtype=float)
        self.views = nn.ParamViews(self.arch, self.params)

    def encode(self, observations: np.ndarray) -> np.ndarray:
        """(T, B) complex -> (T, B, obs_dim) network inputs."""
        return observation_encode(np.asarray(observations) * self.input_scale, self.observation_format)

    def predict(self, observations: np.ndarray) -> np.ndarray:
        """(T, B) complex observations -> (B, 3) position estimates."""
        if observations.shape[0] < 1:
            raise ValueError("empty observation sequence")
        h_seq, _ = nn.lstm_forward(self.views, self.encode(observations))
        pooled = h_seq.mean(axis=0)
        raw = nn.feed_forward(self.views, 0, pooled)
        return self.output_offset + self.output_scale * raw

    def normalize_targets(self, positions: np.ndarray) -> np.ndarray:
        return (positions - self.output_offset) / self.output_scale


def estimate_position(estimator: PositionEstimator, observations: np.ndarray) -> np.ndarray:
    """Single-episode convenience: (T,) complex -> (3,) estimate."""
    return estimator.predict(np.asarray(observations)[:, None])[0]


# -- checkpoint plumbing ------------------------------------------------------

def save_agent(path, kind: str, params, arch, extra: dict) -> None:
    payload = dict(extra)
    payload["kind"] = kind
    nn.save_params(path, params, arch, payload)


def load_policy(path) -> PolicyAgent:
    params, arch, extra = nn.load_params(path)
    if extra.get("kind") not in ("policy", "policy_exact_power"):
        raise ValueError(f"{path}: not a policy checkpoint")
    return PolicyAgent(
        params=params,
        arch=arch,
        n_ris=int(extra["n_ris"]),
        n_phases=int(extra["n_phases"]),
        observation_format=extra["observation_format"],
        input_scale=float(extra["input_scale"]),
        exact_power=extra["kind"] == "policy_exact_power",
        power_max_watt=extra.get("power_max_watt"),
    )


def load_power(path) -> PowerAgent:
    params, arch, extra = nn.load_params(path)
    if extra.get("kind") != "power":
        raise ValueError(f"{path}: not a power checkpoint")
    return PowerAgent(params=params, arch=arch, power_max_watt=float(extra["power_max_watt"]))


def load_estimator(path) -> PositionEstimator:
    params, arch, extra = nn.load_params(path)
    if extra.get("kind") != "estimator":
        raise ValueError(f"{path}: not an estimator checkpoint")
    return PositionEstimator(
        params=params,
        arch=arch,
        observation_format=extra["observation_format"],
        input_scale=float(extra["input_scale"]),
        output_offset=np.asarray(extra["output_offset"], dtype=float),
        output_scale=np.asarray(extra["output_scale"], dtype=float),
    )


def write_manifest(path, config_hash: str, files: dict, metrics: dict | None = None) -> None:
    """Tie checkpoint files to the experiment config via content hashes."""
    entry = {
        "config_hash": config_hash,
        "files": {name: {"path": os.path.basename(p), "sha256": sha256_file(p)} for name, p in files.items()},
        "metrics": metrics or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entry, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def verify_manifest(manifest: dict, directory) -> list:
    """Return the names whose file hash no longer matches."""
    bad = []
    for name, info in manifest["files"].items():
        full = os.path.join(directory, info["path"])
        if not os.path.exists(full) or sha256_file(full) != info["sha256"]:
            bad.append(name)
    return bad
