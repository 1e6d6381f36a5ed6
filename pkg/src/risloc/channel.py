"""Scenario geometry, Ricean fading synthesis and the uplink observation model.

Channel gains are complex amplitudes; powers are watts throughout (dBm only
appears at the configuration boundary). All sampling takes an explicit
numpy Generator, and batched variants draw in the same order as repeated
scalar calls with a shared stream would, so everything is replayable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


def dbm_to_watt(level_dbm: float) -> float:
    return 10.0 ** ((level_dbm - 30.0) / 10.0)


def watt_to_dbm(power_watt: float) -> float:
    if power_watt <= 0:
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * np.log10(power_watt) + 30.0


def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def free_space_gain(distance_m, wavelength_m):
    """Amplitude gain lambda / (4 pi d) of a free-space link."""
    distance_m = np.asarray(distance_m, dtype=float)
    if np.any(distance_m <= 0.0):
        raise ValueError("free_space_gain requires distance > 0")
    return wavelength_m / (4.0 * np.pi * distance_m)


@dataclass
class ScenarioGeometry:
    """Static world layout: BS, planar RIS grid, and the UE sampling region.

    The RIS lies in the x = 0 plane facing +x; element (0, 0) sits at
    ris_origin, columns advance in +y, rows descend in -z.
    """

    bs_position: np.ndarray
    ris_origin: np.ndarray
    ris_rows: int
    ris_cols: int
    element_spacing: float
    ue_center_x: float
    ue_half_x: float
    ue_center_y: float
    ue_half_y: float
    ue_z: float

    def __post_init__(self):
        self.bs_position = np.asarray(self.bs_position, dtype=float)
        self.ris_origin = np.asarray(self.ris_origin, dtype=float)
        if self.ris_rows < 1 or self.ris_cols < 1:
            raise ValueError("RIS grid needs at least one element")
        if self.element_spacing <= 0:
            raise ValueError("element_spacing must be > 0")
        if self.ue_half_x < 0 or self.ue_half_y < 0:
            raise ValueError("UE region half-widths must be >= 0")
        if not (np.all(np.isfinite(self.bs_position)) and np.all(np.isfinite(self.ris_origin))):
            raise ValueError("positions must be finite")

    @property
    def n_ris(self) -> int:
        return self.ris_rows * self.ris_cols


@dataclass
class ChannelParams:
    carrier_frequency_hz: float
    ricean_kappa_db: float
    direct_extra_attenuation_db: float
    noise_power_dbm: float

    def __post_init__(self):
        if self.carrier_frequency_hz <= 0:
            raise ValueError("carrier frequency must be > 0")
        # -inf dBm (exactly zero watts) is a valid noiseless setting
        if np.isnan(self.noise_power_dbm) or self.noise_power_dbm == np.inf:
            raise ValueError("noise power must be finite in watts")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    @property
    def kappa_linear(self) -> float:
        return db_to_linear(self.ricean_kappa_db)

    @property
    def noise_power_watt(self) -> float:
        return dbm_to_watt(self.noise_power_dbm)


@dataclass(frozen=True)
class PhaseSet:
    """Discrete per-element phase levels theta, unit response exp(j pi theta)."""

    values: tuple

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError("phase set needs at least two levels")
        if len(set(self.values)) != len(self.values):
            raise ValueError("phase levels must be distinct")
        if any(not (0.0 <= v < 2.0) for v in self.values):
            raise ValueError("phase levels must lie in [0, 2)")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def responses(self) -> np.ndarray:
        return np.exp(1j * np.pi * np.asarray(self.values, dtype=float))


def validate_profile(indices, n_ris: int, phase_set: PhaseSet) -> np.ndarray:
    """Profile = integer index per element into the phase set."""
    indices = np.asarray(indices)
    if indices.shape[-1] != n_ris:
        raise ValueError(f"profile has {indices.shape[-1]} entries, expected {n_ris}")
    if not np.issubdtype(indices.dtype, np.integer):
        raise ValueError("profile indices must be integers")
    if indices.min(initial=0) < 0 or indices.max(initial=0) >= phase_set.n:
        raise ValueError("profile index outside the phase set")
    return indices


def phase_vector(profile, phase_set: PhaseSet) -> np.ndarray:
    """Unit-modulus element responses for a profile (leading axes pass through)."""
    profile = np.asarray(profile)
    validate_profile(profile, profile.shape[-1], phase_set)
    return phase_set.responses[profile]


def ris_element_positions(geometry: ScenarioGeometry) -> np.ndarray:
    """(n_ris, 3) element coordinates, row-major from the top-left element."""
    rows = np.arange(geometry.ris_rows)
    cols = np.arange(geometry.ris_cols)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    offsets = np.stack(
        [
            np.zeros(geometry.n_ris),
            cc.ravel() * geometry.element_spacing,
            -rr.ravel() * geometry.element_spacing,
        ],
        axis=1,
    )
    return geometry.ris_origin[None, :] + offsets


def sample_ue_positions(geometry: ScenarioGeometry, count: int, rng: np.random.Generator) -> np.ndarray:
    """(count, 3) positions uniform over the UE box, z fixed."""
    x = rng.uniform(geometry.ue_center_x - geometry.ue_half_x, geometry.ue_center_x + geometry.ue_half_x, count)
    y = rng.uniform(geometry.ue_center_y - geometry.ue_half_y, geometry.ue_center_y + geometry.ue_half_y, count)
    z = np.full(count, geometry.ue_z)
    return np.stack([x, y, z], axis=1)


def sample_ue_position(geometry: ScenarioGeometry, rng: np.random.Generator) -> np.ndarray:
    return sample_ue_positions(geometry, 1, rng)[0]


@dataclass
class ChannelRealization:
    """One coherence frame's gains for a single UE position."""

    h_direct: complex
    h_bs_ris: np.ndarray
    h_ris_ue: np.ndarray


@dataclass
class ChannelBatch:
    """Per-frame gains for a batch of UE positions: (B,), (B, N), (B, N)."""

    h_direct: np.ndarray
    h_bs_ris: np.ndarray
    h_ris_ue: np.ndarray


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard circular complex Gaussian, E|w|^2 = 1."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * np.sqrt(0.5)


def _ricean_mix(los: np.ndarray, scatter: np.ndarray, kappa: float) -> np.ndarray:
    if np.isinf(kappa):
        return los
    return np.sqrt(kappa / (kappa + 1.0)) * los + np.sqrt(1.0 / (kappa + 1.0)) * scatter


def _link_gain(distances, wavelength, kappa, scatter):
    amplitude = free_space_gain(distances, wavelength)
    los = np.exp(-2j * np.pi * distances / wavelength)
    return amplitude * _ricean_mix(los, scatter, kappa)


def sample_channel_batch(
    geometry: ScenarioGeometry,
    params: ChannelParams,
    ue_positions: np.ndarray,
    rng: np.random.Generator,
) -> ChannelBatch:
    """Fresh Ricean realizations for every row of ue_positions.

    Per-element line-of-sight phases use exact Euclidean distances (spherical
    wavefront). The direct BS-UE link carries the configured extra attenuation.
    Draw order per call: w_direct, w_bs_ris, w_ris_ue.
    """
    ue_positions = np.atleast_2d(np.asarray(ue_positions, dtype=float))
    batch = ue_positions.shape[0]
    elements = ris_element_positions(geometry)
    lam = params.wavelength_m
    kappa = params.kappa_linear

    w_direct = _complex_normal(rng, batch)
    w_bs_ris = _complex_normal(rng, (batch, geometry.n_ris))
    w_ris_ue = _complex_normal(rng, (batch, geometry.n_ris))

    d_direct = np.linalg.norm(ue_positions - geometry.bs_position[None, :], axis=1)
    d_bs_ris = np.linalg.norm(elements - geometry.bs_position[None, :], axis=1)
    d_ris_ue = np.linalg.norm(ue_positions[:, None, :] - elements[None, :, :], axis=2)

    damp = 10.0 ** (-params.direct_extra_attenuation_db / 20.0)
    h_direct = damp * _link_gain(d_direct, lam, kappa, w_direct)
    # BS-RIS distances are UE-independent; fading still varies per batch row.
    h_bs_ris = _link_gain(d_bs_ris[None, :], lam, kappa, w_bs_ris)
    h_ris_ue = _link_gain(d_ris_ue, lam, kappa, w_ris_ue)
    return ChannelBatch(h_direct=h_direct, h_bs_ris=h_bs_ris, h_ris_ue=h_ris_ue)


def sample_channel(
    geometry: ScenarioGeometry,
    params: ChannelParams,
    ue_position: np.ndarray,
    rng: np.random.Generator,
) -> ChannelRealization:
    block = sample_channel_batch(geometry, params, np.asarray(ue_position)[None, :], rng)
    return ChannelRealization(
        h_direct=complex(block.h_direct[0]),
        h_bs_ris=block.h_bs_ris[0],
        h_ris_ue=block.h_ris_ue[0],
    )


def power_amplitude(power_watt, mode: str):
    """Transmit scaling a(P): sqrt keeps watts physical, literal multiplies by P."""
    power_watt = np.asarray(power_watt, dtype=float)
    if mode == "sqrt":
        return np.sqrt(power_watt)
    if mode == "literal":
        return power_watt
    raise ValueError(f"unknown power scaling mode {mode!r}")


def cascade_gain(block: ChannelBatch, phases: np.ndarray) -> np.ndarray:
    """h_d + sum_i h_bs_ris[i] * phi_i * h_ris_ue[i] for each batch row."""
    return block.h_direct + np.sum(block.h_bs_ris * phases * block.h_ris_ue, axis=-1)


def synthesize_observation_batch(
    block: ChannelBatch,
    profiles: np.ndarray,
    powers_watt: np.ndarray,
    phase_set: PhaseSet,
    params: ChannelParams,
    *,
    power_max_watt: float,
    power_scaling: str = "sqrt",
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Received pilot samples for one frame of a batch of episodes.

    The pilot symbol is fixed to 1+0j. Noise may be pre-drawn (replay paths)
    or sampled here from rng with the configured variance.
    """
    powers_watt = np.asarray(powers_watt, dtype=float)
    if np.any(powers_watt < 0) or np.any(powers_watt > power_max_watt * (1 + 1e-12)):
        raise ValueError("transmit power outside [0, power_max]")
    phases = phase_vector(profiles, phase_set)
    signal = power_amplitude(powers_watt, power_scaling) * cascade_gain(block, phases)
    if noise is None:
        if rng is None:
            raise ValueError("provide rng or pre-drawn noise")
        noise = _complex_normal(rng, signal.shape) * np.sqrt(params.noise_power_watt)
    return signal + noise


def synthesize_observation(
    realization: ChannelRealization,
    profile: np.ndarray,
    power_watt: float,
    phase_set: PhaseSet,
    params: ChannelParams,
    rng: np.random.Generator,
    *,
    power_max_watt: float,
    power_scaling: str = "sqrt",
) -> complex:
    block = ChannelBatch(
        h_direct=np.asarray([realization.h_direct]),
        h_bs_ris=realization.h_bs_ris[None, :],
        h_ris_ue=realization.h_ris_ue[None, :],
    )
    out = synthesize_observation_batch(
        block,
        np.asarray(profile)[None, :],
        np.asarray([power_watt]),
        phase_set,
        params,
        power_max_watt=power_max_watt,
        power_scaling=power_scaling,
        rng=rng,
    )
    return complex(out[0])
