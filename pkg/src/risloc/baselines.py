"""Comparison schemes: RSS fingerprinting, supervised FF on random sensing,
and the uniform-power reference.

Fingerprinting stores one averaged RSS sequence per 1 m^2 block of the UE
region, all recorded under a single predetermined random profile sequence;
queries reuse that exact sequence. The supervised baseline regresses the
position from the flattened observation sequence of random episodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .agents import input_scale_for, make_supervised_arch, observation_dim, observation_encode
from .config import (
    STAGE_EVAL,
    STAGE_FP_DB,
    STAGE_FP_SEQUENCE,
    STAGE_SUP_DATA,
    STAGE_SUP_TRAIN,
    ExperimentConfig,
)
from .rollout import (
    EvalResult,
    FixedSequenceController,
    draw_episode_block,
    generate_random_episodes,
    run_episode_batch,
    target_normalization,
)
from .util import derive_rng, sha256_array


# -- fingerprinting ---------------------------------------------------------------

@dataclass
class FingerprintDB:
    block_centers: np.ndarray  # (n_blocks, 3)
    fingerprints: np.ndarray  # (n_blocks, T) mean RSS per block
    profile_sequence: np.ndarray  # (T, n_ris) shared by DB and queries
    power_sequence: np.ndarray | None  # (T,) fixed powers, or None for uniform draws
    grid_shape: tuple
    meta: dict

    @property
    def n_blocks(self) -> int:
        return self.block_centers.shape[0]

    def profile_hash(self) -> str:
        return sha256_array(self.profile_sequence.astype(np.int64))


def block_grid(geometry, block_size_m: float = 1.0):
    """Centers of the 1 m^2 blocks tiling the UE region's x-y extent."""
    nx = int(np.ceil(2.0 * geometry.ue_half_x / block_size_m)) or 1
    ny = int(np.ceil(2.0 * geometry.ue_half_y / block_size_m)) or 1
    x0 = geometry.ue_center_x - geometry.ue_half_x
    y0 = geometry.ue_center_y - geometry.ue_half_y
    xs = x0 + (np.arange(nx) + 0.5) * block_size_m
    ys = y0 + (np.arange(ny) + 0.5) * block_size_m
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.stack([xx.ravel(), yy.ravel(), np.full(nx * ny, geometry.ue_z)], axis=1)
    return centers, (nx, ny)


def rss_sequences(observations: np.ndarray) -> np.ndarray:
    """(T, B) complex -> (B, T) received signal strengths |y|^2."""
    return (np.abs(observations) ** 2).T


def build_fingerprint_db(cfg: ExperimentConfig) -> FingerprintDB:
    """Record fingerprints at every block center under the shared sequence."""
    scenario, rollout_cfg, fp = cfg.scenario, cfg.rollout, cfg.fingerprint
    seq_rng = derive_rng(cfg.master_seed, STAGE_FP_SEQUENCE)
    profile_seq = seq_rng.integers(
        0, scenario.phase_set.n, size=(rollout_cfg.horizon, scenario.geometry.n_ris)
    )
    power_seq = None
    if fp.query_power_mode == "fixed":
        power_seq = seq_rng.random(rollout_cfg.horizon) * rollout_cfg.power_max_watt

    centers, grid_shape = block_grid(scenario.geometry, fp.block_size_m)
    controller = FixedSequenceController(profile_seq, rollout_cfg.power_max_watt, power_seq)
    positions = np.repeat(centers, fp.samples_per_block, axis=0)
    db_rng = derive_rng(cfg.master_seed, STAGE_FP_DB)
    chunks = []
    for start in range(0, positions.shape[0], 4096):
        part = positions[start : start + 4096]
        draws = draw_episode_block(scenario, rollout_cfg, part.shape[0], db_rng, positions=part)
        batch = run_episode_batch(controller, draws, scenario, rollout_cfg)
        chunks.append(rss_sequences(batch.observations))
    rss = np.concatenate(chunks, axis=0).reshape(centers.shape[0], fp.samples_per_block, rollout_cfg.horizon)
    fingerprints = rss.mean(axis=1)
    return FingerprintDB(
        block_centers=centers,
        fingerprints=fingerprints,
        profile_sequence=profile_seq,
        power_sequence=power_seq,
        grid_shape=grid_shape,
        meta={
            "horizon": rollout_cfg.horizon,
            "n_ris": scenario.geometry.n_ris,
            "n_phases": scenario.phase_set.n,
            "samples_per_block": fp.samples_per_block,
            "block_size_m": fp.block_size_m,
            "query_power_mode": fp.query_power_mode,
            "k_neighbors": fp.k_neighbors,
        },
    )


def fingerprint_localize(db: FingerprintDB, query_rss: np.ndarray, k: int = 5) -> np.ndarray:
    """Inverse-distance-weighted mean of the k nearest block centers.

    (T,) -> (3,), or (Q, T) -> (Q, 3). Neighbors are ranked by Euclidean
    distance in RSS-sequence space, ties taking the lower block index. The
    weighting makes an exact fingerprint match return its own block center;
    a plain mean of the k centers smears along iso-RSS contours and loses
    several meters even on exact matches.
    """
    if db.n_blocks < k:
        raise ValueError(f"fingerprint database has {db.n_blocks} entries, need >= {k}")
    query = np.atleast_2d(np.asarray(query_rss, dtype=float))
    diff = query[:, None, :] - db.fingerprints[None, :, :]
    dist = np.einsum("qbt,qbt->qb", diff, diff)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    d_near = np.take_along_axis(dist, nearest, axis=1)
    # relative epsilon keeps ties finite and lets a zero distance dominate
    eps = 1e-12 * d_near[:, -1:] + 1e-300
    weights = 1.0 / (d_near + eps)
    weights /= weights.sum(axis=1, keepdims=True)
    estimates = np.einsum("qk,qkd->qd", weights, db.block_centers[nearest])
    return estimates[0] if np.asarray(query_rss).ndim == 1 else estimates


def evaluate_fingerprint(db: FingerprintDB, cfg: ExperimentConfig) -> EvalResult:
    """Query accuracy on the shared held-out eval block."""
    scenario, rollout_cfg = cfg.scenario, cfg.rollout
    controller = FixedSequenceController(db.profile_sequence, rollout_cfg.power_max_watt, db.power_sequence)
    rng = derive_rng(cfg.master_seed, STAGE_EVAL)
    n = cfg.training.eval_episodes
    k = cfg.fingerprint.k_neighbors
    sq_err = dist = power = 0.0
    remaining = n
    while remaining > 0:
        size = min(512, remaining)
        draws = draw_episode_block(scenario, rollout_cfg, size, rng)
        batch = run_episode_batch(controller, draws, scenario, rollout_cfg)
        estimates = fingerprint_localize(db, rss_sequences(batch.observations), k=k)
        err = np.linalg.norm(estimates - batch.positions, axis=1)
        sq_err += float(np.sum(err * err))
        dist += float(np.sum(err))
        power += float(np.sum(batch.power_totals()))
        remaining -= size
    return EvalResult(rmse_m=float(np.sqrt(sq_err / n)), mean_power=power / n, mean_distance=dist / n)


FP_MAGIC = b"RLFP1\n"


def save_fingerprint_db(path, db: FingerprintDB) -> None:
    header = dict(db.meta)
    header.update(
        {
            "format": 1,
            "n_blocks": db.n_blocks,
            "grid_shape": list(db.grid_shape),
            "has_power_sequence": db.power_sequence is not None,
            "profile_sha256": db.profile_hash(),
        }
    )
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FP_MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        fh.write(db.block_centers.astype("<f8").tobytes())
        fh.write(db.fingerprints.astype("<f8").tobytes())
        fh.write(db.profile_sequence.astype("<u2").tobytes())
        if db.power_sequence is not None:
            fh.write(db.power_sequence.astype("<f8").tobytes())


def load_fingerprint_db(path) -> FingerprintDB:
    with open(path, "rb") as fh:
        if fh.read(len(FP_MAGIC)) != FP_MAGIC:
            raise ValueError(f"{path}: not a fingerprint database")
        (length,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(length)).decode("utf-8"))
        n_blocks, horizon, n_ris = header["n_blocks"], header["horizon"], header["n_ris"]
        centers = np.frombuffer(fh.read(n_blocks * 3 * 8), dtype="<f8").reshape(n_blocks, 3).astype(float)
        prints = np.frombuffer(fh.read(n_blocks * horizon * 8), dtype="<f8").reshape(n_blocks, horizon)
        profiles = np.frombuffer(fh.read(horizon * n_ris * 2), dtype="<u2").reshape(horizon, n_ris)
        power_seq = None
        if header["has_power_sequence"]:
            power_seq = np.frombuffer(fh.read(horizon * 8), dtype="<f8").astype(float)
    db = FingerprintDB(
        block_centers=centers,
        fingerprints=prints.astype(float),
        profile_sequence=profiles.astype(np.int64),
        power_sequence=power_seq,
        grid_shape=tuple(header["grid_shape"]),
        meta={k: header[k] for k in ("horizon", "n_ris", "n_phases", "samples_per_block", "block_size_m", "query_power_mode", "k_neighbors")},
    )
    if db.profile_hash() != header["profile_sha256"]:
        raise ValueError(f"{path}: profile sequence hash mismatch")
    return db


# -- supervised feed-forward baseline ----------------------------------------------

@dataclass
class SupervisedModel:
    """FF regressor over the flattened, normalized observation sequence."""

    params: np.ndarray
    arch: nn.ArchitectureSpec
    observation_format: str
    input_scale: float
    output_offset: np.ndarray
    output_scale: np.ndarray

    def __post_init__(self):
        self.views = nn.ParamViews(self.arch, self.params)

    def flatten(self, observations: np.ndarray) -> np.ndarray:
        """(T, B) complex -> (B, T * obs_dim), time-major feature order."""
        enc = observation_encode(np.asarray(observations) * self.input_scale, self.observation_format)
        return enc.transpose(1, 0, 2).reshape(enc.shape[1], -1)

    def predict(self, observations: np.ndarray) -> np.ndarray:
        raw = nn.feed_forward(self.views, 0, self.flatten(observations))
        return self.output_offset + self.output_scale * raw


def train_supervised_baseline(cfg: ExperimentConfig):
    """Fit the FF baseline on random-profile, uniform-power episodes.

    Returns (model, history dict with losses and held-out RMSE in meters).
    """
    scenario, rollout_cfg, plan = cfg.scenario, cfg.rollout, cfg.training
    data = generate_random_episodes(
        plan.supervised_dataset_size, scenario, rollout_cfg, derive_rng(cfg.master_seed, STAGE_SUP_DATA)
    )
    obs_dim = observation_dim(rollout_cfg.observation_format)
    flat_dim = rollout_cfg.horizon * obs_dim
    arch = make_supervised_arch(flat_dim, cfg.networks.supervised_hidden)
    offset, scale = target_normalization(scenario)
    model = SupervisedModel(
        params=np.zeros(nn.param_count(arch)),
        arch=arch,
        observation_format=rollout_cfg.observation_format,
        input_scale=input_scale_for(scenario.channel.noise_power_watt),
        output_offset=offset,
        output_scale=scale,
    )
    inputs = model.flatten(data.observations)
    targets = (data.positions - offset) / scale

    rng = derive_rng(cfg.master_seed, STAGE_SUP_TRAIN)
    n_total = targets.shape[0]
    perm = rng.permutation(n_total)
    n_val = int(round(plan.validation_fraction * n_total))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    params = nn.init_params(arch, rng)
    state = nn.AdamState(learning_rate=plan.learning_rate)
    best_params, best_val, best_epoch = params.copy(), np.inf, -1
    train_losses, val_losses = [], []
    for epoch in range(plan.epochs):
        order = rng.permutation(train_idx.size)
        epoch_loss = 0.0
        for start in range(0, train_idx.size, plan.batch_size):
            rows = train_idx[order[start : start + plan.batch_size]]
            loss, grad = nn.backward_ff(params, arch, inputs[rows], targets[rows])
            params = nn.adam_step(params, grad, state)
            epoch_loss += loss * rows.size
        train_losses.append(epoch_loss / train_idx.size)
        if val_idx.size:
            views = nn.ParamViews(arch, params)
            val_loss = nn.mse_loss(nn.feed_forward(views, 0, inputs[val_idx]), targets[val_idx])
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch
                best_params = params.copy()
        else:
            best_params, best_epoch = params.copy(), epoch

    trained = SupervisedModel(
        params=best_params,
        arch=arch,
        observation_format=rollout_cfg.observation_format,
        input_scale=model.input_scale,
        output_offset=offset,
        output_scale=scale,
    )
    history = {
        "train_losses": train_losses,
        "val_losses": val_losses,
        "best_epoch": best_epoch,
    }
    if val_idx.size:
        pred = trained.predict(data.observations[:, val_idx])
        err = np.linalg.norm(pred - data.positions[val_idx], axis=1)
        history["heldout_rmse_m"] = float(np.sqrt(np.mean(err * err)))
    return trained, history
