"""Portable network checkpoints.

File layout (all integers little-endian):

    bytes 0..5   magic b"RLNN1\\n"
    bytes 6..9   uint32 header length L
    bytes 10..   UTF-8 JSON header of length L:
                   {"format": 1,
                    "architecture": {"input_dim", "lstm_sizes",
                                     "heads": [{"sizes", "activations"}, ...]},
                    "extra": {...},            # caller metadata
                    "param_count": N}
    then         N float64 values, little-endian, in the flat layout of
                 arch._blocks (LSTM layers w_x/w_h/b, then head layers w/b).
"""

from __future__ import annotations

import json

import numpy as np

from .arch import ArchitectureSpec, param_count

MAGIC = b"RLNN1\n"


def save_params(path, params: np.ndarray, arch: ArchitectureSpec, extra: dict | None = None) -> None:
    params = np.asarray(params, dtype=float)
    if params.shape != (param_count(arch),):
        raise ValueError("parameter vector does not match the architecture")
    header = {
        "format": 1,
        "architecture": arch.to_dict(),
        "extra": extra or {},
        "param_count": int(params.shape[0]),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        fh.write(params.astype("<f8").tobytes())


def load_params(path):
    """Returns (params, arch, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a risloc checkpoint")
        (length,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(length)).decode("utf-8"))
        arch = ArchitectureSpec.from_dict(header["architecture"])
        count = int(header["param_count"])
        params = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(float)
        if params.shape[0] != count or count != param_count(arch):
            raise ValueError(f"{path}: truncated or inconsistent checkpoint")
    return params, arch, header.get("extra", {})
