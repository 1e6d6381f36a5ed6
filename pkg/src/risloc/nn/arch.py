"""Network shapes and the flat parameter vector layout.

All trainable weights of a network live in one float64 vector. The layout is
fixed by the architecture alone: LSTM layers first (w_x, w_h, b per layer,
gate row order input/forget/candidate/output), then each head's layers
(w, b). Views into the flat vector are plain numpy views, so gradients can
be accumulated in place through the same mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


@dataclass(frozen=True)
class HeadSpec:
    """Feed-forward stack: output size and activation per layer."""

    sizes: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.sizes) != len(self.activations):
            raise ValueError("one activation per layer required")
        if any(s < 1 for s in self.sizes):
            raise ValueError("layer sizes must be >= 1")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Stacked LSTM trunk (possibly empty) feeding one or more FF heads."""

    input_dim: int
    lstm_sizes: tuple
    heads: tuple

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(h < 1 for h in self.lstm_sizes):
            raise ValueError("lstm sizes must be >= 1")
        if not self.heads:
            raise ValueError("at least one head required")

    @property
    def head_input_dim(self) -> int:
        return self.lstm_sizes[-1] if self.lstm_sizes else self.input_dim

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "lstm_sizes": list(self.lstm_sizes),
            "heads": [
                {"sizes": list(h.sizes), "activations": list(h.activations)} for h in self.heads
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "ArchitectureSpec":
        return ArchitectureSpec(
            input_dim=int(data["input_dim"]),
            lstm_sizes=tuple(int(s) for s in data["lstm_sizes"]),
            heads=tuple(
                HeadSpec(tuple(int(s) for s in h["sizes"]), tuple(h["activations"]))
                for h in data["heads"]
            ),
        )


def _blocks(arch: ArchitectureSpec):
    """Yield (name, shape, fan_in) in flat-vector order."""
    dim = arch.input_dim
    for layer, hidden in enumerate(arch.lstm_sizes):
        fan = dim + hidden
        yield f"lstm{layer}.w_x", (4 * hidden, dim), fan
        yield f"lstm{layer}.w_h", (4 * hidden, hidden), fan
        yield f"lstm{layer}.b", (4 * hidden,), fan
        dim = hidden
    for h_idx, head in enumerate(arch.heads):
        dim = arch.head_input_dim
        for l_idx, out in enumerate(head.sizes):
            yield f"head{h_idx}.{l_idx}.w", (out, dim), dim
            yield f"head{h_idx}.{l_idx}.b", (out,), dim
            dim = out


def param_count(arch: ArchitectureSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _blocks(arch))


class ParamViews:
    """Named reshaped views into one flat parameter (or gradient) vector."""

    def __init__(self, arch: ArchitectureSpec, values: np.ndarray):
        values = np.asarray(values)
        expected = param_count(arch)
        if values.ndim != 1 or values.shape[0] != expected:
            raise ValueError(f"parameter vector must have length {expected}")
        self.arch = arch
        self.flat = values
        offset = 0
        self._by_name = {}
        for name, shape, _ in _blocks(arch):
            size = int(np.prod(shape))
            self._by_name[name] = values[offset : offset + size].reshape(shape)
            offset += size
        self.lstm = [
            (
                self._by_name[f"lstm{l}.w_x"],
                self._by_name[f"lstm{l}.w_h"],
                self._by_name[f"lstm{l}.b"],
            )
            for l in range(len(arch.lstm_sizes))
        ]
        self.heads = [
            [
                (self._by_name[f"head{h}.{l}.w"], self._by_name[f"head{h}.{l}.b"])
                for l in range(len(head.sizes))
            ]
            for h, head in enumerate(arch.heads)
        ]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._by_name[name]

    def names(self):
        return list(self._by_name)


def init_params(arch: ArchitectureSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] per block, biases included."""
    out = np.empty(param_count(arch))
    offset = 0
    for _, shape, fan in _blocks(arch):
        size = int(np.prod(shape))
        bound = 1.0 / np.sqrt(fan)
        out[offset : offset + size] = rng.uniform(-bound, bound, size)
        offset += size
    return out
