"""Forward passes: stacked LSTM steps/sequences and feed-forward heads.

Everything is batched over a leading axis B and written for float64. The
LSTM cell is the standard one: gates i, f, o via sigmoid, candidate g via
tanh, c' = f*c + i*g, h' = o*tanh(c').
"""

from __future__ import annotations

import numpy as np

from .arch import ArchitectureSpec, ParamViews


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z):
    return np.maximum(z, 0.0)


def apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return relu(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def init_lstm_state(arch: ArchitectureSpec, batch: int) -> list:
    """Zero (h, c) pair per layer; zeroed at the start of every episode."""
    return [(np.zeros((batch, h)), np.zeros((batch, h))) for h in arch.lstm_sizes]


def _cell(w_x, w_h, b, x, h, c):
    hidden = h.shape[-1]
    z = x @ w_x.T + h @ w_h.T + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden : 2 * hidden])
    g = np.tanh(z[..., 2 * hidden : 3 * hidden])
    o = sigmoid(z[..., 3 * hidden :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, (i, f, g, o)


def lstm_step(views: ParamViews, state: list, x: np.ndarray):
    """One time step through the stacked LSTM; returns (top h, new state)."""
    if x.ndim != 2 or x.shape[1] != views.arch.input_dim:
        raise ValueError("input shape does not match architecture")
    new_state = []
    inp = x
    for (w_x, w_h, b), (h, c) in zip(views.lstm, state):
        h_new, c_new, _ = _cell(w_x, w_h, b, inp, h, c)
        new_state.append((h_new, c_new))
        inp = h_new
    return inp, new_state


def lstm_forward(views: ParamViews, x_seq: np.ndarray, want_cache: bool = False):
    """Run a (T, B, input_dim) sequence from zero state.

    Returns the top-layer outputs (T, B, H_top) and, when requested, the
    per-layer caches needed for backpropagation through time.
    """
    steps, batch, _ = x_seq.shape
    caches = []
    inp_seq = x_seq
    for (w_x, w_h, b), hidden in zip(views.lstm, views.arch.lstm_sizes):
        h = np.zeros((batch, hidden))
        c = np.zeros((batch, hidden))
        cache = {
            "x": inp_seq,
            "h_prev": np.empty((steps, batch, hidden)),
            "c_prev": np.empty((steps, batch, hidden)),
            "i": np.empty((steps, batch, hidden)),
            "f": np.empty((steps, batch, hidden)),
            "g": np.empty((steps, batch, hidden)),
            "o": np.empty((steps, batch, hidden)),
            "c": np.empty((steps, batch, hidden)),
        }
        h_out = np.empty((steps, batch, hidden))
        for t in range(steps):
            cache["h_prev"][t] = h
            cache["c_prev"][t] = c
            h, c, (i, f, g, o) = _cell(w_x, w_h, b, inp_seq[t], h, c)
            cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t] = i, f, g, o
            cache["c"][t] = c
            h_out[t] = h
        if want_cache:
            caches.append(cache)
        inp_seq = h_out
    return inp_seq, caches


def feed_forward(views: ParamViews, head_index: int, x: np.ndarray, want_cache: bool = False):
    """Apply one FF head to (B, head_input_dim) activations."""
    head = views.arch.heads[head_index]
    cache = []
    a = x
    for (w, b), act in zip(views.heads[head_index], head.activations):
        z = a @ w.T + b
        out = apply_activation(act, z)
        if want_cache:
            cache.append((a, z, out))
        a = out
    if want_cache:
        return a, cache
    return a


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    diff = pred - target
    return float(np.mean(diff * diff))


def grouped_softmax(logits: np.ndarray, group_size: int) -> np.ndarray:
    """Softmax over trailing groups of `group_size` logits.

    (..., n_groups * group_size) -> (..., n_groups, group_size), rows sum to 1.
    """
    if logits.shape[-1] % group_size != 0:
        raise ValueError("logit length not divisible by group size")
    groups = logits.reshape(*logits.shape[:-1], -1, group_size)
    shifted = groups - groups.max(axis=-1, keepdims=True)
    expg = np.exp(shifted)
    return expg / expg.sum(axis=-1, keepdims=True)


def sample_grouped(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per group; uniforms shaped like probs minus last axis."""
    cdf = np.cumsum(probs, axis=-1)
    idx = np.sum(uniforms[..., None] >= cdf, axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def argmax_grouped(probs: np.ndarray) -> np.ndarray:
    """Deterministic decode; ties resolve to the lowest index."""
    return np.argmax(probs, axis=-1)
