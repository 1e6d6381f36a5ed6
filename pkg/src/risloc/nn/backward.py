"""Exact reverse-mode gradients for the two trained topologies.

Only the graphs that are optimized with gradients live here: the recurrent
position estimator (LSTM -> mean over time -> FF head -> MSE) and the plain
feed-forward regressor. Policy and power networks are evolved, never
differentiated.
"""

from __future__ import annotations

import numpy as np

from .arch import ArchitectureSpec, ParamViews
from .forward import feed_forward, lstm_forward, mse_loss


def _activation_grad(name: str, z_in: np.ndarray, out: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    if name == "relu":
        return d_out * (z_in > 0)
    if name == "tanh":
        return d_out * (1.0 - out * out)
    if name == "sigmoid":
        return d_out * out * (1.0 - out)
    if name == "identity":
        return d_out
    raise ValueError(f"unknown activation {name!r}")


def _ff_backward(views: ParamViews, grad: ParamViews, head_index: int, cache, d_out: np.ndarray):
    head = views.arch.heads[head_index]
    for layer in reversed(range(len(head.sizes))):
        a_in, z, out = cache[layer]
        w, _ = views.heads[head_index][layer]
        gw, gb = grad.heads[head_index][layer]
        dz = _activation_grad(head.activations[layer], z, out, d_out)
        gw += dz.T @ a_in
        gb += dz.sum(axis=0)
        d_out = dz @ w
    return d_out


def _lstm_backward(views: ParamViews, grad: ParamViews, caches, d_top_seq: np.ndarray):
    """Backprop a (T, B, H_top) output gradient through all layers and steps."""
    d_out_seq = d_top_seq
    for layer in reversed(range(len(views.lstm))):
        w_x, w_h, _ = views.lstm[layer]
        gw_x, gw_h, gb = grad.lstm[layer]
        cache = caches[layer]
        steps, batch, hidden = d_out_seq.shape[0], d_out_seq.shape[1], cache["c"].shape[-1]
        d_x_seq = np.zeros_like(cache["x"])
        dh_carry = np.zeros((batch, hidden))
        dc_carry = np.zeros((batch, hidden))
        for t in reversed(range(steps)):
            i, f, g, o = cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t]
            tanh_c = np.tanh(cache["c"][t])
            dh = d_out_seq[t] + dh_carry
            dc = dh * o * (1.0 - tanh_c * tanh_c) + dc_carry
            dz_o = dh * tanh_c * o * (1.0 - o)
            dz_i = dc * g * i * (1.0 - i)
            dz_f = dc * cache["c_prev"][t] * f * (1.0 - f)
            dz_g = dc * i * (1.0 - g * g)
            dz = np.concatenate([dz_i, dz_f, dz_g, dz_o], axis=1)
            gw_x += dz.T @ cache["x"][t]
            gw_h += dz.T @ cache["h_prev"][t]
            gb += dz.sum(axis=0)
            d_x_seq[t] = dz @ w_x
            dh_carry = dz @ w_h
            dc_carry = dc * f
        d_out_seq = d_x_seq
    return d_out_seq


def backward_bptt(params: np.ndarray, arch: ArchitectureSpec, x_seq: np.ndarray, targets: np.ndarray):
    """Loss and exact gradient for LSTM -> mean over time -> head 0 -> MSE.

    x_seq is (T, B, input_dim); targets is (B, out). Raises if any
    intermediate stops being finite (diverged training is a hard error).
    """
    if not arch.lstm_sizes:
        raise ValueError("backward_bptt needs an LSTM trunk")
    steps = x_seq.shape[0]
    if steps < 1:
        raise ValueError("sequence must have at least one step")
    views = ParamViews(arch, params)
    grad_vec = np.zeros_like(params)
    grad = ParamViews(arch, grad_vec)

    h_seq, caches = lstm_forward(views, x_seq, want_cache=True)
    pooled = h_seq.mean(axis=0)
    pred, ff_cache = feed_forward(views, 0, pooled, want_cache=True)
    loss = mse_loss(pred, targets)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in backward_bptt")

    d_pred = 2.0 * (pred - targets) / pred.size
    d_pooled = _ff_backward(views, grad, 0, ff_cache, d_pred)
    d_top_seq = np.broadcast_to(d_pooled / steps, h_seq.shape).copy()
    _lstm_backward(views, grad, caches, d_top_seq)
    if not np.all(np.isfinite(grad_vec)):
        raise FloatingPointError("non-finite gradient in backward_bptt")
    return loss, grad_vec


def backward_ff(params: np.ndarray, arch: ArchitectureSpec, x: np.ndarray, targets: np.ndarray):
    """Loss and gradient for the pure feed-forward head 0 under MSE."""
    if arch.lstm_sizes:
        raise ValueError("backward_ff expects an architecture without LSTM layers")
    views = ParamViews(arch, params)
    grad_vec = np.zeros_like(params)
    grad = ParamViews(arch, grad_vec)
    pred, cache = feed_forward(views, 0, x, want_cache=True)
    loss = mse_loss(pred, targets)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in backward_ff")
    d_pred = 2.0 * (pred - targets) / pred.size
    _ff_backward(views, grad, 0, cache, d_pred)
    return loss, grad_vec
