import numpy as np
import pytest

from risloc import nn

RNG = np.random.default_rng


def small_arch(input_dim=2, lstm=(4, 3), head=(5, 3)):
    return nn.ArchitectureSpec(
        input_dim=input_dim,
        lstm_sizes=lstm,
        heads=(nn.HeadSpec(head, ("relu",) * (len(head) - 1) + ("identity",)),),
    )


# -- scalar-loop oracles (independent of the vectorized implementation) -----------

def scalar_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def scalar_lstm_step(views, state, x):
    """Unit-by-unit LSTM reference; x is a 1-D input vector."""
    new_state = []
    inp = list(x)
    for (w_x, w_h, b), (h, c) in zip(views.lstm, state):
        hidden = len(h)
        z = [0.0] * (4 * hidden)
        for r in range(4 * hidden):
            acc = b[r]
            for j, xv in enumerate(inp):
                acc += w_x[r, j] * xv
            for j in range(hidden):
                acc += w_h[r, j] * h[j]
            z[r] = acc
        h_new, c_new = [0.0] * hidden, [0.0] * hidden
        for u in range(hidden):
            i = scalar_sigmoid(z[u])
            f = scalar_sigmoid(z[hidden + u])
            g = np.tanh(z[2 * hidden + u])
            o = scalar_sigmoid(z[3 * hidden + u])
            c_new[u] = f * c[u] + i * g
            h_new[u] = o * np.tanh(c_new[u])
        new_state.append((h_new, c_new))
        inp = h_new
    return inp, new_state


def scalar_feed_forward(views, head_index, activations, x):
    a = list(x)
    for (w, b), act in zip(views.heads[head_index], activations):
        out = []
        for r in range(w.shape[0]):
            acc = b[r]
            for j, av in enumerate(a):
                acc += w[r, j] * av
            if act == "relu":
                acc = max(acc, 0.0)
            elif act == "tanh":
                acc = np.tanh(acc)
            elif act == "sigmoid":
                acc = scalar_sigmoid(acc)
            out.append(acc)
        a = out
    return np.array(a)


# -- layout -------------------------------------------------------------------------

class TestLayout:
    def test_param_count_closed_form_policy(self):
        # LSTM layers: 4H(D + H + 1); FF layers: out(in + 1)
        for n_ris, n_phases in ((16, 2), (400, 2), (16, 4)):
            arch = nn.ArchitectureSpec(
                input_dim=2,
                lstm_sizes=(512, 512),
                heads=(
                    nn.HeadSpec((128, n_ris * n_phases), ("relu", "identity")),
                    nn.HeadSpec((32, 1), ("relu", "identity")),
                ),
            )
            expected = (
                4 * 512 * (2 + 512 + 1)
                + 4 * 512 * (512 + 512 + 1)
                + 128 * (512 + 1)
                + n_ris * n_phases * (128 + 1)
                + 32 * (512 + 1)
                + 1 * (32 + 1)
            )
            assert nn.param_count(arch) == expected

    def test_flatten_unflatten_roundtrip(self):
        arch = small_arch()
        vec = RNG(0).standard_normal(nn.param_count(arch))
        views = nn.ParamViews(arch, vec)
        rebuilt = np.concatenate([views[name].ravel() for name in views.names()])
        np.testing.assert_array_equal(rebuilt, vec)
        views["lstm0.b"][0] = 42.0  # views alias the flat vector
        assert vec[4 * 4 * (2 + 4)] == 42.0

    def test_wrong_length_rejected(self):
        arch = small_arch()
        with pytest.raises(ValueError):
            nn.ParamViews(arch, np.zeros(nn.param_count(arch) + 1))

    def test_init_bounds(self):
        arch = small_arch()
        vec = nn.init_params(arch, RNG(1))
        views = nn.ParamViews(arch, vec)
        bound0 = 1.0 / np.sqrt(2 + 4)
        assert np.max(np.abs(views["lstm0.w_x"])) <= bound0
        assert np.max(np.abs(views["lstm0.b"])) <= bound0
        bound_head = 1.0 / np.sqrt(3)
        assert np.max(np.abs(views["head0.0.w"])) <= bound_head


# -- forward ------------------------------------------------------------------------

class TestForward:
    def test_zero_params_zero_state(self):
        arch = small_arch()
        views = nn.ParamViews(arch, np.zeros(nn.param_count(arch)))
        h, state = nn.lstm_step(views, nn.init_lstm_state(arch, 3), RNG(2).standard_normal((3, 2)))
        np.testing.assert_array_equal(h, np.zeros((3, 3)))
        for h_l, c_l in state:
            np.testing.assert_array_equal(c_l, np.zeros_like(c_l))

    def test_bias_only_closed_form(self):
        arch = nn.ArchitectureSpec(2, (2,), (nn.HeadSpec((1,), ("identity",)),))
        vec = np.zeros(nn.param_count(arch))
        views = nn.ParamViews(arch, vec)
        views["lstm0.b"][:] = np.array([0.3, -0.2, 0.1, 0.4, -0.5, 0.25, 0.6, -0.1])
        h, _ = nn.lstm_step(views, nn.init_lstm_state(arch, 1), np.zeros((1, 2)))
        b = views["lstm0.b"]
        for u in range(2):
            i = scalar_sigmoid(b[u])
            g = np.tanh(b[4 + u])
            o = scalar_sigmoid(b[6 + u])
            c = i * g  # zero initial cell
            assert h[0, u] == pytest.approx(o * np.tanh(c), rel=1e-15)

    def test_lstm_matches_scalar_oracle(self):
        arch = small_arch()
        vec = RNG(3).standard_normal(nn.param_count(arch))
        views = nn.ParamViews(arch, vec)
        state = nn.init_lstm_state(arch, 1)
        scalar_state = [([0.0] * h, [0.0] * h) for h in arch.lstm_sizes]
        rng = RNG(4)
        for _ in range(4):
            x = rng.standard_normal(2)
            h, state = nn.lstm_step(views, state, x[None, :])
            h_ref, scalar_state = scalar_lstm_step(views, scalar_state, x)
            np.testing.assert_allclose(h[0], h_ref, rtol=1e-12, atol=1e-14)

    def test_ff_identity_bias(self):
        arch = nn.ArchitectureSpec(3, (), (nn.HeadSpec((2,), ("identity",)),))
        vec = np.zeros(nn.param_count(arch))
        nn.ParamViews(arch, vec)["head0.0.b"][:] = [1.5, -2.5]
        out = nn.feed_forward(nn.ParamViews(arch, vec), 0, np.zeros((1, 3)))
        np.testing.assert_allclose(out, [[1.5, -2.5]])

    def test_ff_relu_clips_negative(self):
        arch = nn.ArchitectureSpec(1, (), (nn.HeadSpec((2,), ("relu",)),))
        vec = np.zeros(nn.param_count(arch))
        nn.ParamViews(arch, vec)["head0.0.b"][:] = [-1.0, 2.0]
        out = nn.feed_forward(nn.ParamViews(arch, vec), 0, np.zeros((1, 1)))
        np.testing.assert_allclose(out, [[0.0, 2.0]])

    def test_ff_matches_scalar_oracle(self):
        arch = nn.ArchitectureSpec(
            4, (), (nn.HeadSpec((6, 5, 2), ("relu", "tanh", "identity")),)
        )
        vec = RNG(5).standard_normal(nn.param_count(arch))
        views = nn.ParamViews(arch, vec)
        x = RNG(6).standard_normal(4)
        out = nn.feed_forward(views, 0, x[None, :])
        ref = scalar_feed_forward(views, 0, ("relu", "tanh", "identity"), x)
        np.testing.assert_allclose(out[0], ref, rtol=1e-12, atol=1e-14)

    def test_forward_determinism(self):
        arch = small_arch()
        vec = RNG(7).standard_normal(nn.param_count(arch))
        x_seq = RNG(8).standard_normal((5, 2, 2))
        a, _ = nn.lstm_forward(nn.ParamViews(arch, vec), x_seq)
        b, _ = nn.lstm_forward(nn.ParamViews(arch, vec), x_seq)
        np.testing.assert_array_equal(a, b)


class TestMse:
    def test_exact_match_is_zero(self):
        assert nn.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_arithmetic(self):
        assert nn.mse_loss(np.array([1.0, 0.0, 0.0]), np.zeros(3)) == pytest.approx(1 / 3)

    def test_matches_direct_sum(self):
        rng = RNG(9)
        a, b = rng.standard_normal(17), rng.standard_normal(17)
        assert nn.mse_loss(a, b) == pytest.approx(np.sum((a - b) ** 2) / 17, rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.mse_loss(np.zeros(2), np.zeros(3))


class TestGroupedSoftmax:
    def test_rows_sum_to_one(self):
        logits = RNG(10).standard_normal((7, 4 * 3))
        probs = nn.grouped_softmax(logits, 3)
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones((7, 4)), atol=1e-9)

    def test_equal_logits_uniform(self):
        probs = nn.grouped_softmax(np.zeros((1, 8)), 2)
        np.testing.assert_allclose(probs, 0.5 * np.ones((1, 4, 2)), atol=1e-9)

    def test_argmax_tie_lowest_index(self):
        probs = nn.grouped_softmax(np.zeros((1, 6)), 3)
        np.testing.assert_array_equal(nn.argmax_grouped(probs), [[0, 0]])

    def test_sample_frequencies(self):
        probs = np.tile([0.2, 0.5, 0.3], (100_000, 1, 1))
        idx = nn.sample_grouped(probs, RNG(11).random((100_000, 1)))
        freq = np.bincount(idx.ravel(), minlength=3) / idx.size
        np.testing.assert_allclose(freq, [0.2, 0.5, 0.3], atol=0.01)


# -- gradients -----------------------------------------------------------------------

def fd_gradient(loss_fn, params, indices, eps=1e-5):
    grad = np.zeros(len(indices))
    for k, idx in enumerate(indices):
        up, down = params.copy(), params.copy()
        up[idx] += eps
        down[idx] -= eps
        grad[k] = (loss_fn(up) - loss_fn(down)) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.max(np.abs(analytic - numeric) / denom)


class TestBackward:
    def test_bptt_full_finite_difference_small(self):
        arch = small_arch(input_dim=2, lstm=(4,), head=(3,))
        rng = RNG(12)
        params = nn.init_params(arch, rng)
        x_seq = rng.standard_normal((3, 2, 2))
        targets = rng.standard_normal((2, 3))
        _, grad = nn.backward_bptt(params, arch, x_seq, targets)

        def loss_fn(p):
            views = nn.ParamViews(arch, p)
            h_seq, _ = nn.lstm_forward(views, x_seq)
            pred = nn.feed_forward(views, 0, h_seq.mean(axis=0))
            return nn.mse_loss(pred, targets)

        fd = fd_gradient(loss_fn, params, range(len(params)))
        assert max_rel_error(grad, fd) < 1e-4

    def test_bptt_zero_residual_zero_bias_grad(self):
        arch = small_arch()
        rng = RNG(13)
        params = nn.init_params(arch, rng)
        x_seq = rng.standard_normal((4, 3, 2))
        views = nn.ParamViews(arch, params)
        h_seq, _ = nn.lstm_forward(views, x_seq)
        pred = nn.feed_forward(views, 0, h_seq.mean(axis=0))
        loss, grad = nn.backward_bptt(params, arch, x_seq, pred.copy())
        assert loss == 0.0
        out_bias = nn.ParamViews(arch, grad)["head0.1.b"]
        np.testing.assert_array_equal(out_bias, np.zeros_like(out_bias))

    def test_bptt_gradient_linear_in_residual(self):
        arch = small_arch()
        rng = RNG(14)
        params = nn.init_params(arch, rng)
        x_seq = rng.standard_normal((3, 2, 2))
        views = nn.ParamViews(arch, params)
        h_seq, _ = nn.lstm_forward(views, x_seq)
        pred = nn.feed_forward(views, 0, h_seq.mean(axis=0))
        residual = rng.standard_normal(pred.shape)
        _, g1 = nn.backward_bptt(params, arch, x_seq, pred - residual)
        _, g2 = nn.backward_bptt(params, arch, x_seq, pred - 2 * residual)
        out1 = nn.ParamViews(arch, g1)["head0.1.w"]
        out2 = nn.ParamViews(arch, g2)["head0.1.w"]
        np.testing.assert_allclose(out2, 2 * out1, rtol=1e-12)

    def test_ff_finite_difference(self):
        arch = nn.ArchitectureSpec(5, (), (nn.HeadSpec((8, 3), ("relu", "identity")),))
        rng = RNG(15)
        params = nn.init_params(arch, rng)
        x = rng.standard_normal((4, 5))
        targets = rng.standard_normal((4, 3))
        _, grad = nn.backward_ff(params, arch, x, targets)

        def loss_fn(p):
            return nn.mse_loss(nn.feed_forward(nn.ParamViews(arch, p), 0, x), targets)

        fd = fd_gradient(loss_fn, params, range(len(params)))
        assert max_rel_error(grad, fd) < 1e-4

    def test_bptt_requires_sequence(self):
        arch = small_arch()
        with pytest.raises(ValueError):
            nn.backward_bptt(np.zeros(nn.param_count(arch)), arch, np.zeros((0, 1, 2)), np.zeros((1, 3)))


class TestAdam:
    def test_zero_gradient_no_change(self):
        params = RNG(16).standard_normal(10)
        state = nn.AdamState(learning_rate=0.01)
        updated = nn.adam_step(params, np.zeros(10), state)
        np.testing.assert_array_equal(updated, params)

    def test_first_step_is_signed_lr(self):
        # closed form: first Adam step is -lr * g / (|g| + eps) ~ -lr * sign(g)
        params = np.zeros(4)
        grad = np.array([3.0, -0.5, 1e-3, -7.0])
        state = nn.AdamState(learning_rate=0.01)
        updated = nn.adam_step(params, grad, state)
        np.testing.assert_allclose(updated, -0.01 * np.sign(grad), rtol=1e-4)

    def test_constant_gradient_monotone_drift(self):
        params = np.zeros(3)
        grad = np.array([1.0, 2.0, -1.0])
        state = nn.AdamState(learning_rate=0.01)
        prev = params
        for _ in range(20):
            new = nn.adam_step(prev, grad, state)
            assert np.all((new - prev) * np.sign(grad) < 0)
            prev = new


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        arch = small_arch()
        params = RNG(17).standard_normal(nn.param_count(arch))
        path = tmp_path / "net.ckpt"
        nn.save_params(path, params, arch, {"input_scale": 3.5, "kind": "estimator"})
        loaded, arch2, extra = nn.load_params(path)
        np.testing.assert_array_equal(loaded, params)
        assert arch2 == arch
        assert extra["input_scale"] == 3.5

    def test_truncated_file_rejected(self, tmp_path):
        arch = small_arch()
        params = RNG(18).standard_normal(nn.param_count(arch))
        path = tmp_path / "net.ckpt"
        nn.save_params(path, params, arch, {})
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(ValueError):
            nn.load_params(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            nn.load_params(path)
