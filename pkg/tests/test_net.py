import numpy as np
import pytest

from flowinverse import tensor as T
from flowinverse.net import (NetConfig, VelocityNet, build_tokens, init_params,
                             mlp_forward, param_count, timestep_basis,
                             timestep_embed, transformer_forward)
from flowinverse.tasks import get_task


class TestTimestepEmbed:
    def test_basis_at_zero(self):
        b = timestep_basis(np.array([0.0]), 8)
        np.testing.assert_array_equal(b[0, :4], 0.0)
        np.testing.assert_array_equal(b[0, 4:], 1.0)

    def test_frequency_range(self):
        b4 = timestep_basis(np.array([1.0]), 4)
        # two frequencies, log-spaced over [1, 1e4]
        assert b4[0, 0] == pytest.approx(np.sin(1.0), abs=1e-6)
        assert b4[0, 1] == pytest.approx(np.sin(10000.0 % (2 * np.pi)), abs=1e-3)

    def test_determinism(self):
        cfg = NetConfig(n_emb=8, n_head=2, dim_m=1)
        params = init_params(cfg, seed=3)
        a = timestep_embed(params, np.array([0.37]), 8).data
        b = timestep_embed(params, np.array([0.37]), 8).data
        np.testing.assert_array_equal(a, b)

    def test_tiny_perturbation(self):
        cfg = NetConfig(n_emb=8, n_head=2, dim_m=1)
        params = init_params(cfg, seed=3)
        a = timestep_embed(params, np.array([0.5]), 8).data
        b = timestep_embed(params, np.array([0.5 + 1e-9]), 8).data
        assert np.abs(a - b).max() < 1e-6

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            timestep_basis(np.array([1.5]), 8)


class TestRope:
    def test_position_zero_is_identity(self):
        x = T.Tensor(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
        out = T.rope_apply(x, positions=[0, 0, 0])
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_norm_preserved(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.normal(size=(5, 8)).astype(np.float32))
        out = T.rope_apply(x, positions=[0, 3, 17, 101, 9])
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1),
                                   np.linalg.norm(x.data, axis=-1), atol=1e-5)

    def test_relative_position_property(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(1, 8)).astype(np.float32)
        k = rng.normal(size=(1, 8)).astype(np.float32)

        def dot(p1, p2):
            rq = T.rope_apply(T.Tensor(q), positions=[p1]).data[0]
            rk = T.rope_apply(T.Tensor(k), positions=[p2]).data[0]
            return float(rq @ rk)

        for shift in (1, 4, 23):
            assert dot(3, 7) == pytest.approx(dot(3 + shift, 7 + shift), abs=1e-4)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            T.rope_apply(T.Tensor(np.ones((2, 3))), positions=[0, 1])

    def test_attention_scores_shift_invariant(self):
        """Assembled rope->scores->softmax path is unchanged by shifting all
        positions by a constant."""
        rng = np.random.default_rng(3)
        q = rng.normal(size=(1, 1, 6, 8)).astype(np.float32)
        k = rng.normal(size=(1, 1, 6, 8)).astype(np.float32)

        def weights(positions):
            rq = T.rope_apply(T.Tensor(q), positions)
            rk = T.rope_apply(T.Tensor(k), positions)
            scores = T.scale(T.matmul(rq, T.transpose(rk, (0, 1, 3, 2))), 1 / np.sqrt(8))
            return T.softmax_lastdim(scores).data

        base = weights(np.arange(6))
        shifted = weights(np.arange(6) + 11)
        assert np.abs(base - shifted).max() < 1e-4


class TestTokenize:
    def test_seir_counts(self):
        task = get_task("seir")
        d = np.zeros((1, 8))
        e = np.full((1, 4), 2.0)
        toks = build_tokens(task, np.zeros((1, 6)), d, e)
        assert toks.n_tokens == 5
        assert list(toks.positions) == [0, 1, 2, 3, 4]

    def test_darcy_counts(self):
        task = get_task("darcy")
        e = np.concatenate([[0.3, 0.7], np.random.default_rng(0).uniform(0.1, 0.9, 16)])
        toks = build_tokens(task, np.zeros((1, 16)), np.zeros((1, 8)), e[None, :])
        assert toks.n_tokens == 10     # 8 observations + design + state

    def test_nonlinear_counts(self):
        task = get_task("nonlinear")
        toks = build_tokens(task, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        assert toks.n_tokens == 2

    def test_empty_observations_rejected(self):
        task = get_task("nonlinear")
        with pytest.raises(ValueError, match="empty"):
            build_tokens(task, np.zeros((1, 1)), np.zeros((1, 0)), np.zeros((1, 0)))


def micro_oracle(params, m_t, t, d, e):
    """Independent plain-numpy forward pass for a 1-layer, 1-head, n_emb=2
    transformer on the scalar task; written from scratch against the
    documented architecture, no shared code with the engine."""
    def lin(x, w, b):
        return x @ w + b

    def rms(x, g, eps=1e-8):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * g

    p = {k: v.data.astype(np.float64) for k, v in params.items()}
    obs = np.array([[d, e]])                                  # (1 obs token, feat 2)
    tokens = np.concatenate([lin(obs, p["embed.obs.w"], p["embed.obs.b"]),
                             lin(np.array([[m_t]]) @ p["embed.state.w"]
                                 + p["embed.state.b"], np.eye(2), np.zeros(2))], axis=0)
    freqs = np.array([1.0])                                   # dim 2 -> one sin, one cos
    basis = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])
    h = np.maximum(lin(basis, p["temb.fc1.w"], p["temb.fc1.b"]), 0) ** 2
    temb = lin(h, p["temb.fc2.w"], p["temb.fc2.b"])
    tokens = tokens + temb

    x = rms(tokens, p["block0.ln1.g"])
    q = lin(x, p["block0.attn.wq.w"], p["block0.attn.wq.b"])
    k = lin(x, p["block0.attn.wk.w"], p["block0.attn.wk.b"])
    v = lin(x, p["block0.attn.wv.w"], p["block0.attn.wv.b"])
    for arr, pos in ((q, (0, 1)), (k, (0, 1))):
        for i, ppos in enumerate(pos):
            c, s = np.cos(ppos * 1.0), np.sin(ppos * 1.0)    # theta_0 = base^0 = 1
            x0, x1 = arr[i, 0], arr[i, 1]
            arr[i, 0] = x0 * c - x1 * s
            arr[i, 1] = x0 * s + x1 * c
    scores = q @ k.T / np.sqrt(2.0)
    w = np.exp(scores - scores.max(-1, keepdims=True))
    w = w / w.sum(-1, keepdims=True)
    attn = lin(w @ v, p["block0.attn.wo.w"], p["block0.attn.wo.b"])
    tokens = tokens + attn
    x = rms(tokens, p["block0.ln2.g"])
    x = np.maximum(lin(x, p["block0.mlp.fc.w"], p["block0.mlp.fc.b"]), 0) ** 2
    tokens = tokens + lin(x, p["block0.mlp.proj.w"], p["block0.mlp.proj.b"])
    out = rms(tokens, p["ln_f.g"])
    return lin(out[-1], p["head.w"], p["head.b"])


class TestTransformerForward:
    def test_output_shape_any_n_obs(self):
        task = get_task("nonlinear")
        cfg = NetConfig(n_emb=8, n_head=2, n_layer=2, dim_m=1, obs_token_dim=2)
        net = VelocityNet(task, cfg, seed=0)
        for n_obs in range(1, 17):
            rng = np.random.default_rng(n_obs)
            out = net.velocity(rng.uniform(0, 1, (3, 1)), 0.4,
                               rng.normal(size=(3, n_obs)), rng.uniform(0, 1, (3, n_obs)))
            assert out.shape == (3, 1)
            assert np.isfinite(out).all()

    def test_micro_config_matches_hand_oracle(self):
        task = get_task("nonlinear")
        cfg = NetConfig(n_emb=2, n_head=1, n_layer=1, dim_m=1, obs_token_dim=2)
        params = init_params(cfg, seed=7)
        m_t, t, d, e = 0.3, 0.6, 0.8, 0.2
        got = transformer_forward(params, cfg, task,
                                  np.array([[m_t]], dtype=np.float32), t,
                                  np.array([[d]]), np.array([[e]])).data[0, 0]
        want = micro_oracle(params, m_t, t, d, e)[0]
        assert got == pytest.approx(want, abs=1e-5)

    def test_bitwise_determinism(self):
        task = get_task("seir")
        cfg = NetConfig(n_emb=16, n_head=2, n_layer=2, dim_m=6, obs_token_dim=3)
        net = VelocityNet(task, cfg, seed=1)
        rng = np.random.default_rng(0)
        m_t = rng.uniform(0, 1, (2, 6))
        d = rng.uniform(0, 50, (2, 8))
        e = rng.uniform(1, 3, (2, 4))
        a = net.velocity(m_t, 0.3, d, e)
        b = net.velocity(m_t, 0.3, d, e)
        np.testing.assert_array_equal(a, b)

    def test_param_count_pure_function_of_config(self):
        cfg = NetConfig(n_emb=32, n_head=4, n_layer=4, dim_m=16,
                        obs_token_dim=3, design_token_dim=2)
        n1 = param_count(init_params(cfg, seed=0))
        n2 = param_count(init_params(cfg, seed=999))
        assert n1 == n2

    def test_end_to_end_gradients_micro_config(self):
        task = get_task("nonlinear")
        cfg = NetConfig(n_emb=8, n_head=2, n_layer=2, dim_m=1, obs_token_dim=2)
        params = init_params(cfg, seed=2)
        rng = np.random.default_rng(0)
        m_t = rng.uniform(0, 1, (2, 1))
        d = rng.normal(size=(2, 3))
        e = rng.uniform(0, 1, (2, 3))
        target = rng.normal(size=(2, 1)).astype(np.float64)

        def fn(p):
            v = transformer_forward(p, cfg, task, m_t.astype(np.float32), 0.5, d, e)
            diff = T.sub(v, T.Tensor(target, dtype=v.dtype))
            return T.mean_all(T.mul(diff, diff))

        worst = T.finite_difference_check(fn, params, max_entries=6)
        assert worst < 1e-4


class TestMlpForward:
    def test_output_shape(self):
        task = get_task("seir")
        cfg = NetConfig(n_emb=32, n_head=4, dim_m=6, obs_token_dim=3, arch="mlp")
        net = VelocityNet(task, cfg, seed=0)
        rng = np.random.default_rng(0)
        out = net.velocity(rng.uniform(0, 1, (5, 6)), 0.2,
                           rng.uniform(0, 60, (5, 8)), rng.uniform(1, 3, (5, 4)))
        assert out.shape == (5, 6)

    def test_zero_weights_zero_velocity(self):
        task = get_task("seir")
        cfg = NetConfig(n_emb=32, n_head=4, dim_m=6, obs_token_dim=3, arch="mlp")
        params = init_params(cfg, seed=0)
        for p in params.values():
            p.data[...] = 0.0
        out = mlp_forward(params, cfg, task, np.zeros((2, 6), dtype=np.float32), 0.7,
                          np.zeros((2, 8)), np.ones((2, 4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_wrong_observation_count(self):
        task = get_task("seir")
        cfg = NetConfig(n_emb=32, n_head=4, dim_m=6, obs_token_dim=3, arch="mlp")
        net = VelocityNet(task, cfg, seed=0)
        with pytest.raises(ValueError, match="observations"):
            net.velocity(np.zeros((1, 6)), 0.2, np.zeros((1, 10)), np.ones((1, 5)))

    def test_gradient_matches_finite_differences(self):
        task = get_task("seir")
        cfg = NetConfig(n_emb=8, n_head=2, dim_m=6, obs_token_dim=3,
                        arch="mlp", mlp_hidden=16)
        params = init_params(cfg, seed=4)
        rng = np.random.default_rng(1)
        m_t = rng.uniform(0, 1, (2, 6)).astype(np.float32)
        d = rng.uniform(0, 60, (2, 8))
        e = rng.uniform(1, 3, (2, 4))
        target = rng.normal(size=(2, 6))

        def fn(p):
            v = mlp_forward(p, cfg, task, m_t, 0.3, d, e)
            diff = T.sub(v, T.Tensor(target, dtype=v.dtype))
            return T.mean_all(T.mul(diff, diff))

        assert T.finite_difference_check(fn, params, max_entries=8) < 1e-4


class TestConfigValidation:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            NetConfig(n_emb=30, n_head=4)

    def test_rejects_odd_head_dim(self):
        with pytest.raises(ValueError):
            NetConfig(n_emb=6, n_head=2)     # head_dim 3

    def test_rejects_unknown_arch(self):
        with pytest.raises(ValueError):
            NetConfig(arch="rnn")
