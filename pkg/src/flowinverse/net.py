"""Velocity-field networks: a sequence transformer and a fixed-input MLP.

The transformer turns the conditioning observations into a token sequence,
adds a sinusoidal-plus-MLP embedding of the flow time to every token, and
runs bi-directional self-attention with rotary position embeddings. The
state token (placed last) is read out through a linear head to produce a
velocity of the parameter dimension. Because positions enter only through
relative rotations, the same weights accept any number of observation
tokens, including more than were ever seen in training.

The MLP variant flattens everything into one vector and therefore only
works for a fixed observation count.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    n_emb: int = 32
    n_head: int = 4
    n_layer: int = 4
    dim_m: int = 1
    obs_token_dim: int = 2
    design_token_dim: int = 0     # 0: no design token in the sequence
    rope_base: float = 10000.0
    arch: str = "transformer"     # "transformer" | "mlp"
    mlp_hidden: int = 256
    mlp_n_obs: int = 4            # fixed observation count for arch="mlp"

    def __post_init__(self):
        if self.arch not in ("transformer", "mlp"):
            raise ValueError(f"unknown arch '{self.arch}'")
        if self.n_emb % self.n_head != 0:
            raise ValueError(f"n_emb={self.n_emb} not divisible by n_head={self.n_head}")
        if (self.n_emb // self.n_head) % 2 != 0:
            raise ValueError("head dimension must be even (rotary embeddings pair dims)")
        if self.dim_m < 1 or self.obs_token_dim < 1:
            raise ValueError("dim_m and obs_token_dim must be >= 1")

    @property
    def head_dim(self):
        return self.n_emb // self.n_head

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def timestep_basis(t, dim: int) -> np.ndarray:
    """Sinusoidal features of a flow time in [0, 1]: half sines, half cosines,
    with frequencies log-spaced over [1, 1e4]."""
    t = np.asarray(t, dtype=np.float32)
    if np.any(t < -1e-6) or np.any(t > 1 + 1e-6):
        raise ValueError(f"flow time must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    t = np.clip(t, 0.0, 1.0)
    half = dim // 2
    freqs = (10000.0 ** (np.arange(half) / max(half - 1, 1))).astype(np.float32)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def timestep_embed(params: dict, t, dim: int) -> Tensor:
    """Sinusoidal basis followed by a 2-layer MLP with squared-ReLU."""
    basis = Tensor(timestep_basis(t, dim), dtype=params["temb.fc1.w"].dtype)
    h = T.relu_squared(_linear(basis, params, "temb.fc1"))
    return _linear(h, params, "temb.fc2")


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

@dataclass
class TokenSequence:
    """Raw token features before projection into the embedding space."""
    obs: np.ndarray              # (batch, n_obs, obs_token_dim)
    design: np.ndarray | None    # (batch, 1, design_token_dim) or None
    positions: np.ndarray        # (n_tokens,) 0-based, state token last

    @property
    def n_tokens(self):
        return self.obs.shape[1] + (0 if self.design is None else 1) + 1


def build_tokens(task, m_t: np.ndarray, d: np.ndarray, e: np.ndarray) -> TokenSequence:
    """Assemble the per-task observation/design token features.

    ``task`` provides ``token_features(d, e) -> (obs, design)``; the state
    token is always a projection of ``m_t`` and sits at the last position so
    appending observations never renumbers existing tokens.
    """
    obs, design = task.token_features(d, e)
    if obs.shape[1] == 0:
        raise ValueError("cannot tokenize an empty observation list")
    n = obs.shape[1] + (0 if design is None else 1) + 1
    return TokenSequence(obs=obs, design=design, positions=np.arange(n))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(config: NetConfig, seed: int = 0) -> dict:
    """Initialize all learnable weights; layout is a pure function of config."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x706172)))
    params: dict[str, Tensor] = {}

    def w(name, shape, std):
        params[name] = Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)

    def b(name, dim):
        params[name] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def g(name, dim):
        params[name] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)

    E = config.n_emb
    if config.arch == "mlp":
        d_in = _mlp_input_dim(config)
        w("temb.fc1.w", (E, E), 0.02); b("temb.fc1.b", E)
        w("temb.fc2.w", (E, E), 0.02); b("temb.fc2.b", E)
        h = config.mlp_hidden
        w("mlp.l1.w", (d_in, h), (2.0 / d_in) ** 0.5); b("mlp.l1.b", h)
        w("mlp.l2.w", (h, h), (2.0 / h) ** 0.5); b("mlp.l2.b", h)
        w("mlp.l3.w", (h, h), (2.0 / h) ** 0.5); b("mlp.l3.b", h)
        w("head.w", (h, config.dim_m), 0.02); b("head.b", config.dim_m)
        return params

    w("embed.obs.w", (config.obs_token_dim, E), 0.02); b("embed.obs.b", E)
    if config.design_token_dim > 0:
        w("embed.design.w", (config.design_token_dim, E), 0.02); b("embed.design.b", E)
    w("embed.state.w", (config.dim_m, E), 0.02); b("embed.state.b", E)
    w("temb.fc1.w", (E, E), 0.02); b("temb.fc1.b", E)
    w("temb.fc2.w", (E, E), 0.02); b("temb.fc2.b", E)
    resid_std = 0.02 / (2 * config.n_layer) ** 0.5
    for i in range(config.n_layer):
        p = f"block{i}"
        g(f"{p}.ln1.g", E)
        w(f"{p}.attn.wq.w", (E, E), 0.02); b(f"{p}.attn.wq.b", E)
        w(f"{p}.attn.wk.w", (E, E), 0.02); b(f"{p}.attn.wk.b", E)
        w(f"{p}.attn.wv.w", (E, E), 0.02); b(f"{p}.attn.wv.b", E)
        w(f"{p}.attn.wo.w", (E, E), resid_std); b(f"{p}.attn.wo.b", E)
        g(f"{p}.ln2.g", E)
        w(f"{p}.mlp.fc.w", (E, 4 * E), 0.02); b(f"{p}.mlp.fc.b", 4 * E)
        w(f"{p}.mlp.proj.w", (4 * E, E), resid_std); b(f"{p}.mlp.proj.b", E)
    g("ln_f.g", E)
    w("head.w", (E, config.dim_m), 0.02); b("head.b", config.dim_m)
    return params


def _mlp_input_dim(config: NetConfig) -> int:
    # m_t + timestep embedding + flattened observation values + flattened
    # design values (for the epidemic task: d is (n_obs, 2) and e is (n_obs,)).
    n = config.mlp_n_obs
    d_width = n * (config.obs_token_dim - 1)
    e_width = n + config.design_token_dim
    return config.dim_m + config.n_emb + d_width + e_width


def param_count(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _attention(x: Tensor, params: dict, prefix: str, config: NetConfig,
               positions: np.ndarray) -> Tensor:
    B, n_tok, E = x.shape
    H, hd = config.n_head, config.head_dim

    def heads(t):
        t = T.reshape(t, (B, n_tok, H, hd))
        return T.transpose(t, (0, 2, 1, 3))          # (B, H, T, hd)

    q = heads(_linear(x, params, f"{prefix}.wq"))
    k = heads(_linear(x, params, f"{prefix}.wk"))
    v = heads(_linear(x, params, f"{prefix}.wv"))
    q = T.rope_apply(q, positions, config.rope_base)
    k = T.rope_apply(k, positions, config.rope_base)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = T.softmax_lastdim(scores)                  # bi-directional, no mask
    ctx = T.matmul(attn, v)                           # (B, H, T, hd)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, n_tok, E))
    return _linear(ctx, params, f"{prefix}.wo")


def transformer_forward(params: dict, config: NetConfig, task,
                        m_t: np.ndarray, t, d: np.ndarray, e: np.ndarray) -> Tensor:
    """Velocity prediction for a batch sharing one observation count.

    m_t: (batch, dim_m); t: scalar or (batch,); d, e: task-shaped arrays.
    Returns a (batch, dim_m) tensor.
    """
    toks = build_tokens(task, m_t, d, e)
    dt = params["head.w"].dtype
    parts = [T.add(T.matmul(Tensor(toks.obs, dtype=dt), params["embed.obs.w"]),
                   params["embed.obs.b"])]
    if toks.design is not None:
        parts.append(T.add(T.matmul(Tensor(toks.design, dtype=dt), params["embed.design.w"]),
                           params["embed.design.b"]))
    state = T.add(T.matmul(Tensor(m_t[:, None, :], dtype=dt), params["embed.state.w"]),
                  params["embed.state.b"])
    parts.append(state)
    x = T.concat(parts, axis=1)                       # (B, n_tokens, E)

    temb = timestep_embed(params, np.broadcast_to(np.asarray(t, dtype=np.float32),
                                                  (m_t.shape[0],)), config.n_emb)
    x = T.add(x, T.reshape(temb, (m_t.shape[0], 1, config.n_emb)))

    for i in range(config.n_layer):
        p = f"block{i}"
        h = T.rms_norm(x, params[f"{p}.ln1.g"])
        x = T.add(x, _attention(h, params, f"{p}.attn", config, toks.positions))
        h = T.rms_norm(x, params[f"{p}.ln2.g"])
        h = T.relu_squared(_linear(h, params, f"{p}.mlp.fc"))
        x = T.add(x, _linear(h, params, f"{p}.mlp.proj"))

    x = T.rms_norm(x, params["ln_f.g"])
    state_tok = T.reshape(T.slice_axis(x, 1, x.shape[1] - 1, x.shape[1]),
                          (m_t.shape[0], config.n_emb))
    return _linear(state_tok, params, "head")


def mlp_forward(params: dict, config: NetConfig, task,
                m_t: np.ndarray, t, d: np.ndarray, e: np.ndarray) -> Tensor:
    """Fixed-observation-count variant: flatten everything into one vector."""
    B = m_t.shape[0]
    d = np.asarray(d, dtype=np.float32).reshape(B, -1)
    e = np.asarray(e, dtype=np.float32).reshape(B, -1)
    expect = _mlp_input_dim(config) - config.dim_m - config.n_emb
    if d.shape[1] + e.shape[1] != expect:
        raise ValueError(
            f"mlp variant expects {config.mlp_n_obs} observations "
            f"({expect} flattened values), got {d.shape[1] + e.shape[1]}")
    d, e = task.flat_features(d, e)
    temb = timestep_embed(params, np.broadcast_to(np.asarray(t, dtype=np.float32), (B,)),
                          config.n_emb)
    dt = params["head.w"].dtype
    x = T.concat([Tensor(m_t, dtype=dt), temb, Tensor(d, dtype=dt), Tensor(e, dtype=dt)], axis=1)
    for name in ("mlp.l1", "mlp.l2", "mlp.l3"):
        x = T.relu_squared(_linear(x, params, name))
    return _linear(x, params, "head")


class VelocityNet:
    """Bundles a task, a config, and parameters behind one forward call."""

    def __init__(self, task, config: NetConfig, params: dict | None = None, seed: int = 0):
        self.task = task
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    @property
    def n_params(self):
        return param_count(self.params)

    def forward(self, m_t, t, d, e) -> Tensor:
        m_t = np.asarray(m_t, dtype=np.float32)
        if self.config.arch == "mlp":
            return mlp_forward(self.params, self.config, self.task, m_t, t, d, e)
        return transformer_forward(self.params, self.config, self.task, m_t, t, d, e)

    def velocity(self, m_t, t, d, e) -> np.ndarray:
        """Inference-mode forward pass (no tape recording)."""
        return self.forward(m_t, t, d, e).data

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
