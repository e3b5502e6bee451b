"""SEIR epidemic dynamics with time-dependent transmission and removal rates.

The six inferred rates are [beta1, alpha, gamma_r, gamma_d1, beta2, gamma_d2],
each uniform on [0, 1]. Transmission and death rates switch around t = tau via
a tanh ramp. Two ramp conventions are supported:

* ``shifted`` (default): weight (1 + tanh(7(t - tau))) / 2, which moves the
  rates monotonically from their initial to their final values and keeps all
  rates non-negative on the whole prior box.
* ``printed``: weight tanh(7(t - tau)) / 2. This version admits negative
  rates (for example beta(t) < 0 whenever beta2 > 3 * beta1 at early times),
  which destabilizes the quadratic dynamics for a few percent of prior draws;
  it exists for comparison and is not used for data generation.

Observations are (I, R) read at a handful of times in [1, 3].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SeirConstants:
    tau: float = 2.1
    t_end: float = 4.0
    s0: float = 99.0
    e0: float = 1.0
    i0: float = 0.0
    r0: float = 0.0
    dt: float = 1.0 / 256.0


CONST = SeirConstants()
N_STEPS = int(round(CONST.t_end / CONST.dt))

TRUE_RATES = np.array([0.4, 0.3, 0.3, 0.1, 0.15, 0.6])


def _ramp(t, tau, shifted):
    th = np.tanh(7.0 * (np.asarray(t, dtype=np.float64) - tau))
    return (1.0 + th) / 2.0 if shifted else th / 2.0


def seir_rates(t, m, shifted: bool = True, const: SeirConstants = CONST):
    """Rates (beta, gamma, gamma_d) at time(s) t for rate vector m."""
    m = np.asarray(m, dtype=np.float64)
    b1, _, gr, gd1, b2, gd2 = m
    s = _ramp(t, const.tau, shifted)
    beta = b1 + s * (b2 - b1)
    gamma_d = gd1 + s * (gd2 - gd1)
    return beta, gr + gamma_d, gamma_d


def _ramp_tables(shifted, const=CONST):
    ts = np.arange(N_STEPS + 1) * const.dt
    full = _ramp(ts, const.tau, shifted)
    half = _ramp(ts[:-1] + const.dt / 2.0, const.tau, shifted)
    return full, half


_TABLES = {True: _ramp_tables(True), False: _ramp_tables(False)}


def _integrate(m, shifted):
    """Classical RK4 over [0, t_end] at fixed step; returns (steps+1, B, 4)."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    b1, al, gr, gd1, b2, gd2 = (m[:, i] for i in range(6))
    db, dg, g0 = b2 - b1, gd2 - gd1, gr + gd1
    B = m.shape[0]
    dt = CONST.dt
    s_full, s_half = _TABLES[bool(shifted)]
    state = np.empty((N_STEPS + 1, B, 4))
    S = np.full(B, CONST.s0)
    E = np.full(B, CONST.e0)
    I = np.full(B, CONST.i0)
    R = np.full(B, CONST.r0)
    state[0, :, 0], state[0, :, 1], state[0, :, 2], state[0, :, 3] = S, E, I, R

    def rhs(S, E, I, s):
        beta = b1 + s * db
        gam = g0 + s * dg
        x = beta * S * I
        aE = al * E
        gI = gam * I
        return -x, x - aE, aE - gI, gI

    for k in range(N_STEPS):
        s0, sh, s1 = s_full[k], s_half[k], s_full[k + 1]
        a1, b_1, c1, d1 = rhs(S, E, I, s0)
        a2, b_2, c2, d2 = rhs(S + dt / 2 * a1, E + dt / 2 * b_1, I + dt / 2 * c1, sh)
        a3, b_3, c3, d3 = rhs(S + dt / 2 * a2, E + dt / 2 * b_2, I + dt / 2 * c2, sh)
        a4, b_4, c4, d4 = rhs(S + dt * a3, E + dt * b_3, I + dt * c3, s1)
        S = S + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        E = E + dt / 6 * (b_1 + 2 * b_2 + 2 * b_3 + b_4)
        I = I + dt / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
        R = R + dt / 6 * (d1 + 2 * d2 + 2 * d3 + d4)
        state[k + 1, :, 0], state[k + 1, :, 1] = S, E
        state[k + 1, :, 2], state[k + 1, :, 3] = I, R
    if not np.isfinite(state).all():
        step_ok = np.isfinite(state).all(axis=(1, 2))
        k_bad = int(np.argmin(step_ok))
        b_bad = int(np.argmin(np.isfinite(state[k_bad]).all(axis=1)))
        raise FloatingPointError(
            f"SEIR state became non-finite at t={k_bad * dt:.4f} for m={m[b_bad].tolist()}")
    return state


def seir_solve(m, t_grid, shifted: bool = True):
    """States (S, E, I, R) at the requested times, linearly interpolated
    between fixed RK4 steps.

    m may be a single 6-vector or a (B, 6) batch; t_grid is a 1-d array of
    times in [0, t_end]. Returns (len(t_grid), 4) or (B, len(t_grid), 4).
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(t_grid < 0) or np.any(t_grid > CONST.t_end + 1e-12):
        raise ValueError(f"requested times outside [0, {CONST.t_end}]")
    single = np.asarray(m).ndim == 1
    state = _integrate(m, shifted)                     # (steps+1, B, 4)
    pos = t_grid / CONST.dt
    k = np.minimum(pos.astype(int), N_STEPS - 1)
    w = (pos - k)[None, :, None]
    lo = state[k].transpose(1, 0, 2)                   # (B, n_t, 4)
    hi = state[k + 1].transpose(1, 0, 2)
    out = lo * (1.0 - w) + hi * w
    return out[0] if single else out


def seir_observe(m, times, eta=None, shifted: bool = True):
    """(I, R) at the requested times plus optional noise; shape (..., n, 2)."""
    traj = seir_solve(m, np.asarray(times, dtype=np.float64).reshape(-1), shifted)
    obs = traj[..., 2:4]
    if eta is not None:
        obs = obs + eta
    return obs


def _solve_scalar(m, times, shifted: bool = True):
    """Plain-float RK4 for one rate vector; fast path for sequential MCMC.

    Returns (I, R) pairs at the requested times (linear interpolation
    between steps), matching :func:`seir_observe` to rounding.
    """
    b1, al, gr, gd1, b2, gd2 = (float(v) for v in m)
    db, dg, g0 = b2 - b1, gd2 - gd1, gr + gd1
    dt = CONST.dt
    s_full, s_half = _TABLES[bool(shifted)]
    order = sorted(range(len(times)), key=lambda i: times[i])
    res = [None] * len(times)
    nxt = 0
    S, E, I, R = CONST.s0, CONST.e0, CONST.i0, CONST.r0
    while nxt < len(order) and times[order[nxt]] <= 0.0:
        res[order[nxt]] = (I, R)
        nxt += 1
    for k in range(N_STEPS):
        s0 = s_full[k]
        sh = s_half[k]
        s1 = s_full[k + 1]
        beta = b1 + s0 * db
        gam = g0 + s0 * dg
        x = beta * S * I
        aE = al * E
        gI = gam * I
        a1, b_1, c1, d1 = -x, x - aE, aE - gI, gI
        beta = b1 + sh * db
        gam = g0 + sh * dg
        S2, E2, I2 = S + dt / 2 * a1, E + dt / 2 * b_1, I + dt / 2 * c1
        x = beta * S2 * I2
        aE = al * E2
        gI = gam * I2
        a2, b_2, c2, d2 = -x, x - aE, aE - gI, gI
        S3, E3, I3 = S + dt / 2 * a2, E + dt / 2 * b_2, I + dt / 2 * c2
        x = beta * S3 * I3
        aE = al * E3
        gI = gam * I3
        a3, b_3, c3, d3 = -x, x - aE, aE - gI, gI
        beta = b1 + s1 * db
        gam = g0 + s1 * dg
        S4, E4, I4 = S + dt * a3, E + dt * b_3, I + dt * c3
        x = beta * S4 * I4
        aE = al * E4
        gI = gam * I4
        a4, b_4, c4, d4 = -x, x - aE, aE - gI, gI
        Sn = S + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        En = E + dt / 6 * (b_1 + 2 * b_2 + 2 * b_3 + b_4)
        In = I + dt / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
        Rn = R + dt / 6 * (d1 + 2 * d2 + 2 * d3 + d4)
        t1 = (k + 1) * dt
        while nxt < len(order) and times[order[nxt]] <= t1:
            w = (times[order[nxt]] - k * dt) / dt
            res[order[nxt]] = ((1 - w) * I + w * In, (1 - w) * R + w * Rn)
            nxt += 1
        S, E, I, R = Sn, En, In, Rn
    while nxt < len(order):           # times exactly at t_end
        res[order[nxt]] = (I, R)
        nxt += 1
    return res


class SeirTask:
    name = "seir"
    task_id = 1
    dim_m = 6
    obs_token_dim = 3          # (e_i, I_i, R_i)
    design_token_dim = 0

    # fixed input scaling so token features are O(1)
    POP_SCALE = 100.0
    TIME_SCALE = 4.0

    def __init__(self, sigma: float = 0.5, shifted_ramp: bool = True):
        self.sigma = float(sigma)
        self.shifted_ramp = bool(shifted_ramp)

    def e_width(self, n_obs):
        return n_obs

    def d_width(self, n_obs):
        return 2 * n_obs

    def default_n_obs_set(self):
        return (4, 5, 6, 7, 8)

    def sample_params(self, rng, size):
        return rng.uniform(0.0, 1.0, (size, 6))

    prior_sample = sample_params

    def sample_design(self, rng, n_obs):
        return rng.uniform(1.0, 3.0, n_obs)

    def simulate_batch(self, m, e, n_obs):
        B = m.shape[0]
        # every tuple has its own observation times; integrate once, read all
        traj = _integrate(m, self.shifted_ramp)        # (steps+1, B, 4)
        pos = e / CONST.dt
        k = np.minimum(pos.astype(int), N_STEPS - 1)
        w = pos - k
        rows = np.arange(B)[:, None]
        lo = traj[k, rows]                             # (B, n_obs, 4)
        hi = traj[k + 1, rows]
        obs = (lo * (1.0 - w[..., None]) + hi * w[..., None])[..., 2:4]
        return obs.reshape(B, 2 * n_obs), np.full(B, self.sigma)

    def token_features(self, d, e):
        B, n = e.shape
        ir = d.reshape(B, n, 2) / self.POP_SCALE
        et = e[..., None] / self.TIME_SCALE
        return np.concatenate([et, ir], axis=-1).astype(np.float32), None

    def flat_features(self, d, e):
        return (d / self.POP_SCALE).astype(np.float32), (e / self.TIME_SCALE).astype(np.float32)

    def de_solution(self, m, e_row=None, grid=256):
        tg = np.linspace(0.0, CONST.t_end, grid)
        return seir_solve(np.asarray(m, dtype=np.float64), tg, self.shifted_ramp).reshape(-1)

    def forward_observed(self, m, e_row):
        res = _solve_scalar(np.asarray(m, dtype=np.float64), list(e_row), self.shifted_ramp)
        return np.asarray(res, dtype=np.float64).reshape(-1)

    def in_support(self, m):
        m = np.asarray(m)
        return bool(np.all(m >= 0.0) and np.all(m <= 1.0))

    def log_prior(self, m):
        return 0.0 if self.in_support(m) else -np.inf

    def sigma_for(self, e_row, d_row):
        return self.sigma
