"""Closed-form scalar forward model with uniform priors.

d = e^2 m^3 + m exp(-|0.2 - e|) + eta, with m, e ~ U[0, 1]. The map is
strictly increasing in m, so a single noisy observation already pins the
parameter down to noise scale.
"""

from __future__ import annotations

import numpy as np


def nonlinear_forward(m, e, eta=0.0):
    m = np.asarray(m, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    return e ** 2 * m ** 3 + m * np.exp(-np.abs(0.2 - e)) + eta


class NonlinearTask:
    name = "nonlinear"
    task_id = 0
    dim_m = 1
    obs_token_dim = 2          # (d_i, e_i)
    design_token_dim = 0

    def __init__(self, sigma: float = 0.01):
        self.sigma = float(sigma)

    # --- dataset layout -----------------------------------------------------
    def e_width(self, n_obs):
        return n_obs

    def d_width(self, n_obs):
        return n_obs

    def default_n_obs_set(self):
        return (1,)

    # --- sampling -----------------------------------------------------------
    def sample_params(self, rng, size):
        return rng.uniform(0.0, 1.0, (size, 1))

    prior_sample = sample_params

    def sample_design(self, rng, n_obs):
        return rng.uniform(0.0, 1.0, n_obs)

    def simulate_batch(self, m, e, n_obs):
        """Noise-free observations plus the per-tuple noise scale."""
        d = nonlinear_forward(m[:, :1], e)
        return d, np.full(m.shape[0], self.sigma)

    # --- network inputs -----------------------------------------------------
    def token_features(self, d, e):
        obs = np.stack([d, e], axis=-1).astype(np.float32)
        return obs, None

    def flat_features(self, d, e):
        return d.astype(np.float32), e.astype(np.float32)

    # --- evaluation / inference ---------------------------------------------
    def de_solution(self, m, e_row=None, grid=101):
        """Forward map evaluated over a fixed design grid (noise-free)."""
        eg = np.linspace(0.0, 1.0, grid)
        return nonlinear_forward(float(np.asarray(m).reshape(-1)[0]), eg)

    def forward_observed(self, m, e_row):
        """Noise-free observations at the designs of one tuple."""
        return nonlinear_forward(float(np.asarray(m).reshape(-1)[0]), e_row)

    def in_support(self, m):
        m = np.asarray(m)
        return bool(np.all(m >= 0.0) and np.all(m <= 1.0))

    def log_prior(self, m):
        return 0.0 if self.in_support(m) else -np.inf

    def sigma_for(self, e_row, d_row):
        return self.sigma
