"""Random-walk Metropolis-Hastings posterior sampling over the forward models.

The unnormalized log-posterior combines a Gaussian likelihood on the
observations with the task prior (flat inside the uniform box, standard
normal for the permeability coefficients). Proposals are isotropic Gaussian
steps whose scale is tuned in a short pilot phase toward a 20-40% acceptance
rate; the proposal is symmetric so no Hastings correction is needed.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ChainConfig:
    n_samples: int = 10_000
    proposal_scale: float | None = None   # None: auto-tune
    burn_in: float = 0.5
    sigma_obs: float | None = None        # None: task default for the tuple
    seed: int = 0
    tune: bool = True
    tune_rounds: int = 30
    tune_steps: int = 60

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError("burn_in fraction must lie in [0, 1)")


@dataclass
class ChainResult:
    samples: np.ndarray          # retained (post burn-in) states
    acceptance_rate: float
    posterior_mean: np.ndarray
    wall_seconds: float
    proposal_scale: float
    warnings: list = field(default_factory=list)


def log_posterior(task, m, d, e, sigma_obs):
    """Unnormalized log pi(m | d, e); -inf outside the prior support."""
    lp = task.log_prior(m)
    if not np.isfinite(lp):
        return -np.inf
    try:
        pred = task.forward_observed(np.asarray(m, dtype=np.float64),
                                     np.asarray(e, dtype=np.float64))
    except Exception as err:
        warnings.warn(f"forward model failed during MCMC: {err}")
        return -np.inf
    r = np.asarray(d, dtype=np.float64).reshape(-1) - np.asarray(pred).reshape(-1)
    return lp - float(r @ r) / (2.0 * sigma_obs ** 2)


def mh_step(m, logp, scale, rng, logpost):
    """One random-walk proposal; returns (state, logp, accepted)."""
    prop = m + scale * rng.standard_normal(m.shape)
    lp_prop = logpost(prop)
    if np.log(rng.uniform()) < lp_prop - logp:
        return prop, lp_prop, True
    return m, logp, False


def _tune_scale(m, logp, scale, rng, logpost, cfg):
    """Multiplicative scale adaptation toward acceptance in [0.2, 0.4]."""
    for _ in range(cfg.tune_rounds):
        acc = 0
        for _ in range(cfg.tune_steps):
            m, logp, ok = mh_step(m, logp, scale, rng, logpost)
            acc += ok
        rate = acc / cfg.tune_steps
        if 0.2 <= rate <= 0.4:
            break
        if rate > 0.4:
            scale *= 1.6
        elif rate < 0.05:
            scale *= 0.3
        else:
            scale *= 0.6
    return m, logp, scale


def run_chain(task, d, e, cfg: ChainConfig, csv_path=None) -> ChainResult:
    """Run one chain conditioned on a single observation tuple.

    The chain starts from a prior draw; an optional tuning phase (not
    retained) adapts the proposal scale; the first ``burn_in`` fraction of
    the main chain is discarded from the returned samples.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x6d636d63)))
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    sigma = cfg.sigma_obs if cfg.sigma_obs is not None else task.sigma_for(e, d)

    def logpost(m):
        return log_posterior(task, m, d, e, sigma)

    m = task.prior_sample(rng, 1)[0]
    logp = logpost(m)
    scale = cfg.proposal_scale if cfg.proposal_scale is not None else 0.1
    t0 = time.time()
    warns = []
    if cfg.tune and cfg.proposal_scale is None:
        m, logp, scale = _tune_scale(m, logp, scale, rng, logpost, cfg)

    dim = m.shape[0]
    chain = np.empty((cfg.n_samples, dim))
    logps = np.empty(cfg.n_samples)
    accepted_flags = np.empty(cfg.n_samples, dtype=bool)
    accepted = 0
    consecutive_rejects = 0
    stall_warned = False
    for i in range(cfg.n_samples):
        m, logp, ok = mh_step(m, logp, scale, rng, logpost)
        chain[i] = m
        logps[i] = logp
        accepted_flags[i] = ok
        if ok:
            accepted += 1
            consecutive_rejects = 0
        else:
            consecutive_rejects += 1
            if consecutive_rejects >= 1000 and not stall_warned:
                warns.append(f"chain stalled: 1000 consecutive rejections at step {i}")
                stall_warned = True
    wall = time.time() - t0

    keep = chain[int(cfg.burn_in * cfg.n_samples):]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + [f"m{j}" for j in range(dim)] + ["log_posterior", "accepted"])
            for i in range(cfg.n_samples):
                w.writerow([i] + [f"{v:.8g}" for v in chain[i]]
                           + [f"{logps[i]:.8g}", int(accepted_flags[i])])
    return ChainResult(samples=keep, acceptance_rate=accepted / cfg.n_samples,
                       posterior_mean=keep.mean(axis=0), wall_seconds=wall,
                       proposal_scale=scale, warnings=warns)
