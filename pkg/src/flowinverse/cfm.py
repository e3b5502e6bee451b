"""Conditional flow matching: training and ODE-based posterior sampling.

Training regresses the network output onto the straight-line displacement
between a fresh prior draw and the dataset parameter, conditioned on that
tuple's observations. Sampling integrates dx/dt = v(x, t, d, e) from a prior
draw at t=0 to t=1 with a fixed-step solver; because the learned paths are
nearly straight, a modest number of Euler steps suffices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import batch_iterator
from .net import VelocityNet

_STREAM_NOISE = 0x6e6f6973      # per-(epoch, shard) training draws
_STREAM_MEMBER = 0x6d656d62     # per-member prior draws at inference


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, message):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 8e-4
    epochs: int = 20
    batch_size: int = 256
    accum_window: int = 4       # batches (of differing n_obs) per optimizer step
    seed: int = 0
    checkpoint_every: int = 0   # optimizer steps; 0 disables periodic checkpoints
    lr_decay: bool = True       # cosine decay of the peak rate to 5% over the run

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.accum_window < 1:
            raise ValueError("accum_window must be >= 1")


@dataclass
class SamplerConfig:
    steps: int = 50
    method: str = "euler"       # euler | midpoint | rk4
    ensemble: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.ensemble < 1:
            raise ValueError("steps and ensemble must be >= 1")
        if self.method not in ("euler", "midpoint", "rk4"):
            raise ValueError(f"unknown integration method '{self.method}'")


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray          # (ensemble, dim_m)
    d: np.ndarray
    e: np.ndarray
    steps: int
    method: str
    seed: int

    @property
    def mean(self):
        return self.samples.mean(axis=0)


def interpolate(m0, m1, t):
    """Convex combination (1-t) m0 + t m1; t scalar or per-row column."""
    m0 = np.asarray(m0)
    m1 = np.asarray(m1)
    if m0.shape != m1.shape:
        raise ValueError(f"endpoint shapes differ: {m0.shape} vs {m1.shape}")
    t = np.asarray(t)
    if t.ndim == 1:
        t = t[:, None]
    return (1.0 - t) * m0 + t * m1


def cfm_loss(net: VelocityNet, batch, t, m0):
    """Mean squared velocity-matching error for one fixed-n_obs batch.

    t: (B,) flow times; m0: (B, dim_m) prior draws. Targets are m1 - m0.
    Returns the scalar loss tensor (record on an active tape to train).
    """
    m1 = batch.m.astype(np.float32)
    m0 = m0.astype(np.float32)
    t = t.astype(np.float32)
    m_t = interpolate(m0, m1, t).astype(np.float32)
    v = net.forward(m_t, t, batch.d, batch.e)
    target = T.Tensor(m1 - m0, dtype=v.dtype)
    diff = T.sub(v, target)
    return T.mean_all(T.mul(diff, diff))


def _epoch_noise(seed, epoch, n_obs, count, dim_m, prior_sample):
    """Flow times and prior draws for one shard-epoch, drawn in one stream so
    slices are independent of the batch partition."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_NOISE, epoch, n_obs)))
    t = rng.uniform(0.0, 1.0, count)
    m0 = prior_sample(rng, count)
    return t, m0


def train(net: VelocityNet, shards, config: TrainConfig, checkpoint_fn=None):
    """Optimize the velocity network over the sharded dataset.

    Gradients are averaged over ``accum_window`` consecutive batches (which
    round-robin across observation counts) before each Adam step. Returns
    (net, history) where history is the per-step mean loss. ``checkpoint_fn``
    is called as checkpoint_fn(step, epoch, net) every ``checkpoint_every``
    steps and once more after a non-finite loss with the last finite
    parameters; together with the counter-derived per-epoch noise streams,
    (seed, epoch) in a checkpoint is enough to resume deterministically from
    an epoch boundary.
    """
    params = net.params
    state = T.AdamState(params, lr=config.lr)
    accum = {k: np.zeros_like(p.data) for k, p in params.items()}
    history = []
    window_losses = []
    in_window = 0
    step = 0

    for epoch in range(config.epochs):
        noise = {
            s.n_obs: _epoch_noise(config.seed, epoch, s.n_obs, len(s),
                                  net.task.dim_m, net.task.prior_sample)
            for s in shards
        }
        for batch in batch_iterator(shards, config.batch_size,
                                    seed=config.seed, epoch=epoch):
            t_all, m0_all = noise[batch.n_obs]
            t = t_all[batch.index]
            m0 = m0_all[batch.index]
            with T.Tape() as tape:
                loss = cfm_loss(net, batch, t, m0)
            loss_val = float(loss.item())
            if not math.isfinite(loss_val):
                if checkpoint_fn is not None:
                    checkpoint_fn(step, epoch, net)
                raise TrainingDivergedError(
                    step, f"non-finite loss at optimizer step {step} "
                          f"(epoch {epoch}, n_obs {batch.n_obs})")
            net.zero_grad()
            T.backward(loss, tape)
            for k, p in params.items():
                if p.grad is not None:
                    accum[k] += p.grad
            net.zero_grad()
            window_losses.append(loss_val)
            in_window += 1
            if in_window == config.accum_window:
                inv = 1.0 / config.accum_window
                grads = {k: a * inv for k, a in accum.items()}
                T.adam_step(params, grads, state)
                for a in accum.values():
                    a.fill(0.0)
                history.append(float(np.mean(window_losses)))
                window_losses.clear()
                in_window = 0
                step += 1
                if config.checkpoint_every and checkpoint_fn is not None \
                        and step % config.checkpoint_every == 0:
                    checkpoint_fn(step, epoch, net)
    if in_window:          # trailing partial window
        inv = 1.0 / in_window
        grads = {k: a * inv for k, a in accum.items()}
        T.adam_step(params, grads, state)
        history.append(float(np.mean(window_losses)))
    return net, history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _prior_draws(task, n, seed):
    draws = np.empty((n, task.dim_m))
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_MEMBER, i)))
        draws[i] = task.prior_sample(rng, 1)[0]
    return draws


def _integrate_flow(net, x0, d_rep, e_rep, cfg: SamplerConfig, record=False):
    x = x0.astype(np.float32)
    h = 1.0 / cfg.steps
    traj = [x.copy()] if record else None

    def v(xc, tc):
        out = net.velocity(xc, tc, d_rep, e_rep)
        if not np.isfinite(out).all():
            raise FloatingPointError(f"velocity became non-finite at t={tc:.4f}")
        return out

    for k in range(cfg.steps):
        t = k * h
        if cfg.method == "euler":
            x = x + h * v(x, t)
        elif cfg.method == "midpoint":
            k1 = v(x, t)
            x = x + h * v(x + 0.5 * h * k1, t + 0.5 * h)
        else:
            k1 = v(x, t)
            k2 = v(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = v(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = v(x + h * k3, min(t + h, 1.0))
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"flow state became non-finite after t={t + h:.4f}")
        if record:
            traj.append(x.copy())
    return (x, np.stack(traj)) if record else (x, None)


def _replicate_conditioning(d, e, n):
    d = np.asarray(d, dtype=np.float32).reshape(1, -1)
    e = np.asarray(e, dtype=np.float32).reshape(1, -1)
    return np.repeat(d, n, axis=0), np.repeat(e, n, axis=0)


def sample_posterior(net: VelocityNet, d, e, cfg: SamplerConfig) -> PosteriorEnsemble:
    """Draw an ensemble from the learned conditional distribution.

    Each member starts from its own counter-derived prior draw; the whole
    ensemble integrates as one batch, which is equivalent to integrating
    members independently.
    """
    x0 = _prior_draws(net.task, cfg.ensemble, cfg.seed)
    d_rep, e_rep = _replicate_conditioning(d, e, cfg.ensemble)
    x1, _ = _integrate_flow(net, x0, d_rep, e_rep, cfg)
    return PosteriorEnsemble(samples=x1.astype(np.float64), d=np.asarray(d),
                             e=np.asarray(e), steps=cfg.steps, method=cfg.method,
                             seed=cfg.seed)


@dataclass
class StraightnessReport:
    mean_deviation: float
    per_path: np.ndarray
    skipped: int
    trajectories: np.ndarray     # (steps+1, n_paths, dim_m)


def path_straightness(net: VelocityNet, d, e, n_paths=32,
                      cfg: SamplerConfig | None = None, csv_path=None) -> StraightnessReport:
    """Mean relative deviation of flow trajectories from their chords.

    A perfectly straight (optimal-transport) path moves as
    (1 - t) x(0) + t x(1); for each probe path the maximum distance between
    x(t) and that time-parametrized chord is divided by the chord length.
    Degenerate chords (< 1e-9) are skipped and counted.
    """
    cfg = cfg or SamplerConfig()
    x0 = _prior_draws(net.task, n_paths, cfg.seed)
    d_rep, e_rep = _replicate_conditioning(d, e, n_paths)
    _, traj = _integrate_flow(net, x0, d_rep, e_rep, cfg, record=True)
    ts = np.linspace(0.0, 1.0, traj.shape[0])
    devs = []
    skipped = 0
    for p in range(n_paths):
        a = traj[0, p].astype(np.float64)
        b = traj[-1, p].astype(np.float64)
        chord = np.linalg.norm(b - a)
        if chord < 1e-9:
            skipped += 1
            continue
        straight = (1.0 - ts[:, None]) * a + ts[:, None] * b
        dist = np.linalg.norm(traj[:, p].astype(np.float64) - straight, axis=1)
        devs.append(dist.max() / chord)
    devs = np.asarray(devs)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            dim = traj.shape[-1]
            w.writerow(["path", "t"] + [f"x{i}" for i in range(dim)])
            ts = np.linspace(0.0, 1.0, traj.shape[0])
            for p in range(n_paths):
                for k, t in enumerate(ts):
                    w.writerow([p, f"{t:.6f}"] + [f"{v:.8g}" for v in traj[k, p]])
    mean_dev = float(devs.mean()) if devs.size else 0.0
    return StraightnessReport(mean_deviation=mean_dev, per_path=devs,
                              skipped=skipped, trajectories=traj)
