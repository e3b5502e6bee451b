"""Joint-distribution dataset generation, shard batching, and persistence.

A dataset is a list of shards, one per observation count; within a shard all
tuples share the same layout so they batch into contiguous arrays. Every
tuple draws (parameters, design, noise) from its own counter-derived RNG
stream, so generation is order-independent and parallelizable, and the file
round-trips bitwise.

File format (little-endian): magic ``CFMD``, u32 version, task id byte,
u32 shard count; per shard u32 n_obs, u64 tuple count, then float32 arrays
m, e, d, eta in that order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tasks import TASK_IDS, TASK_NAMES, get_task

MAGIC = b"CFMD"
FORMAT_VERSION = 1

_STREAM_TUPLE = 0x64617461          # tag for per-tuple draws
_STREAM_SHUFFLE = 0x73687566        # tag for per-epoch shard shuffles


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetShard:
    n_obs: int
    m: np.ndarray        # (N, dim_m) float32
    e: np.ndarray        # (N, e_width) float32
    d: np.ndarray        # (N, d_width) float32
    eta: np.ndarray      # (N, d_width) float32
    seed: int = 0

    def __len__(self):
        return self.m.shape[0]


@dataclass
class DataGenConfig:
    task: str
    tuples_per_n_obs: int
    n_obs_set: tuple = ()
    seed: int = 0
    sigma: float | None = None          # noise override; None = task default
    task_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tuples_per_n_obs <= 0:
            raise ValueError("tuples_per_n_obs must be positive")
        self.n_obs_set = tuple(self.n_obs_set)


def _tuple_rng(seed, n_obs, index):
    return np.random.default_rng(
        np.random.Philox(np.random.SeedSequence((seed, _STREAM_TUPLE, n_obs, index))))


def make_task(config: DataGenConfig):
    kwargs = dict(config.task_kwargs)
    if config.sigma is not None:
        key = "sigma_rel" if config.task == "darcy" else "sigma"
        kwargs[key] = config.sigma
    return get_task(config.task, **kwargs)


def generate_shard(task, n_obs, count, seed, sim_batch=4096) -> DatasetShard:
    dim_m = task.dim_m
    ew = task.e_width(n_obs)
    dw = task.d_width(n_obs)
    m = np.empty((count, dim_m))
    e = np.empty((count, ew))
    z = np.empty((count, dw))            # unit-variance noise draws
    for i in range(count):
        rng = _tuple_rng(seed, n_obs, i)
        m[i] = task.sample_params(rng, 1)[0]
        e[i] = task.sample_design(rng, n_obs)
        z[i] = rng.standard_normal(dw)
    d = np.empty((count, dw))
    eta = np.empty((count, dw))
    for lo in range(0, count, sim_batch):
        hi = min(lo + sim_batch, count)
        try:
            clean, scale = task.simulate_batch(m[lo:hi], e[lo:hi], n_obs)
        except Exception as err:
            raise RuntimeError(
                f"forward model failed in shard n_obs={n_obs}, "
                f"tuples [{lo}, {hi}), seed={seed}: {err}") from err
        eta[lo:hi] = z[lo:hi] * scale[:, None]
        d[lo:hi] = clean + eta[lo:hi]
    return DatasetShard(n_obs=n_obs, m=m.astype(np.float32), e=e.astype(np.float32),
                        d=d.astype(np.float32), eta=eta.astype(np.float32), seed=seed)


def generate_dataset(config: DataGenConfig) -> list[DatasetShard]:
    """Sample (m, e, eta) per tuple and push through the forward model."""
    task = make_task(config)
    n_obs_set = config.n_obs_set or task.default_n_obs_set()
    return [generate_shard(task, n, config.tuples_per_n_obs, config.seed)
            for n in n_obs_set]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(shards, task_name, path):
    task_id = TASK_IDS[task_name]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBI", FORMAT_VERSION, task_id, len(shards)))
        for s in shards:
            f.write(struct.pack("<IQ", s.n_obs, len(s)))
            f.write(struct.pack("<Q", s.seed))
            for arr in (s.m, s.e, s.d, s.eta):
                a = np.ascontiguousarray(arr, dtype="<f4")
                f.write(struct.pack("<II", a.shape[0], a.shape[1]))
                f.write(a.tobytes())


def _read_exact(f, nbytes, what):
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return buf


def load_dataset(path, verify_fraction=0.01, task=None):
    """Load shards; returns (task_name, shards).

    A deterministic sample of tuples is re-verified against the forward
    model: d minus the stored noise must match F(m, e) to within 1e-6
    relative to the observation scale. Pass ``task`` when the dataset was
    generated with non-default task constants; set verify_fraction=0 to skip.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}; not a dataset file")
        version, task_id, n_shards = struct.unpack("<IBI", _read_exact(f, 9, "header"))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(
                f"dataset version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
        if task_id not in TASK_NAMES:
            raise DatasetFormatError(f"unknown task id {task_id}")
        task_name = TASK_NAMES[task_id]
        shards = []
        for _ in range(n_shards):
            n_obs, count = struct.unpack("<IQ", _read_exact(f, 12, "shard header"))
            (seed,) = struct.unpack("<Q", _read_exact(f, 8, "shard seed"))
            arrs = []
            for name in ("m", "e", "d", "eta"):
                rows, cols = struct.unpack("<II", _read_exact(f, 8, f"{name} shape"))
                raw = _read_exact(f, rows * cols * 4, f"{name} data")
                arrs.append(np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy())
            shards.append(DatasetShard(n_obs=n_obs, m=arrs[0], e=arrs[1],
                                       d=arrs[2], eta=arrs[3], seed=seed))
        extra = f.read(1)
        if extra:
            raise DatasetFormatError("trailing bytes after final shard")
    if verify_fraction > 0:
        _verify_sample(task if task is not None else get_task(task_name),
                       shards, verify_fraction)
    return task_name, shards


def _verify_sample(task, shards, fraction):
    for s in shards:
        take = max(1, int(len(s) * fraction)) if len(s) else 0
        idx = np.linspace(0, len(s) - 1, take).astype(int) if take else []
        for i in idx:
            clean = task.forward_observed(s.m[i].astype(np.float64),
                                          s.e[i].astype(np.float64))
            stored = s.d[i].astype(np.float64) - s.eta[i].astype(np.float64)
            scale = max(1.0, np.abs(clean).max())
            if np.abs(clean - stored).max() > 1e-6 * scale:
                raise DatasetFormatError(
                    f"stored tuple {i} of shard n_obs={s.n_obs} does not re-verify "
                    f"against the forward model")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    n_obs: int
    m: np.ndarray
    e: np.ndarray
    d: np.ndarray
    index: np.ndarray    # positions within the shard's epoch order


def shuffled_order(n, seed, epoch, n_obs):
    rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_SHUFFLE, epoch, n_obs)))
    return rng.permutation(n)


def batch_iterator(shards, batch_size, seed=0, epoch=0):
    """Yield fixed-n_obs batches, round-robin over shards.

    Each shard is reshuffled per epoch (seeded); the final short batch of a
    shard is emitted. Element order within an epoch depends only on
    (seed, epoch), never on batch_size, so gradient-accumulation windows can
    be rearranged without changing the data stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    orders = {s.n_obs: shuffled_order(len(s), seed, epoch, s.n_obs) for s in shards}
    cursors = {s.n_obs: 0 for s in shards}
    active = [s for s in shards if len(s)]
    while active:
        done = []
        for s in active:
            lo = cursors[s.n_obs]
            hi = min(lo + batch_size, len(s))
            take = orders[s.n_obs][lo:hi]
            cursors[s.n_obs] = hi
            yield Batch(n_obs=s.n_obs, m=s.m[take], e=s.e[take], d=s.d[take],
                        index=np.arange(lo, hi))
            if hi >= len(s):
                done.append(s)
        for s in done:
            active.remove(s)
