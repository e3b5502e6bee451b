import numpy as np
import pytest

from flowinverse.data import (Batch, DataGenConfig, DatasetFormatError,
                              DatasetShard, batch_iterator, generate_dataset,
                              load_dataset, save_dataset)
from flowinverse.tasks.nonlinear import nonlinear_forward


def small_config(**kw):
    base = dict(task="nonlinear", tuples_per_n_obs=50, n_obs_set=(1, 3), seed=7)
    base.update(kw)
    return DataGenConfig(**base)


class TestGeneration:
    def test_bitwise_reproducible(self):
        a = generate_dataset(small_config())
        b = generate_dataset(small_config())
        for sa, sb in zip(a, b):
            for f in ("m", "e", "d", "eta"):
                np.testing.assert_array_equal(getattr(sa, f), getattr(sb, f))

    def test_noise_free_matches_formula(self):
        shards = generate_dataset(small_config(sigma=0.0))
        for s in shards:
            clean = nonlinear_forward(s.m.astype(np.float64)[:, :1],
                                      s.e.astype(np.float64))
            np.testing.assert_allclose(s.d, clean, atol=1e-6)
            np.testing.assert_array_equal(s.eta, 0.0)

    def test_shard_layout(self):
        shards = generate_dataset(small_config(task="seir", n_obs_set=(6,),
                                               tuples_per_n_obs=20))
        (s,) = shards
        assert s.n_obs == 6
        assert s.e.shape == (20, 6)
        assert s.d.shape == (20, 12)

    def test_rejects_nonpositive_counts(self):
        with pytest.raises(ValueError):
            small_config(tuples_per_n_obs=0)

    def test_prior_moments(self):
        shards = generate_dataset(small_config(tuples_per_n_obs=12_000, n_obs_set=(1,)))
        m = shards[0].m.astype(np.float64).ravel()
        n = m.size
        se_mean = np.sqrt(1 / 12 / n)
        assert abs(m.mean() - 0.5) < 3 * se_mean
        # variance of a U[0,1] sample: var of var estimator ~ (mu4 - var^2)/n
        se_var = np.sqrt((1 / 80 - (1 / 12) ** 2) / n)
        assert abs(m.var() - 1 / 12) < 3 * se_var

    def test_gaussian_prior_moments(self):
        shards = generate_dataset(DataGenConfig(task="darcy", tuples_per_n_obs=700,
                                                n_obs_set=(4,), seed=3))
        m = shards[0].m.astype(np.float64).ravel()
        n = m.size
        assert abs(m.mean()) < 3 / np.sqrt(n)
        assert abs(m.var() - 1.0) < 3 * np.sqrt(2.0 / n)


class TestPersistence:
    def test_roundtrip_bitwise(self, tmp_path):
        shards = generate_dataset(small_config())
        p1 = tmp_path / "a.cfmd"
        p2 = tmp_path / "b.cfmd"
        save_dataset(shards, "nonlinear", p1)
        name, loaded = load_dataset(str(p1))
        assert name == "nonlinear"
        save_dataset(loaded, name, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.cfmd"
        p.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(DatasetFormatError, match="magic"):
            load_dataset(str(p))

    def test_version_mismatch(self, tmp_path):
        shards = generate_dataset(small_config(n_obs_set=(1,), tuples_per_n_obs=3))
        p = tmp_path / "v.cfmd"
        save_dataset(shards, "nonlinear", p)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="version"):
            load_dataset(str(p))

    def test_truncated(self, tmp_path):
        shards = generate_dataset(small_config(n_obs_set=(1,), tuples_per_n_obs=3))
        p = tmp_path / "t.cfmd"
        save_dataset(shards, "nonlinear", p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(DatasetFormatError, match="truncated"):
            load_dataset(str(p))

    def test_empty_shard_list(self, tmp_path):
        p = tmp_path / "e.cfmd"
        save_dataset([], "seir", p)
        name, shards = load_dataset(str(p))
        assert name == "seir" and shards == []

    def test_tampered_tuple_detected(self, tmp_path):
        shards = generate_dataset(small_config(n_obs_set=(2,), tuples_per_n_obs=5))
        shards[0].d[0, 0] += 0.5
        p = tmp_path / "x.cfmd"
        save_dataset(shards, "nonlinear", p)
        with pytest.raises(DatasetFormatError, match="re-verify"):
            load_dataset(str(p))
        _, ok = load_dataset(str(p), verify_fraction=0)
        assert len(ok[0]) == 5


def make_shards(sizes, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for n_obs, count in sizes.items():
        out.append(DatasetShard(
            n_obs=n_obs,
            m=rng.normal(size=(count, 2)).astype(np.float32),
            e=rng.normal(size=(count, n_obs)).astype(np.float32),
            d=rng.normal(size=(count, n_obs)).astype(np.float32),
            eta=np.zeros((count, n_obs), dtype=np.float32)))
    return out


class TestBatchIterator:
    def test_round_robin(self):
        shards = make_shards({4: 100, 8: 100})
        seq = [b.n_obs for b in batch_iterator(shards, 50)]
        assert seq == [4, 8, 4, 8]

    def test_epoch_is_partition(self):
        shards = make_shards({4: 53})
        seen = np.concatenate([b.index for b in batch_iterator(shards, 10)])
        assert sorted(seen.tolist()) == list(range(53))
        sizes = [len(b.index) for b in batch_iterator(shards, 10)]
        assert sizes == [10, 10, 10, 10, 10, 3]    # short final batch emitted

    def test_epochs_reshuffle(self):
        shards = make_shards({4: 40})
        rows0 = np.concatenate([b.m for b in batch_iterator(shards, 40, epoch=0)])
        rows1 = np.concatenate([b.m for b in batch_iterator(shards, 40, epoch=1)])
        assert not np.array_equal(rows0, rows1)
        assert np.array_equal(np.sort(rows0, axis=0), np.sort(rows1, axis=0))

    def test_order_independent_of_batch_size(self):
        shards = make_shards({4: 64})
        big = np.concatenate([b.m for b in batch_iterator(shards, 32)])
        small = np.concatenate([b.m for b in batch_iterator(shards, 16)])
        np.testing.assert_array_equal(big, small)

    def test_rejects_bad_batch_size(self):
        with pytest.raises(ValueError):
            list(batch_iterator(make_shards({4: 4}), 0))
