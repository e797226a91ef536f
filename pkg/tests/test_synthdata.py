import pathlib
import tempfile
import unittest

import numpy as np
import pandas as pd

from data.sampler import split_holdout, sample_batch, iterate_minibatches
from data.synthdata import Dataset, Shard, gen_gaussian_mixture, dirichlet_partition, export_dataset_csv
from utils.exception import PartitionError


class TestGaussianMixture(unittest.TestCase):
    def test_balanced_classes(self):
        ds = gen_gaussian_mixture(4, 16, 1001, 1.0, seed=0)
        counts = ds.class_histogram()
        self.assertEqual(counts.sum(), 1001)
        self.assertLessEqual(counts.max() - counts.min(), 1)
        self.assertEqual(ds.features.shape, (1001, 16))

    def test_deterministic(self):
        a, b = gen_gaussian_mixture(3, 5, 100, 0.5, seed=7), gen_gaussian_mixture(3, 5, 100, 0.5, seed=7)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = gen_gaussian_mixture(3, 5, 100, 0.5, seed=8)
        self.assertFalse(np.array_equal(a.features, c.features))

    def test_zero_spread_gives_class_means(self):
        means = np.eye(3)
        ds = gen_gaussian_mixture(3, 3, 30, 0.0, seed=1, means=means)
        np.testing.assert_array_equal(ds.features, means[ds.labels])

    def test_invalid_sizes(self):
        with self.assertRaises(ValueError):
            gen_gaussian_mixture(1, 4, 10, 1.0, seed=0)
        with self.assertRaises(ValueError):
            gen_gaussian_mixture(4, 4, 3, 1.0, seed=0)


class TestDirichletPartition(unittest.TestCase):
    def test_shards_cover_dataset(self):
        ds = gen_gaussian_mixture(4, 2, 500, 1.0, seed=0)
        for seed in range(100):
            for concentration in (0.1, 0.5, 10.0):
                shards = dirichlet_partition(ds, 8, concentration, seed=seed)
                self.assertEqual(len(shards), 8)
                all_indices = np.concatenate([s.indices for s in shards])
                self.assertEqual(sorted(all_indices.tolist()), list(range(500)), (seed, concentration))
                self.assertTrue(all(len(s) >= 1 for s in shards))
                self.assertAlmostEqual(sum(s.weight for s in shards), 1.0, places=12)
                for s in shards:
                    self.assertAlmostEqual(s.weight, len(s) / 500.0, places=12)

    def test_large_concentration_follows_global_histogram(self):
        ds = gen_gaussian_mixture(2, 2, 4000, 1.0, seed=0)
        global_share = ds.class_histogram() / len(ds)
        for seed in range(20):
            for s in dirichlet_partition(ds, 4, 1000.0, seed=seed):
                share = ds.class_histogram(s.indices) / len(s)
                np.testing.assert_array_less(np.abs(share - global_share), 0.1 * global_share)

    def test_small_concentration_gives_dominant_class(self):
        ds = gen_gaussian_mixture(4, 2, 4000, 1.0, seed=0)
        for seed in range(20):
            shards = dirichlet_partition(ds, 8, 0.1, seed=seed)
            max_shares = [ds.class_histogram(s.indices).max() / len(s) for s in shards]
            self.assertGreaterEqual(max(max_shares), 0.7, seed)

    def test_label_skew(self):
        """ Small concentrations give clients dominated by few classes. """
        ds = gen_gaussian_mixture(4, 2, 4000, 1.0, seed=0)
        skewed = dirichlet_partition(ds, 8, 0.05, seed=1)
        uniform = dirichlet_partition(ds, 8, 1000.0, seed=1)

        def mean_max_share(shards):
            return np.mean([ds.class_histogram(s.indices).max() / len(s) for s in shards])
        self.assertGreater(mean_max_share(skewed), mean_max_share(uniform))
        self.assertLess(mean_max_share(uniform), 0.4)

    def test_single_client(self):
        ds = gen_gaussian_mixture(2, 2, 20, 1.0, seed=0)
        shards = dirichlet_partition(ds, 1, 0.5, seed=0)
        self.assertEqual(len(shards), 1)
        self.assertEqual(shards[0].weight, 1.0)
        np.testing.assert_array_equal(shards[0].indices, np.arange(20))

    def test_more_clients_than_samples(self):
        ds = gen_gaussian_mixture(2, 2, 4, 1.0, seed=0)
        with self.assertRaises(PartitionError):
            dirichlet_partition(ds, 5, 0.5, seed=0)

    def test_export_csv(self):
        ds = gen_gaussian_mixture(3, 2, 30, 1.0, seed=0)
        shards = dirichlet_partition(ds, 3, 1.0, seed=0)
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = pathlib.Path(tmp_dir).joinpath('dataset.csv')
            export_dataset_csv(ds, shards, path)
            df = pd.read_csv(path)
        self.assertEqual(list(df.columns), ['x0', 'x1', 'label', 'owner'])
        np.testing.assert_allclose(df[['x0', 'x1']].values, ds.features, rtol=1e-12)
        for s in shards:
            self.assertTrue(np.all(df['owner'].values[s.indices] == s.owner))


class TestSampler(unittest.TestCase):
    def test_holdout_split(self):
        shard = Shard(2, np.arange(10, 30), 0.25)
        train, holdout = split_holdout(shard, 0.2, np.random.default_rng(0))
        self.assertEqual((len(train), len(holdout)), (16, 4))
        self.assertEqual((train.owner, train.weight), (2, 0.25))
        self.assertEqual(sorted(np.concatenate([train.indices, holdout]).tolist()), list(range(10, 30)))

    def test_holdout_keeps_one_training_sample(self):
        train, holdout = split_holdout(Shard(0, np.array([5]), 1.0), 0.5, np.random.default_rng(0))
        self.assertEqual(len(train), 1)
        self.assertEqual(len(holdout), 0)

    def test_sample_batch(self):
        rng = np.random.default_rng(0)
        indices = np.arange(100, 110)
        batch = sample_batch(indices, 4, rng)
        self.assertEqual(len(set(batch.tolist())), 4)
        self.assertTrue(set(batch.tolist()) <= set(indices.tolist()))
        # Small shards are sampled with replacement
        self.assertEqual(sample_batch(indices[:2], 8, rng).shape, (8, ))
        with self.assertRaises(ValueError):
            sample_batch(np.array([], dtype=np.int64), 4, rng)

    def test_minibatches_cover_shard(self):
        batches = list(iterate_minibatches(np.arange(10), 4, np.random.default_rng(0)))
        self.assertEqual([len(b) for b in batches], [4, 4, 2])
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(10)))

    def test_dataset_checks(self):
        with self.assertRaises(ValueError):
            Dataset(np.zeros((3, 2)), np.array([0, 1, 2]), 2)


if __name__ == "__main__":
    unittest.main()
