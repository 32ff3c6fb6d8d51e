import numpy as np
import pytest

from dnc_rl.errors import ConfigError, ShapeError
from dnc_rl.partition import (
    Partition,
    _lloyd,
    estimate_weights,
    kmeans,
    load_partition,
    save_partition,
    varying_dimensions,
)
from dnc_rl.rng import Rng


def four_blobs(n_per=500, sigma=0.2, seed=0):
    rng = Rng(seed)
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0]])
    samples = np.concatenate(
        [c + sigma * rng.normal((n_per, 2)) for c in centers]
    )
    return samples, centers


def brute_force_wcss(samples, centers):
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


class TestKmeans:
    def test_two_separated_pairs(self):
        samples = np.array([[0.0], [0.0], [10.0], [10.0]])
        # need >= 10*k samples; repeat the pattern
        samples = np.tile(samples, (10, 1))
        part = kmeans(samples, 2, Rng(0))
        assert sorted(part.centers.ravel().tolist()) == [0.0, 10.0]
        np.testing.assert_allclose(part.weights, [0.5, 0.5])

    def test_k1_center_is_mean(self):
        rng = Rng(1)
        samples = rng.normal((100, 3))
        part = kmeans(samples, 1, rng)
        np.testing.assert_allclose(part.centers[0], samples.mean(axis=0), atol=1e-12)

    def test_four_blob_recovery_and_wcss(self):
        samples, true_centers = four_blobs()
        part = kmeans(samples, 4, Rng(2))
        # each true center matched within 3 sigma by some fitted center
        for c in true_centers:
            d = np.linalg.norm(part.centers - c, axis=1).min()
            assert d < 3 * 0.2
        labels = part.assign_batch(samples)
        wcss = float(((samples - part.centers[labels]) ** 2).sum())
        assert wcss == pytest.approx(brute_force_wcss(samples, part.centers), rel=1e-12)

    def test_too_few_distinct_samples(self):
        samples = np.tile(np.array([[1.0], [2.0]]), (20, 1))
        with pytest.raises(ConfigError):
            kmeans(samples, 3, Rng(3))

    def test_sample_count_precondition(self):
        with pytest.raises(ConfigError):
            kmeans(np.random.default_rng(0).normal(size=(15, 2)), 2, Rng(0))

    def test_deterministic(self):
        samples, _ = four_blobs(seed=4)
        a = kmeans(samples, 4, Rng(5))
        b = kmeans(samples, 4, Rng(5))
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_varying_dimension_mask(self):
        rng = Rng(6)
        n = 200
        samples = np.stack(
            [rng.normal(n), np.full(n, 3.14), rng.uniform(size=n)], axis=1
        )
        assert varying_dimensions(samples) == (0, 2)
        part = kmeans(samples, 2, rng)
        assert part.feature_mask == (0, 2)
        assert part.centers.shape == (2, 2)


class TestLloydProperties:
    def test_wcss_monotone_within_restart(self):
        samples, _ = four_blobs(seed=7)
        for r in range(10):
            _, _, trace = _lloyd(samples, 4, Rng(8).child(r))
            diffs = np.diff(trace)
            assert (diffs <= 1e-9).all(), f"restart {r}: {trace}"

    def test_centers_are_assigned_means_at_convergence(self):
        samples, _ = four_blobs(seed=9)
        part = kmeans(samples, 4, Rng(10))
        labels = part.assign_batch(samples)
        for c in range(4):
            np.testing.assert_allclose(
                part.centers[c], samples[labels == c].mean(axis=0), atol=1e-9
            )


class TestAssign:
    def test_center_maps_to_itself(self):
        samples, _ = four_blobs(seed=11)
        part = kmeans(samples, 4, Rng(12))
        # assign takes full states; build one with masked dims filled
        for i in range(4):
            state = np.zeros(2)
            state[:] = part.centers[i]
            assert part.assign(state) == i

    def test_tie_breaks_to_lowest_index(self):
        part = Partition(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]), None)
        assert part.assign(np.array([0.0])) == 0

    def test_matches_brute_force_scan(self):
        samples, _ = four_blobs(seed=13)
        part = kmeans(samples, 4, Rng(14))
        rng = Rng(15)
        queries = rng.normal((1000, 2)) * 4 + 3
        for q in queries:
            d2 = ((part.centers - q) ** 2).sum(axis=1)
            assert part.assign(q) == int(np.argmin(d2))

    def test_dimension_mismatch(self):
        part = Partition(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]), None)
        with pytest.raises(ShapeError):
            part.assign(np.zeros(2))


class TestWeights:
    def test_uniform_blobs_quarter_each(self):
        samples, _ = four_blobs(n_per=2500, seed=16)
        part = kmeans(samples, 4, Rng(17))
        fresh, _ = four_blobs(n_per=2500, seed=18)
        updated = estimate_weights(part, fresh)
        np.testing.assert_allclose(updated.weights, 0.25, atol=0.05)

    def test_all_in_one_cluster_floors_others(self):
        part = Partition(np.array([[0.0], [100.0]]), np.array([0.5, 0.5]), None)
        fresh = np.zeros((500, 1))
        updated = estimate_weights(part, fresh)
        # floored at 1e-4, then renormalized alongside the dominant weight
        assert updated.weights[1] == pytest.approx(1e-4 / 1.0001, rel=1e-9)
        assert updated.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_weights_always_sum_to_one(self):
        for seed in range(5):
            samples, _ = four_blobs(seed=seed)
            part = kmeans(samples, 4, Rng(seed))
            assert part.weights.sum() == pytest.approx(1.0, abs=1e-9)
            assert (part.weights > 0).all()

    def test_minimum_sample_count(self):
        part = Partition(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]), None)
        with pytest.raises(ConfigError):
            estimate_weights(part, np.zeros((50, 1)))


class TestPartitionInvariants:
    def test_weight_validation(self):
        with pytest.raises(ConfigError):
            Partition(np.array([[0.0], [1.0]]), np.array([0.7, 0.7]), None)

    def test_distinct_centers_required(self):
        with pytest.raises(ConfigError):
            Partition(np.array([[1.0], [1.0]]), np.array([0.5, 0.5]), None)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        samples, _ = four_blobs(seed=19)
        part = kmeans(samples, 4, Rng(20))
        path = tmp_path / "partition.json"
        save_partition(path, part)
        loaded = load_partition(path)
        np.testing.assert_array_equal(loaded.centers, part.centers)
        np.testing.assert_array_equal(loaded.weights, part.weights)
        assert loaded.feature_mask == part.feature_mask

    def test_seventeen_significant_digits(self, tmp_path):
        part = Partition(
            np.array([[1.0 / 3.0], [2.0 / 3.0]]), np.array([1.0 / 3.0, 2.0 / 3.0]), (0,)
        )
        path = tmp_path / "partition.json"
        save_partition(path, part)
        text = path.read_text()
        assert "0.33333333333333331" in text
        loaded = load_partition(path)
        assert loaded.centers[0][0] == 1.0 / 3.0
