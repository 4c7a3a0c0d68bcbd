"""Tests for k-means fitting, soft assignment, and entropy."""

import numpy as np
import pytest

from tlx.cluster import (
    Assignment,
    ExplainerModel,
    entropy,
    kmeans_fit,
    load_model,
    save_model,
    soft_assign,
)
from tlx.errors import ConfigError, DataFormatError, NumericError, ShapeError

from helpers import brute_force_kmeans2, naive_soft_assign, partition_signature


def two_blobs(n_per=40, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per, 2)) * 0.5 + np.array([-10.0, 0.0])
    b = rng.normal(size=(n_per, 2)) * 0.5 + np.array([10.0, 0.0])
    return np.vstack([a, b]), a.mean(axis=0), b.mean(axis=0)


class TestKmeansFit:
    def test_two_blobs_recovered(self):
        data, mean_a, mean_b = two_blobs()
        model = kmeans_fit(data, K=2, seed=1)
        got = sorted(model.centroids.tolist())
        want = sorted([mean_a.tolist(), mean_b.tolist()])
        for g, w in zip(got, want):
            assert np.linalg.norm(np.array(g) - np.array(w)) < 0.1

    def test_n_equals_k_zero_inertia(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(5, 3)) * 4
        model = kmeans_fit(data, K=5, seed=0)
        assert model.inertia == pytest.approx(0.0, abs=1e-12)
        got = sorted(map(tuple, np.round(model.centroids, 9).tolist()))
        want = sorted(map(tuple, np.round(data, 9).tolist()))
        assert got == want

    def test_matches_exhaustive_optimum_small(self):
        rng = np.random.default_rng(3)
        for trial in range(30):
            n = int(rng.integers(3, 9))
            data = rng.normal(size=(n, 2)) * rng.uniform(0.5, 3.0)
            model = kmeans_fit(data, K=2, seed=trial)
            oracle = brute_force_kmeans2(data)
            assert model.inertia == pytest.approx(oracle, rel=1e-9, abs=1e-9)

    def test_deterministic_given_seed(self):
        data, _, _ = two_blobs(seed=4)
        m1 = kmeans_fit(data, K=4, seed=7)
        m2 = kmeans_fit(data, K=4, seed=7)
        np.testing.assert_array_equal(m1.centroids, m2.centroids)
        assert m1.inertia == m2.inertia

    def test_row_permutation_same_partition(self):
        rng = np.random.default_rng(5)
        means = np.array([[0.0, 0.0, 0.0], [8.0, 0, 0], [0, 8.0, 0], [0, 0, 8.0]])
        data = np.vstack([rng.normal(size=(15, 3)) * 0.4 + m for m in means])
        perm = rng.permutation(len(data))
        m1 = kmeans_fit(data, K=4, seed=1)
        m2 = kmeans_fit(data[perm], K=4, seed=9)
        lab1 = soft_assign(m1, data).labels
        lab2 = soft_assign(m2, data).labels
        assert partition_signature(lab1) == partition_signature(lab2)

    def test_fewer_points_than_k_rejected(self):
        with pytest.raises(ConfigError):
            kmeans_fit(np.zeros((3, 2)), K=4)

    def test_nonfinite_rejected(self):
        bad = np.zeros((10, 2))
        bad[0, 0] = np.inf
        with pytest.raises(NumericError):
            kmeans_fit(bad, K=2)

    def test_fit_meta_recorded(self):
        data, _, _ = two_blobs()
        model = kmeans_fit(data, K=2, seed=3)
        assert model.fit_meta["n_samples"] == 80
        assert model.fit_meta["seed"] == 3
        assert model.fit_meta["n_iters"] >= 1


class TestSoftAssign:
    def test_equidistant_point_uniform(self):
        centroids = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        model = ExplainerModel(centroids=centroids, tau=1.0)
        out = soft_assign(model, np.zeros((1, 3)))
        np.testing.assert_allclose(out.probs[0], [1 / 3] * 3, atol=1e-12)
        assert out.entropy[0] == pytest.approx(np.log(3.0))

    def test_point_at_centroid_near_one(self):
        centroids = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        model = ExplainerModel(centroids=centroids, tau=1.0)
        out = soft_assign(model, np.array([[0.0, 0.0]]))
        assert out.probs[0, 0] > 1 - 1e-12
        assert out.labels[0] == 0
        assert out.entropy[0] < 1e-9

    def test_two_centroid_closed_form(self):
        # squared distances (0, 1) at tau=1 give exp(0), exp(-1) normalized
        centroids = np.array([[0.0], [1.0]])
        model = ExplainerModel(centroids=centroids, tau=1.0)
        out = soft_assign(model, np.array([[0.0]]))
        assert out.probs[0, 0] == pytest.approx(0.7311, abs=5e-5)
        assert out.probs[0, 1] == pytest.approx(0.2689, abs=5e-5)

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(6)
        data = rng.normal(size=(25, 4)) * 3
        centroids = rng.normal(size=(5, 4)) * 3
        model = ExplainerModel(centroids=centroids, tau=0.7)
        out = soft_assign(model, data)
        probs, labels, ent = naive_soft_assign(data, centroids, 0.7)
        np.testing.assert_allclose(out.probs, probs, atol=1e-12)
        np.testing.assert_array_equal(out.labels, labels)
        np.testing.assert_allclose(out.entropy, ent, atol=1e-12)

    def test_argmax_is_nearest_centroid_any_tau(self):
        rng = np.random.default_rng(7)
        data = rng.normal(size=(40, 3))
        centroids = rng.normal(size=(6, 3))
        nearest = np.argmin(
            ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
        for tau in (0.01, 0.5, 1.0, 10.0, 1000.0):
            model = ExplainerModel(centroids=centroids, tau=tau)
            np.testing.assert_array_equal(soft_assign(model, data).labels, nearest)

    def test_tau_rescale_keeps_labels_changes_entropy(self):
        rng = np.random.default_rng(8)
        data = rng.normal(size=(30, 2))
        centroids = rng.normal(size=(4, 2))
        lo = soft_assign(ExplainerModel(centroids=centroids, tau=0.5), data)
        hi = soft_assign(ExplainerModel(centroids=centroids, tau=5.0), data)
        np.testing.assert_array_equal(lo.labels, hi.labels)
        assert hi.entropy.mean() > lo.entropy.mean()

    def test_rows_sum_to_one_within_tolerance(self):
        rng = np.random.default_rng(9)
        data = rng.normal(size=(100, 5)) * 50  # large distances stress stability
        centroids = rng.normal(size=(8, 5)) * 50
        out = soft_assign(ExplainerModel(centroids=centroids, tau=1.0), data)
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.entropy >= 0)
        assert np.all(out.entropy <= np.log(8) + 1e-12)

    def test_dimension_mismatch_rejected(self):
        model = ExplainerModel(centroids=np.zeros((2, 3)) + np.eye(2, 3))
        with pytest.raises(ShapeError):
            soft_assign(model, np.zeros((5, 4)))


class TestEntropy:
    def test_one_hot_zero(self):
        assert entropy(np.array([[0.0, 1.0, 0.0]]))[0] == 0.0

    def test_uniform_20(self):
        p = np.full((1, 20), 1 / 20)
        assert entropy(p)[0] == pytest.approx(np.log(20.0), abs=1e-12)
        assert entropy(p)[0] == pytest.approx(2.9957, abs=5e-5)

    def test_half_half(self):
        p = np.array([[0.5, 0.5, 0.0, 0.0]])
        assert entropy(p)[0] == pytest.approx(np.log(2.0), abs=1e-12)


class TestModelIO:
    def test_roundtrip(self, tmp_path):
        data, _, _ = two_blobs(seed=10)
        model = kmeans_fit(data, K=3, seed=2, tau=0.8)
        p = tmp_path / "model.tlxc"
        save_model(model, p)
        back = load_model(p)
        assert back.K == 3 and back.C == 2
        assert back.tau == pytest.approx(0.8)
        assert back.inertia == pytest.approx(model.inertia)
        np.testing.assert_allclose(back.centroids, model.centroids, atol=1e-6)
        assert back.fit_meta == {k: int(v) for k, v in model.fit_meta.items()}

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "model.tlxc"
        model = kmeans_fit(two_blobs()[0], K=2, seed=0)
        save_model(model, p)
        blob = bytearray(p.read_bytes())
        blob[:4] = b"XXXX"
        p.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="offset 0"):
            load_model(p)

    def test_missing_file_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_model(tmp_path / "none.tlxc")


class TestAssignmentInvariants:
    def test_bad_row_sum_rejected(self):
        with pytest.raises(NumericError):
            Assignment(probs=np.array([[0.5, 0.3]]), labels=np.array([0]),
                       entropy=np.array([0.1]))
