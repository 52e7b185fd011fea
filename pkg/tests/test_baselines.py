import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajtensor.baselines import (
    FitError,
    HandcraftedClassifier,
    InsufficientHistoryError,
    handcrafted_classify,
    handcrafted_extract,
    handcrafted_fit,
    mean_fit,
    mean_predict,
    most_similar_index,
    most_similar_predict,
    read_distance_matrix,
    shortest_distance_predict,
    validate_distance_matrix,
    write_distance_matrix,
)
from trajtensor.nn import bce_loss
from trajtensor.tensor_core import BoundingBox


class TestShortestDistance:
    def test_three_cameras(self):
        mat = [[0, 5, 10], [5, 0, 7], [10, 7, 0]]
        s = shortest_distance_predict(mat, 1)
        np.testing.assert_array_equal(s, [0, 1 / 6, 1 / 11])
        assert np.argmax(s) == 1

    def test_tie_preserved(self):
        s = shortest_distance_predict([[0, 4, 4], [4, 0, 1], [4, 1, 0]], 1)
        assert s[1] == s[2]

    def test_two_cameras(self):
        for cam, other in [(1, 1), (2, 0)]:
            assert np.argmax(shortest_distance_predict([[0, 3], [3, 0]], cam)) == other

    def test_bad_camera(self):
        with pytest.raises(ValueError):
            shortest_distance_predict([[0, 1], [1, 0]], 3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10**6))
    def test_monotone_and_departure_never_wins(self, k, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((k, k)) * 50
        mat = (a + a.T) / 2
        np.fill_diagonal(mat, 0)
        for cam in range(1, k + 1):
            s = shortest_distance_predict(mat, cam)
            assert s[cam - 1] == 0 and np.argmax(s) != cam - 1
            others = [i for i in range(k) if i != cam - 1]
            for i in others:
                for j in others:
                    if mat[cam - 1, i] < mat[cam - 1, j]:
                        assert s[i] > s[j]


class TestDistanceMatrix:
    def test_validation(self):
        with pytest.raises(ValueError):
            validate_distance_matrix([[0, 1], [2, 0]])
        with pytest.raises(ValueError):
            validate_distance_matrix([[1, 1], [1, 0]])
        with pytest.raises(ValueError):
            validate_distance_matrix([[0, -1], [-1, 0]])
        with pytest.raises(ValueError):
            validate_distance_matrix([[0, 1, 2]])

    def test_round_trip(self, tmp_path):
        mat = np.array([[0, 1.5, 2.25], [1.5, 0, 3], [2.25, 3, 0]])
        write_distance_matrix(tmp_path / "d.txt", mat)
        np.testing.assert_array_equal(read_distance_matrix(tmp_path / "d.txt"), mat)


class TestMean:
    def test_hand_average(self):
        model = mean_fit([1, 1], [[1, 0, 0], [0, 1, 0]])
        np.testing.assert_array_equal(mean_predict(model, 1), [0.5, 0.5, 0])

    def test_single_sample_verbatim(self):
        tgt = np.random.default_rng(0).integers(0, 2, (3, 8)).astype(float)
        np.testing.assert_array_equal(mean_predict(mean_fit([2], [tgt]), 2), tgt)

    def test_global_fallback(self, caplog):
        model = mean_fit([1, 2], [[1, 0], [0, 0]])
        with caplog.at_level(logging.INFO):
            np.testing.assert_array_equal(mean_predict(model, 3), [0.5, 0])
        assert "global mean" in caplog.text

    def test_empty(self):
        with pytest.raises(FitError):
            mean_fit([], np.zeros((0, 3)))
        with pytest.raises(FitError):
            mean_fit([1], np.zeros((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 10**6))
    def test_range_and_permutation_invariance(self, n, seed):
        rng = np.random.default_rng(seed)
        cams = rng.integers(1, 4, n)
        tgts = rng.integers(0, 2, (n, 3, 5)).astype(float)
        a = mean_fit(cams, tgts)
        perm = rng.permutation(n)
        b = mean_fit(cams[perm], tgts[perm])
        for cam in a.per_camera:
            p = mean_predict(a, cam)
            assert np.all((p >= 0) & (p <= 1))
            np.testing.assert_allclose(p, mean_predict(b, cam), rtol=1e-12)


class TestMostSimilar:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.pool = rng.random((6, 10, 4))
        self.targets = rng.integers(0, 2, (6, 3)).astype(float)

    def test_identical_query(self):
        np.testing.assert_array_equal(most_similar_predict(self.pool, self.targets, self.pool[4]), self.targets[4])

    def test_pool_of_one(self):
        out = most_similar_predict(self.pool[:1], self.targets[:1], np.zeros((10, 4)))
        np.testing.assert_array_equal(out, self.targets[0])

    def test_tie_goes_to_first(self):
        pool = np.zeros((3, 2, 4))
        pool[1, 0, 0] = 1.0
        pool[2, 0, 0] = -1.0
        assert most_similar_index(pool[1:], np.zeros((2, 4))) == 0
        assert most_similar_index(pool[[2, 1]], np.zeros((2, 4))) == 0

    def test_empty_pool(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = most_similar_predict(np.zeros((0, 10, 4)), np.zeros((0, 3)), np.zeros((10, 4)), fallback=[0.2, 0.3, 0.1])
        np.testing.assert_array_equal(out, [0.2, 0.3, 0.1])
        assert "empty pool" in caplog.text
        with pytest.raises(FitError):
            most_similar_predict(np.zeros((0, 10, 4)), np.zeros((0, 3)), np.zeros((10, 4)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_returns_exact_training_target(self, seed):
        q = np.random.default_rng(seed).random((10, 4))
        out = most_similar_predict(self.pool, self.targets, q)
        d = [np.sum((p - q) ** 2) for p in self.pool]
        np.testing.assert_array_equal(out, self.targets[int(np.argmin(d))])


class TestHandcraftedExtract:
    def test_stationary(self):
        f = handcrafted_extract(np.tile([0.1, 0.2, 0.3, 0.6], (5, 1)))
        np.testing.assert_allclose(f[:4], 0, atol=1e-15)
        np.testing.assert_allclose(f[4:], [0.4, 0.2, 0.1, 0.2, 0.3, 0.6], rtol=1e-12)

    def test_constant_velocity(self):
        rows = np.array([[0.1 + 0.01 * t, 0.2, 0.2 + 0.01 * t, 0.5] for t in range(10)])
        f = handcrafted_extract(rows)
        np.testing.assert_allclose(f[:4], [0.01, 0, 0, 0], atol=1e-15)

    def test_box_sequence_input(self):
        boxes = [BoundingBox(0.1, 0.2, 0.3, 0.6), None, BoundingBox(0.1, 0.2, 0.3, 0.6), BoundingBox(0.1, 0.2, 0.3, 0.6)]
        f = handcrafted_extract(boxes)
        assert f.shape == (10,)
        np.testing.assert_allclose(f[4:6], [0.4, 0.2])

    def test_insufficient_history(self):
        rows = np.full((10, 4), np.nan)
        rows[3] = rows[7] = [0.1, 0.1, 0.2, 0.2]
        with pytest.raises(InsufficientHistoryError):
            handcrafted_extract(rows)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
    def test_translation_covariance(self, seed, dx, dy):
        rows = np.random.default_rng(seed).random((6, 4)) * 0.5 + 0.25
        a = handcrafted_extract(rows)
        b = handcrafted_extract(rows + [dx, dy, dx, dy])
        np.testing.assert_allclose(b[:6], a[:6], atol=1e-12)
        np.testing.assert_allclose(b[6:], a[6:] + [dx, dy, dx, dy], atol=1e-12)


class TestHandcraftedClassifier:
    def test_zero_weights_half(self):
        clf = HandcraftedClassifier((3,))
        for layer in clf.net.layers:
            for arr in layer.params.values():
                arr[...] = 0
        np.testing.assert_array_equal(handcrafted_classify(clf, np.zeros(10)), np.full(3, 0.5))

    def test_output_range_and_shape(self):
        clf = HandcraftedClassifier((2, 6))
        out = clf.predict(np.random.default_rng(0).standard_normal((4, 10)) * 10)
        assert out.shape == (4, 2, 6) and np.all((out > 0) & (out < 1))

    def test_feature_size_checked(self):
        with pytest.raises(ValueError):
            HandcraftedClassifier((3,)).predict(np.zeros(9))

    def test_toy_overfit(self):
        rng = np.random.default_rng(2)
        feats = rng.standard_normal((8, 10))
        tgts = rng.integers(0, 2, (8, 3)).astype(float)
        clf = HandcraftedClassifier((3,), rng=rng)
        clf.fit(feats, tgts, epochs=200, lr=1e-2)
        assert bce_loss(clf.predict(feats), tgts)[0] < 0.05

    def test_fit_empty(self):
        with pytest.raises(FitError):
            HandcraftedClassifier((3,)).fit(np.zeros((0, 10)), np.zeros((0, 3)))


class TestHandcraftedBaseline:
    def test_per_camera_and_fallback(self):
        rng = np.random.default_rng(3)
        tracks = rng.random((12, 10, 4))
        cams = [1] * 6 + [2] * 6
        tgts = rng.integers(0, 2, (12, 3)).astype(float)
        short = np.full((10, 4), np.nan)
        short[0] = [0.1, 0.1, 0.2, 0.2]
        tracks_list = list(tracks) + [short]
        base = handcrafted_fit(cams + [3], tracks_list, np.vstack([tgts, [[1, 1, 0]]]), epochs=5)
        assert sorted(base.classifiers) == [1, 2]
        assert base.predict(1, tracks[0]).shape == (3,)
        # camera 3 only has a short track: mean fallback
        np.testing.assert_array_equal(base.predict(3, tracks[0]), [1, 1, 0])
        # short query on a trained camera also falls back
        np.testing.assert_array_equal(base.predict(1, short), tgts[:6].mean(axis=0))

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        tracks, tgts = rng.random((6, 10, 4)), rng.integers(0, 2, (6, 2)).astype(float)
        a = handcrafted_fit([1] * 6, tracks, tgts, epochs=3, seed=7)
        b = handcrafted_fit([1] * 6, tracks, tgts, epochs=3, seed=7)
        np.testing.assert_array_equal(a.predict(1, tracks[2]), b.predict(1, tracks[2]))
