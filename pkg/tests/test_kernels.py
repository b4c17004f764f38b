import os

import pytest
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from multimodal_gpc.data import ModalityMatrix
from multimodal_gpc.errors import FactorizationFailure
from multimodal_gpc.kernels import (build_gram_set, cholesky_with_jitter, class_covariance, cross_gram_set,
                                    logdet, solve, unweighted_sum_covariance)

from conftest import make_grams


class TestCholesky:
    def test_identity_needs_no_jitter(self):
        L, jitter = cholesky_with_jitter(np.eye(4))
        assert jitter == 0.0
        assert_array_equal(L, np.eye(4))

    def test_rank_one_gets_small_jitter(self):
        K = np.array([[1.0, 1.0], [1.0, 1.0]])
        L, jitter = cholesky_with_jitter(K)
        assert 0.0 < jitter < 1e-3
        assert_allclose(L @ L.T, K + jitter * np.eye(2), atol=1e-12)

    def test_negative_definite_fails(self):
        with pytest.raises(FactorizationFailure):
            cholesky_with_jitter(-np.eye(3))


class TestGrams:
    def test_gram_set_symmetric_psd(self, rng):
        modalities = [ModalityMatrix(rng.standard_normal((6, 3)), "a"),
                      ModalityMatrix(rng.standard_normal((6, 8)), "b")]
        grams = build_gram_set(modalities)
        assert grams.grams.shape == (2, 6, 6)
        assert grams.modality_ids == ("a", "b")
        assert_allclose(grams.grams, np.transpose(grams.grams, (0, 2, 1)), atol=1e-10)
        assert np.linalg.eigvalsh(grams.grams[0]).min() > -1e-8

    def test_cache_round_trip(self, rng, tmp_path):
        modalities = [ModalityMatrix(rng.standard_normal((5, 3)), "a")]
        first = build_gram_set(modalities, cache_dir=tmp_path)
        assert len(os.listdir(tmp_path)) == 1
        second = build_gram_set(modalities, cache_dir=tmp_path)
        assert_array_equal(first.grams, second.grams)

    def test_cross_grams(self, rng):
        train = [ModalityMatrix(rng.standard_normal((6, 3)), "a")]
        test = [ModalityMatrix(rng.standard_normal((2, 3)), "a")]
        cross = cross_gram_set(test, train)
        assert cross.cross.shape == (1, 2, 6)
        assert_allclose(cross.cross[0], test[0].values @ train[0].values.T)
        assert_allclose(cross.diag[0], np.sum(test[0].values ** 2, axis=1))


class TestClassCovariance:
    def test_weighted_sum(self):
        grams = make_grams(4, 3)
        theta_c = np.array([0.3, -1.0, 0.5])
        cov = class_covariance(theta_c, grams)
        expected = sum(np.exp(t) * C for t, C in zip(theta_c, grams.grams))
        assert_allclose(cov.K, expected, rtol=1e-12)
        assert_allclose(cov.L @ cov.L.T, cov.K + cov.jitter_used * np.eye(4), rtol=1e-8)

    def test_unweighted_sum(self):
        grams = make_grams(4, 2)
        assert_allclose(unweighted_sum_covariance(grams).K, grams.grams.sum(axis=0))

    def test_solve_and_logdet(self, rng):
        cov = class_covariance(np.zeros(2), make_grams(5, 2))
        v = rng.standard_normal(5)
        assert_allclose(solve(cov, v), np.linalg.solve(cov.K, v), rtol=1e-10)
        assert_allclose(logdet(cov), np.linalg.slogdet(cov.K)[1], rtol=1e-10)

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            class_covariance(np.zeros(3), make_grams(4, 2))
