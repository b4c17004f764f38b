"""Gram matrices, weighted class covariances and their Cholesky factors."""

import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

from .errors import DataError, FactorizationFailure

logger = logging.getLogger(__name__)

JITTER_SCALE = 1e-8
MAX_JITTER_ESCALATIONS = 8


@dataclass(frozen=True)
class GramSet:
    """Stack of q symmetric PSD Gram matrices C_s, each n x n."""
    grams: np.ndarray
    modality_ids: Tuple[str, ...]

    @property
    def n_sources(self):
        return self.grams.shape[0]

    @property
    def n_subjects(self):
        return self.grams.shape[1]

    def take(self, sources):
        return GramSet(self.grams[list(sources)], tuple(self.modality_ids[s] for s in sources))


@dataclass(frozen=True)
class CrossGramSet:
    """Test-by-training inner products and the test points' own inner products."""
    cross: np.ndarray  # (q, n_test, n_train)
    diag: np.ndarray   # (q, n_test)


@dataclass(frozen=True)
class ClassCovariance:
    """K_c with its lower Cholesky factor of K_c + jitter_used * I."""
    K: np.ndarray
    L: np.ndarray
    jitter_used: float = 0.0


def gram(X):
    """Linear-kernel Gram matrix X X^T of a normalized modality."""
    values = X.values
    C = values @ values.T
    return 0.5 * (C + C.T)


def _content_key(modalities):
    digest = hashlib.sha256()
    for modality in modalities:
        digest.update(modality.modality_id.encode("utf-8"))
        digest.update(np.ascontiguousarray(modality.values).tobytes())
        digest.update(str(modality.values.shape).encode("utf-8"))
    return digest.hexdigest()


def build_gram_set(modalities, cache_dir=None):
    """Compute one Gram matrix per normalized modality.

    Args:
        modalities (list of ModalityMatrix): Normalized, row-aligned modalities
        cache_dir (str, optional): Directory of cached Gram stacks keyed by a
            hash of the normalized data

    Returns:
        GramSet: Gram matrices in modality order
    """
    ids = tuple(modality.modality_id for modality in modalities)
    n = {modality.n_subjects for modality in modalities}
    if len(n) != 1:
        raise DataError(f"Modalities have different numbers of rows: {sorted(n)}")

    cache_path = None
    if cache_dir:
        cache_path = os.path.join(cache_dir, f"grams_{_content_key(modalities)}.npz")
        if os.path.exists(cache_path):
            with np.load(cache_path) as cached:
                logger.debug(f"Loaded Gram matrices from cache {cache_path}")
                return GramSet(cached["grams"], ids)

    grams = np.stack([gram(modality) for modality in modalities])
    for s, C in enumerate(grams):
        min_eig = np.linalg.eigvalsh(C).min()
        if min_eig < -1e-8 * max(C.diagonal().max(), 1.0):
            raise DataError(f"Gram matrix of {ids[s]!r} is not positive semi-definite (min eigenvalue {min_eig:.3e})")

    if cache_path:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez(cache_path, grams=grams)
    return GramSet(grams, ids)


def cross_gram_set(test_modalities, train_modalities):
    """Inner products between test and training subjects, per modality."""
    cross = np.stack([test.values @ train.values.T
                      for test, train in zip(test_modalities, train_modalities)])
    diag = np.stack([np.einsum("ij,ij->i", test.values, test.values) for test in test_modalities])
    return CrossGramSet(cross=cross, diag=diag)


def cholesky_with_jitter(K, jitter_scale=JITTER_SCALE, max_escalations=MAX_JITTER_ESCALATIONS):
    """Lower Cholesky factor, adding diagonal jitter only if needed.

    The plain factorization is tried first. On failure jitter starts at
    jitter_scale * mean(diag K) and grows tenfold per escalation.

    Args:
        K (numpy.ndarray): Symmetric matrix
        jitter_scale (float): Initial jitter relative to the mean diagonal
        max_escalations (int): Number of tenfold increases after the first jittered attempt

    Returns:
        tuple: (L, jitter_used) with L L^T = K + jitter_used * I
    """
    try:
        return linalg.cholesky(K, lower=True), 0.0
    except linalg.LinAlgError:
        pass

    mean_diag = np.mean(np.diag(K))
    if not np.isfinite(mean_diag) or mean_diag <= 0:
        raise FactorizationFailure(f"Cannot factorize matrix with mean diagonal {mean_diag}")

    eye = np.eye(K.shape[0])
    jitter = jitter_scale * mean_diag
    for _ in range(max_escalations + 1):
        try:
            L = linalg.cholesky(K + jitter * eye, lower=True)
            logger.debug(f"Added jitter of {jitter:.3e} to factorize covariance")
            return L, jitter
        except linalg.LinAlgError:
            jitter *= 10

    raise FactorizationFailure(
        f"Matrix not positive definite even with jitter {jitter / 10:.3e}", jitter=jitter / 10)


def class_covariance(theta_c, grams, jitter_scale=JITTER_SCALE):
    """K_c = sum_s exp(theta_cs) C_s and its factorization.

    Args:
        theta_c (array-like): Length-q log-weights of one class
        grams (GramSet): Gram matrices

    Returns:
        ClassCovariance: Covariance, factor and jitter used
    """
    theta_c = np.asarray(theta_c, dtype=float)
    if theta_c.shape != (grams.n_sources,) or not np.all(np.isfinite(theta_c)):
        raise ValueError(f"theta_c must be a finite vector of length {grams.n_sources}")
    K = np.tensordot(np.exp(theta_c), grams.grams, axes=1)
    L, jitter = cholesky_with_jitter(K, jitter_scale=jitter_scale)
    return ClassCovariance(K=K, L=L, jitter_used=jitter)


def unweighted_sum_covariance(grams):
    """K_c = sum_s C_s, the unweighted combination."""
    return class_covariance(np.zeros(grams.n_sources), grams)


def solve(cov, v):
    """(K_c + jitter I)^{-1} v by two triangular solves."""
    return linalg.cho_solve((cov.L, True), v)


def logdet(cov):
    """log|K_c + jitter I| from the Cholesky diagonal."""
    return 2.0 * np.sum(np.log(np.diag(cov.L)))
