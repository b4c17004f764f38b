"""Monte-Carlo predictive class probabilities for unseen subjects."""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import linalg, special

from .errors import EmptyTrace
from .kernels import cross_gram_set, solve
from .utils import STREAM_PREDICT, rng_stream

logger = logging.getLogger(__name__)

REJECT = -1
# Negative predictive variances above this (relative to the prior variance) are rounding
VARIANCE_TOL = 1e-10


@dataclass
class PredictiveDistribution:
    """pi* per test subject with Monte-Carlo standard errors."""
    probs: np.ndarray
    stderr: np.ndarray
    n1: int
    n2: int
    subject_ids: List[str] = field(default_factory=list)

    @property
    def n_subjects(self):
        return self.probs.shape[0]

    @property
    def n_classes(self):
        return self.probs.shape[1]

    def decisions(self, threshold=0.0):
        return decide(self.probs, threshold)


def predictive_conditional(f_sample, theta_sample, cross, ctx):
    """Mean and variance of the test latents given one posterior sample.

    mu*_c = K*_c K_c^{-1} f_c and var*_c = k**_c - diag(K*_c K_c^{-1} K*_c^T);
    classes are independent, so only per-class variances are needed.

    Args:
        f_sample (numpy.ndarray): Training latents, length m*n
        theta_sample (numpy.ndarray): m x q log-weights
        cross (CrossGramSet): Test-by-training inner products
        ctx (ModelContext): Training model (supplies the factors)

    Returns:
        tuple: (mu, var), both n_test x m
    """
    n = ctx.n
    covs = ctx.covariances(theta_sample)
    n_test = cross.cross.shape[1]
    mu = np.empty((n_test, ctx.m))
    var = np.empty((n_test, ctx.m))
    for c, cov in enumerate(covs):
        w = np.exp(theta_sample[c])
        K_star = np.tensordot(w, cross.cross, axes=1)
        k_star_star = w @ cross.diag
        mu[:, c] = K_star @ solve(cov, f_sample[c * n:(c + 1) * n])
        V = linalg.solve_triangular(cov.L, K_star.T, lower=True)
        var[:, c] = k_star_star - np.sum(V ** 2, axis=0)

    negative = var < -VARIANCE_TOL * np.maximum(1.0, np.abs(var).max())
    if np.any(negative):
        logger.warning(f"Clamped {int(negative.sum())} negative predictive variances to zero")
    return mu, np.maximum(var, 0.0)


def mc_predict(traces, cross, ctx, n2=32, seed=0, seed_keys=(), subject_ids=None):
    """Two-stage Monte-Carlo estimate of p(y* | y).

    For every posterior sample the softmax is averaged over n2 draws of
    f* ~ N(mu*, var*); the results are averaged over samples. The same
    standard normal draws are reused for every sample, so the estimate does
    not depend on sample order. The draws and the samples are crossed, so the
    squared standard error is the variance of the per-sample means over n1
    plus the variance of the per-draw means over n2.

    Returns:
        PredictiveDistribution: Probabilities for every test subject
    """
    thetas, fs = [], []
    for trace in traces:
        if trace.n_samples and trace.f is not None:
            thetas.append(trace.theta)
            fs.append(trace.f)
    if not thetas:
        raise EmptyTrace("No posterior samples with latent functions to predict from")
    thetas = np.concatenate(thetas)
    fs = np.concatenate(fs)
    n1 = len(thetas)

    rng = rng_stream(seed, STREAM_PREDICT, *seed_keys)
    n_test = cross.cross.shape[1]
    z = rng.standard_normal((n2, n_test, ctx.m))

    per_sample = np.empty((n1, n_test, ctx.m))
    per_draw = np.zeros((n2, n_test, ctx.m))
    for i in range(n1):
        mu, var = predictive_conditional(fs[i], thetas[i], cross, ctx)
        draws = special.softmax(mu[None] + np.sqrt(var)[None] * z, axis=2)
        per_sample[i] = draws.mean(axis=0)
        per_draw += draws
    per_draw /= n1

    probs = per_sample.mean(axis=0)
    variance = np.zeros((n_test, ctx.m))
    if n1 > 1:
        variance += per_sample.var(axis=0, ddof=1) / n1
    if n2 > 1:
        variance += per_draw.var(axis=0, ddof=1) / n2
    return PredictiveDistribution(probs, np.sqrt(variance), n1, n2, list(subject_ids or []))


def predict_subjects(traces, ctx, train_modalities, test_modalities, n2=32, seed=0, seed_keys=(),
                     subject_ids=None):
    """Predict test subjects whose features were normalized with training statistics."""
    cross = cross_gram_set(test_modalities, train_modalities)
    prediction = mc_predict(traces, cross, ctx, n2=n2, seed=seed, seed_keys=seed_keys,
                            subject_ids=subject_ids)
    logger.info(f"Predicted {prediction.n_subjects} subjects from {prediction.n1} posterior samples "
                f"x {n2} draws")
    return prediction


def decide(probs, threshold=0.0):
    """Most probable class, or REJECT when its probability is below threshold.

    Ties go to the lowest class index. Accepts one probability vector or an
    n x m matrix.
    """
    probs = np.asarray(probs, dtype=float)
    best = np.argmax(probs, axis=-1)
    confident = np.max(probs, axis=-1) >= threshold
    decisions = np.where(confident, best, REJECT)
    return int(decisions) if decisions.ndim == 0 else decisions
