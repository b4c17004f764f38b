"""Joint density of the multinomial logit model with weighted GP priors.

Latent vectors are stored class-major: f[c * n:(c + 1) * n] is the latent
function of class c over the n training subjects.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, special

from .errors import NumericalError
from .kernels import JITTER_SCALE, class_covariance, logdet, solve
from .metrics import DenseMetric, block_diagonal_metric

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
# Smallest simplex weight kept when drawing Dirichlet weights
MIN_SIMPLEX_WEIGHT = 1e-300
SIMPLEX_TOL = 1e-10
COVARIANCE_CACHE_SIZE = 4


@dataclass
class HyperState:
    """Log-weights theta (m x q), with the concentration alpha for Dirichlet weights."""
    theta: np.ndarray
    variant: str = "gamma"
    alpha: Optional[float] = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2 or not np.all(np.isfinite(self.theta)):
            raise NumericalError("theta must be a finite m x q matrix")
        if self.variant == "dirichlet":
            if self.alpha is None or not self.alpha > 0:
                raise NumericalError(f"Dirichlet weights need a positive concentration, got {self.alpha}")
            sums = np.exp(self.theta).sum(axis=1)
            if np.max(np.abs(sums - 1.0)) > SIMPLEX_TOL:
                raise NumericalError(f"Dirichlet weights must sum to one per class, got {sums}")

    @property
    def weights(self):
        return np.exp(self.theta)

    def copy(self):
        return HyperState(self.theta.copy(), self.variant, self.alpha)


class ModelContext:
    """Labels, Gram matrices and prior of one fit, with a per-class covariance cache.

    The cache is keyed by the exact bytes of theta_c, so it never returns a
    factor for a different theta. A context belongs to a single chain.

    Args:
        labels (LabelSet): Training labels
        grams (GramSet): Training Gram matrices
        prior (PriorConfig): Weight prior
        use_likelihood (bool): If False the label term is dropped everywhere
            and the target becomes the prior p(f, theta)
        class_frequencies (array-like, optional): Class frequencies used by the
            homogeneous metric. Defaults to the training label frequencies.
    """

    def __init__(self, labels, grams, prior, use_likelihood=True, class_frequencies=None,
                 jitter_scale=JITTER_SCALE):
        if labels.n_subjects != grams.n_subjects:
            raise ValueError(f"{labels.n_subjects} labels for {grams.n_subjects} Gram rows")
        self.grams = grams
        self.prior = prior
        self.use_likelihood = use_likelihood
        self.jitter_scale = jitter_scale
        self.n = grams.n_subjects
        self.q = grams.n_sources
        self.set_labels(labels)
        if class_frequencies is None:
            class_frequencies = labels.frequencies
        self.class_frequencies = np.asarray(class_frequencies, dtype=float)
        self.jitter_events = 0
        self._cache = [OrderedDict() for _ in range(self.m)]
        self._homogeneous = OrderedDict()

    def set_labels(self, labels):
        """Swap the labels, keeping grams and cached factors."""
        self.labels = labels
        self.m = labels.n_classes
        self.y = labels.onehot.T.ravel().astype(float)

    def covariance(self, c, theta_c):
        cache = self._cache[c]
        key = np.ascontiguousarray(theta_c, dtype=float).tobytes()
        if key in cache:
            cache.move_to_end(key)
            return cache[key]
        cov = class_covariance(theta_c, self.grams, jitter_scale=self.jitter_scale)
        if cov.jitter_used > 0:
            self.jitter_events += 1
        cache[key] = cov
        if len(cache) > COVARIANCE_CACHE_SIZE:
            cache.popitem(last=False)
        return cov

    def covariances(self, theta):
        """Factored K_c for every class at the given theta."""
        return [self.covariance(c, theta[c]) for c in range(self.m)]

    def blocks(self, f):
        return np.asarray(f).reshape(self.m, self.n)


def softmax_probs(f, n_classes):
    """Class probabilities pi (n x m) from the class-major latent vector f."""
    F = np.asarray(f, dtype=float).reshape(n_classes, -1)
    return special.softmax(F, axis=0).T


def log_likelihood(labels, f):
    """log p(y | f) = sum_i log pi_{i, c(i)}, via log-sum-exp."""
    F = np.asarray(f, dtype=float).reshape(labels.n_classes, -1).T
    return float(np.sum(labels.onehot * F) - special.logsumexp(F, axis=1).sum())


def log_gp_prior(f, covs):
    """sum_c log N(f_c | 0, K_c)."""
    n = covs[0].K.shape[0]
    total = -0.5 * len(covs) * n * LOG_2PI
    for c, cov in enumerate(covs):
        fc = f[c * n:(c + 1) * n]
        total -= 0.5 * fc @ solve(cov, fc) + 0.5 * logdet(cov)
    return float(total)


def prior_logdensity(theta, config, alpha=None):
    """Log prior density of theta (and alpha), on the scale the samplers move on.

    Gamma: Gamma(exp(theta); a, b) times the Jacobian exp(theta) of the log
    transform. Dirichlet: Dirichlet(exp(theta_c.); alpha) per class with
    respect to the simplex measure, plus Exp(alpha; rate) and the Jacobian
    alpha of sampling log(alpha). Flat: 0.
    """
    theta = np.asarray(theta, dtype=float)
    if config.variant == "gamma":
        a, b = config.shape, config.rate
        return float(np.sum(a * np.log(b) - special.gammaln(a) + a * theta - b * np.exp(theta)))
    if config.variant == "dirichlet":
        if alpha is None:
            raise ValueError("The Dirichlet prior needs the concentration alpha")
        m, q = theta.shape
        log_dirichlet = m * (special.gammaln(q * alpha) - q * special.gammaln(alpha)) + (alpha - 1) * theta.sum()
        log_hyper = np.log(config.alpha_rate) - config.alpha_rate * alpha + np.log(alpha)
        return float(log_dirichlet + log_hyper)
    return 0.0


def prior_gradient(theta, config, alpha=None):
    """d log p(theta) / d theta, elementwise."""
    theta = np.asarray(theta, dtype=float)
    if config.variant == "gamma":
        return config.shape - config.rate * np.exp(theta)
    if config.variant == "dirichlet":
        return np.full(theta.shape, alpha - 1.0)
    return np.zeros(theta.shape)


def prior_neg_hessian(theta, config):
    """Diagonal of -d^2 log p(theta) / d theta^2 (zero unless Gamma)."""
    theta = np.asarray(theta, dtype=float)
    if config.variant == "gamma":
        return config.rate * np.exp(theta)
    return np.zeros(theta.shape)


def log_joint(f, theta, ctx, alpha=None):
    """L = log p(y|f) + log p(f|theta) + log p(theta)."""
    covs = ctx.covariances(theta)
    value = log_gp_prior(f, covs) + prior_logdensity(theta, ctx.prior, alpha)
    if ctx.use_likelihood:
        value += log_likelihood(ctx.labels, f)
    return value


def grad_f(f, theta, ctx):
    """-K^{-1} f + y - pi."""
    covs = ctx.covariances(theta)
    n = ctx.n
    grad = np.concatenate([-solve(cov, f[c * n:(c + 1) * n]) for c, cov in enumerate(covs)])
    if ctx.use_likelihood:
        grad += ctx.y - softmax_probs(f, ctx.m).T.ravel()
    return grad


def _solved_grams(cov, grams):
    """K_c^{-1} C_s for every source, shape (q, n, n)."""
    return np.stack([solve(cov, C) for C in grams.grams])


def grad_theta(f, theta, ctx, alpha=None):
    """dL/dtheta_cj for the GP term plus the prior gradient, shape (m, q).

    The GP term is -1/2 w Tr(K^{-1} C_j) + 1/2 w f^T K^{-1} C_j K^{-1} f
    with w = exp(theta_cj).
    """
    theta = np.asarray(theta, dtype=float)
    n = ctx.n
    grad = np.empty(theta.shape)
    for c, cov in enumerate(ctx.covariances(theta)):
        w = np.exp(theta[c])
        a = solve(cov, f[c * n:(c + 1) * n])
        traces = np.trace(_solved_grams(cov, ctx.grams), axis1=1, axis2=2)
        quads = np.einsum("i,sij,j->s", a, ctx.grams.grams, a)
        grad[c] = 0.5 * w * (quads - traces)
    return grad + prior_gradient(theta, ctx.prior, alpha)


def whiten(f, covs):
    """nu_c = L_c^{-1} f_c."""
    n = covs[0].L.shape[0]
    return np.concatenate([linalg.solve_triangular(cov.L, f[c * n:(c + 1) * n], lower=True)
                           for c, cov in enumerate(covs)])


def unwhiten(nu, covs):
    """f_c = L_c nu_c."""
    n = covs[0].L.shape[0]
    return np.concatenate([cov.L @ nu[c * n:(c + 1) * n] for c, cov in enumerate(covs)])


class LatentMetric(DenseMetric):
    """G = K^{-1} + blockdiag_i(W_i) over the class-major latent vector.

    With `probs` given, W_i = diag(pi_i) - pi_i pi_i^T depends on f and the
    derivative terms of the generalized leapfrog are available; without it
    the metric is constant along f.
    """

    def __init__(self, matrix, n_classes, probs=None):
        super().__init__(matrix)
        self.n_classes = n_classes
        self.n_subjects = self.dim // n_classes
        self.probs = probs
        self.constant = probs is None

    def _dprobs(self):
        # [i, r, a] = d pi_ia / d f_ri
        pi = self.probs
        return pi[:, None, :] * (np.eye(self.n_classes)[None] - pi[:, :, None])

    def subject_blocks(self):
        """m x m blocks of G^{-1} coupling the classes of each subject, shape (n, m, m)."""
        m, n = self.n_classes, self.n_subjects
        return np.einsum("aibi->iab", self.inverse().reshape(m, n, m, n))

    def grad_logdet(self):
        if self.constant:
            return np.zeros(self.dim)
        B = self.subject_blocks()
        dpi = self._dprobs()
        T = np.einsum("iaa,ira->ir", B, dpi) - 2.0 * np.einsum("iab,ira,ib->ir", B, dpi, self.probs)
        return T.T.ravel()

    def grad_quadratic(self, u):
        if self.constant:
            return np.zeros(self.dim)
        U = np.asarray(u).reshape(self.n_classes, self.n_subjects).T
        dpi = self._dprobs()
        Q = (np.einsum("ira,ia->ir", dpi, U ** 2)
             - 2.0 * np.einsum("ira,ia->ir", dpi, U) * np.sum(self.probs * U, axis=1)[:, None])
        return Q.T.ravel()


def _latent_matrix(covs, W):
    m = len(covs)
    n = covs[0].K.shape[0]
    G = linalg.block_diag(*[solve(cov, np.eye(n)) for cov in covs])
    if W is not None:
        G4 = G.reshape(m, n, m, n)
        idx = np.arange(n)
        G4[:, idx, :, idx] += W
    return G


def metric_f(f, theta, ctx):
    """Position-dependent metric G_f = K^{-1} + diag(pi) - Phi Phi^T at f."""
    covs = ctx.covariances(theta)
    if not ctx.use_likelihood:
        return LatentMetric(_latent_matrix(covs, None), ctx.m)
    pi = softmax_probs(f, ctx.m)
    W = pi[:, :, None] * np.eye(ctx.m)[None] - pi[:, :, None] * pi[:, None, :]
    return LatentMetric(_latent_matrix(covs, W), ctx.m, probs=pi)


def homogeneous_metric(theta, ctx, class_frequencies=None):
    """Homogeneous metric K^{-1} + diag(pi_p) - Phi_p Phi_p^T.

    pi_p are the training class frequencies, the same for every subject, so
    the metric is constant along f. It is cached per theta.
    """
    pp = ctx.class_frequencies if class_frequencies is None else np.asarray(class_frequencies, dtype=float)
    key = np.ascontiguousarray(theta, dtype=float).tobytes() + pp.tobytes()
    if key in ctx._homogeneous:
        return ctx._homogeneous[key]
    covs = ctx.covariances(theta)
    W = None
    if ctx.use_likelihood:
        W = np.broadcast_to(np.diag(pp) - np.outer(pp, pp), (ctx.n, ctx.m, ctx.m))
    metric = LatentMetric(_latent_matrix(covs, W), ctx.m)
    ctx._homogeneous[key] = metric
    if len(ctx._homogeneous) > COVARIANCE_CACHE_SIZE:
        ctx._homogeneous.popitem(last=False)
    return metric


def metric_theta(theta, ctx, include_prior=False):
    """Per-class Fisher information of theta, shape (m, q, q).

    (G_c)_jr = 1/2 exp(theta_cj + theta_cr) Tr(K_c^{-1} C_r K_c^{-1} C_j).
    With include_prior the negative Hessian of the log prior is added to the
    diagonal.
    """
    theta = np.asarray(theta, dtype=float)
    m, q = theta.shape
    G = np.empty((m, q, q))
    for c, cov in enumerate(ctx.covariances(theta)):
        A = _solved_grams(cov, ctx.grams)
        w = np.exp(theta[c])
        G[c] = 0.5 * np.outer(w, w) * np.einsum("rij,sji->rs", A, A)
        G[c] = 0.5 * (G[c] + G[c].T)
    if include_prior:
        G += np.einsum("cj,jr->cjr", prior_neg_hessian(theta, ctx.prior), np.eye(q))
    return G


def theta_metric_derivatives(theta, ctx, include_prior=False):
    """dG_c / dtheta_ck for every class, shape (m, q, q, q) indexed [c, k, j, r]."""
    theta = np.asarray(theta, dtype=float)
    m, q = theta.shape
    eye = np.eye(q)
    dG = np.empty((m, q, q, q))
    for c, cov in enumerate(ctx.covariances(theta)):
        A = _solved_grams(cov, ctx.grams)
        w = np.exp(theta[c])
        G0 = 0.5 * np.outer(w, w) * np.einsum("rij,sji->rs", A, A)
        # T3[k, r, j] = Tr(A_k A_r A_j)
        T3 = np.einsum("kab,rbc,jca->krj", A, A, A, optimize=True)
        S = np.einsum("krj->kjr", T3) + np.einsum("rkj->kjr", T3)
        wprod = w[:, None, None] * w[None, :, None] * w[None, None, :]
        dG[c] = (eye[:, :, None] + eye[:, None, :]) * G0[None] - 0.5 * wprod * S
        if include_prior:
            dG[c][np.arange(q), np.arange(q), np.arange(q)] += prior_neg_hessian(theta[c], ctx.prior)
    return dG


def theta_metric(theta, ctx, position_dependent=True):
    """RM-HMC mass over the flattened theta: G_theta plus the negative prior Hessian."""
    blocks = metric_theta(theta, ctx, include_prior=True)
    derivatives = theta_metric_derivatives(theta, ctx, include_prior=True) if position_dependent else None
    return block_diagonal_metric(blocks, derivatives)


def sample_prior_hyper(prior, m, q, rng):
    """Draw theta (and alpha) from the weight prior.

    The flat prior is improper; its draws are standard normal and only
    serve as chain starting points.
    """
    if prior.variant == "gamma":
        weights = rng.gamma(prior.shape, 1.0 / prior.rate, size=(m, q))
        return HyperState(np.log(np.maximum(weights, MIN_SIMPLEX_WEIGHT)), "gamma")
    if prior.variant == "dirichlet":
        alpha = rng.exponential(1.0 / prior.alpha_rate)
        if q == 1:
            return HyperState(np.zeros((m, 1)), "dirichlet", float(alpha))
        weights = np.maximum(rng.dirichlet(np.full(q, alpha), size=m), MIN_SIMPLEX_WEIGHT)
        weights /= weights.sum(axis=1, keepdims=True)
        return HyperState(np.log(weights), "dirichlet", float(alpha))
    return HyperState(rng.standard_normal((m, q)), prior.variant)


def sample_prior_latent(theta, ctx, rng):
    """f_c ~ N(0, K_c(theta)) for every class."""
    covs = ctx.covariances(theta)
    return np.concatenate([cov.L @ rng.standard_normal(ctx.n) for cov in covs])
