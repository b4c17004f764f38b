"""Mass matrices / metric tensors used by the Hamiltonian samplers.

A metric object exposes what the integrators need:

- ``solve(v)``: G^{-1} v
- ``logdet()``: log|G|
- ``sample_momentum(rng)``: a draw from N(0, G)
- ``grad_logdet()``: vector of Tr(G^{-1} dG/dx_k)
- ``grad_quadratic(u)``: vector of u^T (dG/dx_k) u

Constant metrics return zeros for the last two.
"""

import numpy as np
from scipy import linalg

from .errors import FactorizationFailure
from .kernels import cholesky_with_jitter


class IdentityMetric:
    """Unit mass matrix."""

    constant = True

    def __init__(self, dim):
        self.dim = dim

    def apply(self, v):
        return np.array(v, dtype=float)

    def solve(self, v):
        return np.array(v, dtype=float)

    def logdet(self):
        return 0.0

    def sample_momentum(self, rng):
        return rng.standard_normal(self.dim)

    def grad_logdet(self):
        return np.zeros(self.dim)

    def grad_quadratic(self, u):
        return np.zeros(self.dim)


class DenseMetric:
    """Dense symmetric positive definite metric.

    Args:
        matrix (numpy.ndarray): D x D metric G
        derivatives (numpy.ndarray, optional): D x D x D array whose k-th
            slice is dG/dx_k; omitted for a constant metric
    """

    def __init__(self, matrix, derivatives=None):
        self.matrix = 0.5 * (matrix + matrix.T)
        self.dim = matrix.shape[0]
        self.derivatives = derivatives
        self.constant = derivatives is None
        self.chol = _factor(self.matrix)
        self._inverse = None

    def apply(self, v):
        return self.matrix @ v

    def solve(self, v):
        return linalg.cho_solve((self.chol, True), v)

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))

    def sample_momentum(self, rng):
        return self.chol @ rng.standard_normal(self.dim)

    def inverse(self):
        if self._inverse is None:
            self._inverse = self.solve(np.eye(self.dim))
        return self._inverse

    def grad_logdet(self):
        if self.constant:
            return np.zeros(self.dim)
        return np.einsum("ij,kji->k", self.inverse(), self.derivatives)

    def grad_quadratic(self, u):
        if self.constant:
            return np.zeros(self.dim)
        return np.einsum("i,kij,j->k", u, self.derivatives, u)


def _factor(matrix):
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        L, _ = cholesky_with_jitter(matrix)
        return L


def block_diagonal_metric(blocks, derivative_blocks=None):
    """Assemble a DenseMetric from per-class q x q blocks.

    Args:
        blocks (numpy.ndarray): (m, q, q) metric blocks
        derivative_blocks (numpy.ndarray, optional): (m, q, q, q) array,
            [c, k] holding dG_c/dx_{c,k}

    Returns:
        DenseMetric: Metric over the flattened m*q vector (class-major)
    """
    m, q, _ = blocks.shape
    matrix = linalg.block_diag(*blocks)
    derivatives = None
    if derivative_blocks is not None:
        derivatives = np.zeros((m * q, m * q, m * q))
        for c in range(m):
            sl = slice(c * q, (c + 1) * q)
            derivatives[sl, sl, sl] = derivative_blocks[c]
    if not np.all(np.isfinite(matrix)):
        raise FactorizationFailure("Metric tensor has non-finite entries")
    return DenseMetric(matrix, derivatives)
