"""Generalized Wishart process model pieces.

Latent values ``u`` are stored as arrays of shape ``(nu, 3, N)``: one GP
block of length ``N`` per ``(i, d)`` pair. Flattening in C order gives the
GP-major layout used in archives.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial import cKDTree

_LOG_2PI = np.log(2 * np.pi)

JITTER_START = 1e-8
JITTER_MAX = 1e-4


class ConditioningError(np.linalg.LinAlgError):
    """Gram matrix stayed non positive definite after jitter escalation."""


def se_kernel(z1, z2, theta):
    """Squared exponential kernel ``exp(-0.5 ||z1 - z2||^2 / theta^2)``.

    Broadcasts over leading dimensions of ``z1`` and ``z2`` (last axis is
    the coordinate axis).
    """
    if not theta > 0:
        raise ValueError(f"length-scale must be positive, got {theta}")
    d = np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float)
    return np.exp(-0.5 * np.sum(d * d, axis=-1) / theta**2)


def cross_kernel(za, zb, theta):
    """Kernel matrix ``k(za_i, zb_j)`` of shape ``(len(za), len(zb))``."""
    za = np.atleast_2d(np.asarray(za, dtype=float))
    zb = np.atleast_2d(np.asarray(zb, dtype=float))
    sq = (
        np.sum(za**2, axis=1)[:, None]
        + np.sum(zb**2, axis=1)[None, :]
        - 2.0 * za @ zb.T
    )
    return np.exp(-0.5 * np.maximum(sq, 0.0) / theta**2)


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Kernel Gram matrix with its lower Cholesky factor and the jitter used."""

    K: np.ndarray
    chol: np.ndarray
    jitter: float
    theta: float

    @property
    def n(self):
        return self.K.shape[0]

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))

    def solve(self, b):
        return cho_solve((self.chol, True), b, check_finite=False)

    def whiten(self, b):
        """``chol^{-1} b`` (``b`` has the site axis first)."""
        return solve_triangular(self.chol, b, lower=True, check_finite=False)


def gram(sites, theta, jitter=None, max_jitter=JITTER_MAX):
    """Gram matrix of the SE kernel over ``sites`` with escalating jitter.

    The first attempt adds ``jitter`` (default ``1e-8`` times the mean
    diagonal) to the diagonal; on Cholesky failure the jitter grows by 10x
    up to ``max_jitter``.

    Raises
    ------
    ConditioningError
        If even ``max_jitter`` does not make the matrix positive definite.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    K = cross_kernel(sites, sites, theta)
    K = 0.5 * (K + K.T)
    jit = JITTER_START * np.mean(np.diag(K)) if jitter is None else float(jitter)
    while True:
        Kj = K + jit * np.eye(len(K))
        try:
            chol = np.linalg.cholesky(Kj)
        except np.linalg.LinAlgError:
            chol = None
        if chol is not None and np.all(np.isfinite(chol)):
            return GramMatrix(K=Kj, chol=chol, jitter=jit, theta=float(theta))
        if jit >= max_jitter:
            raise ConditioningError(
                f"Gram matrix not positive definite with jitter {jit:g} (theta={theta:g})"
            )
        jit = min(jit * 10.0 if jit > 0 else JITTER_START, max_jitter)


@dataclass
class GwpParams:
    """Degrees of freedom, scale factor ``L``, noise variance and length-scale."""

    nu: int
    L: np.ndarray
    sigma2: float
    theta: float

    def __post_init__(self):
        self.nu = int(self.nu)
        self.L = np.asarray(self.L, dtype=float)
        if self.nu < 3:
            raise ValueError(f"nu must be >= 3, got {self.nu}")
        check_cholesky_factor(self.L)
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not self.theta > 0:
            raise ValueError("theta must be positive")

    @property
    def scale_matrix(self):
        return self.L @ self.L.T


def check_cholesky_factor(L):
    L = np.asarray(L, dtype=float)
    if L.shape != (3, 3):
        raise ValueError(f"L must be 3x3, got {L.shape}")
    if np.any(np.triu(L, 1) != 0):
        raise ValueError("L must be lower triangular")
    if not np.all(np.diag(L) > 0):
        raise ValueError("L must have a strictly positive diagonal")
    return L


TRIL = np.tril_indices(3)


def construct_tensor(u_site, L):
    """Wishart construction ``sum_i L u_i u_i^T L^T`` at one or more sites.

    Parameters
    ----------
    u_site : array_like, shape (..., nu, 3)
        The ``nu`` latent 3-vectors at each site.
    L : array_like, shape (3, 3)

    Returns
    -------
    ndarray, shape (..., 3, 3)
    """
    u = np.asarray(u_site, dtype=float)
    lu = u @ np.asarray(L).T
    return np.einsum("...id,...ie->...de", lu, lu)


def construct_field(u, L):
    """Tensors at all ``N`` sites from latent array ``u`` of shape ``(nu, 3, N)``."""
    return construct_tensor(np.moveaxis(u, -1, 0), L)


def log_likelihood(field_tensors, u, L, sigma2):
    """Unnormalized Gaussian log-likelihood ``-sum ||S_n - D_n||_F^2 / (2 sigma2)``."""
    r = np.asarray(field_tensors) - construct_field(u, L)
    return -0.5 * np.sum(r * r) / sigma2


def log_prior_theta(theta, median, log_sd):
    """Log-normal log density of ``theta`` up to an additive constant."""
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    z = (np.log(theta) - np.log(median)) / log_sd
    return -0.5 * z * z - np.log(theta)


def log_prior_L(L, mean, sd):
    """Independent Gaussians on the six lower-triangular entries of ``L``."""
    L = np.asarray(L, dtype=float)
    z = (L[TRIL] - np.asarray(mean)[TRIL]) / sd
    return float(-0.5 * np.sum(z * z) - 6 * (np.log(sd) + 0.5 * _LOG_2PI))


def log_prior_u(u, g):
    """Zero-mean Gaussian log density of every GP block under covariance ``g.K``.

    Uses the shared Cholesky factor; the block-diagonal covariance over all
    ``3 nu`` blocks is never formed.
    """
    blocks = np.asarray(u, dtype=float).reshape(-1, g.n)
    w = g.whiten(blocks.T)
    nb = blocks.shape[0]
    return float(-0.5 * np.sum(w * w) - nb * (0.5 * g.logdet() + 0.5 * g.n * _LOG_2PI))


def sample_prior_u(g, nu, rng):
    """Draw ``u`` of shape ``(nu, 3, N)`` from the GP prior."""
    z = rng.standard_normal((3 * nu, g.n))
    return (z @ g.chol.T).reshape(nu, 3, g.n)


@dataclass
class Hyperpriors:
    """Constants of the priors on ``theta`` and ``L``."""

    theta_median: float
    theta_log_sd: float
    L_mean: np.ndarray
    L_sd: float

    def to_dict(self):
        return {
            "theta_median": self.theta_median,
            "theta_log_sd": self.theta_log_sd,
            "L_mean": np.asarray(self.L_mean).tolist(),
            "L_sd": self.L_sd,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta_median"], d["theta_log_sd"], np.asarray(d["L_mean"]), d["L_sd"])


def mean_nn_spacing(sites):
    """Mean distance from each site to its nearest distinct neighbour."""
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    if len(sites) < 2:
        return 1.0
    d, _ = cKDTree(sites).query(sites, k=2)
    d = d[:, 1]
    d = d[d > 0]
    return float(d.mean()) if d.size else 1.0


def default_hyperpriors(tensors, sites, nu, theta_log_sd=1.0):
    """Data-derived prior constants.

    ``theta`` gets a log-normal with median twice the mean nearest-neighbour
    spacing. ``L`` entries get Gaussians centred on ``chol(mean(S) / nu)``
    with a common sd of half that factor's Frobenius norm.
    """
    mean = np.mean(np.asarray(tensors), axis=0)
    L0 = np.linalg.cholesky(0.5 * (mean + mean.T) / nu)
    return Hyperpriors(
        theta_median=2.0 * mean_nn_spacing(sites),
        theta_log_sd=float(theta_log_sd),
        L_mean=L0,
        L_sd=0.5 * float(np.linalg.norm(L0)),
    )


SIGMA_FRACTION = 0.005


def default_sigma2(tensors):
    """``(SIGMA_FRACTION * mean Frobenius norm of the data)^2``.

    A tight likelihood: the latent GPs must reproduce the observed tensors
    to about half a percent, which keeps small eigenvalues (and hence the
    Riemannian error) under control.
    """
    t = np.asarray(tensors)
    return float((SIGMA_FRACTION * np.mean(np.sqrt(np.sum(t * t, axis=(-2, -1))))) ** 2)
