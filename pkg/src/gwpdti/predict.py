"""GP-conditional prediction of latent values and tensor reconstruction."""

from dataclasses import dataclass

import numpy as np

from . import gwp
from .inference import ArchiveError, data_checksum


class ProvenanceError(ArchiveError):
    """Posterior archive was fitted to different data than supplied."""


def gp_conditional(u_block, g, kstar):
    """Conditional mean and variance of one GP block at one target.

    Parameters
    ----------
    u_block : array_like, shape (N,)
    g : GramMatrix
    kstar : array_like, shape (N,)
        Kernel values between the target and the training sites.

    Returns
    -------
    mean, variance : float
        ``k*^T K^{-1} u`` and ``1 - k*^T K^{-1} k*`` clamped to ``[0, 1]``.
    """
    kstar = np.asarray(kstar, dtype=float)
    mean = float(kstar @ g.solve(np.asarray(u_block, dtype=float)))
    w = g.whiten(kstar)
    var = float(np.clip(1.0 - w @ w, 0.0, 1.0))
    return mean, var


def conditional_latents(u, g, kstar):
    """Vectorized :func:`gp_conditional` over all blocks and targets.

    Parameters
    ----------
    u : ndarray, shape (nu, 3, N)
    g : GramMatrix
    kstar : ndarray, shape (M, N)

    Returns
    -------
    mean : ndarray, shape (M, nu, 3)
    var : ndarray, shape (M,)
        Shared by every block (same kernel), clamped to ``[0, 1]``.
    var_raw : ndarray, shape (M,)
        Before clamping.
    """
    nu = u.shape[0]
    alpha = g.solve(u.reshape(-1, g.n).T)
    mean = (kstar @ alpha).reshape(-1, nu, 3)
    w = g.whiten(kstar.T)
    var_raw = 1.0 - np.sum(w * w, axis=0)
    return mean, np.clip(var_raw, 0.0, 1.0), var_raw


def reconstruct_at(u, L, g, sites, targets, mode="mean", rng=None):
    """Tensors at ``targets`` for one posterior sample.

    ``mode="mean"`` uses the conditional mean latents; ``mode="sample"``
    draws them from the per-site conditional Gaussian (needs ``rng``).
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    kstar = gwp.cross_kernel(targets, sites, g.theta)
    mean, var, _ = conditional_latents(u, g, kstar)
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling mode needs a random generator")
        mean = mean + np.sqrt(var)[:, None, None] * rng.standard_normal(mean.shape)
    elif mode != "mean":
        raise ValueError(f"unknown mode {mode!r}")
    return gwp.construct_tensor(mean, L)


@dataclass
class PredictedField:
    """Posterior-mean tensors at the targets plus per-site uncertainty.

    ``uncertainty`` is the trace of the across-sample covariance of the six
    tensor components (0 for a single sample).
    """

    targets: np.ndarray
    mean: np.ndarray
    uncertainty: np.ndarray
    per_sample: np.ndarray = None


def check_provenance(samples, tensors, sites):
    if samples.checksum != data_checksum(tensors, sites):
        raise ProvenanceError("posterior archive was not fitted to the supplied training data")


def interpolate_gwp(samples, targets, tensors=None, sites=None, mode="mean", seed=0,
                    keep_samples=False):
    """Average per-sample reconstructions over a posterior archive.

    Parameters
    ----------
    samples : PosteriorSamples
    targets : array_like, shape (M, 3)
    tensors, sites : array_like, optional
        Training data; when given, the archive checksum must match.
    mode : {"mean", "sample"}
    seed : int
        Seeds the conditional draws in sampling mode.

    Returns
    -------
    PredictedField
    """
    if len(samples) == 0:
        raise ValueError("posterior archive holds no samples")
    if tensors is not None:
        check_provenance(samples, tensors, samples.sites if sites is None else sites)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    sites = samples.sites
    total = np.zeros((len(targets), 3, 3))
    sq = np.zeros((len(targets), 3, 3))
    per = [] if keep_samples else None
    cache = {}
    for k in range(len(samples)):
        theta = float(samples.theta[k])
        g = cache.get(theta)
        if g is None:
            jitter = samples.config.get("jitter") if samples.config else None
            g = cache[theta] = gwp.gram(sites, theta, jitter)
        rng = np.random.default_rng([int(seed), k]) if mode == "sample" else None
        d = reconstruct_at(samples.u[k], samples.L[k], g, sites, targets, mode, rng)
        total += d
        sq += d * d
        if per is not None:
            per.append(d)
    n = len(samples)
    mean = total / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    # six unique components: off-diagonals appear twice in the full trace
    unc = np.trace(var, axis1=-2, axis2=-1) + var[:, 0, 1] + var[:, 0, 2] + var[:, 1, 2]
    return PredictedField(
        targets=targets,
        mean=mean,
        uncertainty=unc,
        per_sample=None if per is None else np.stack(per),
    )
