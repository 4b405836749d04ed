"""MCMC for the GWP: elliptical slice sampling on latents, MH on theta and L."""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gwp
from .gwp import ConditioningError

log = logging.getLogger(__name__)

ARCHIVE_VERSION = 1

# update ids mixed into the per-step RNG streams
_ESS, _THETA, _L, _INIT = 0, 1, 2, 3


class NumericalError(FloatingPointError):
    """Non-finite values encountered during sampling."""


@dataclass
class McmcConfig:
    """Sampler settings.

    Proposal scales are for ``log theta`` and, for ``L``, a multiple of the
    prior standard deviation of its entries.
    """

    n_iter: int = 2000
    burn_in: int = 500
    thin: int = 5
    theta_step: float = 0.15
    L_step: float = 0.1
    seed: int = 0
    nu: int = 5
    sigma2: float = None
    theta_log_sd: float = 1.0
    jitter: float = None
    ess_per_iter: int = 1
    init: str = "data"
    adapt: bool = True

    def validate(self):
        if self.n_iter < 1 or not 0 <= self.burn_in < self.n_iter:
            raise ValueError(f"need 0 <= burn_in < n_iter, got {self.burn_in}, {self.n_iter}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.theta_step < 0 or self.L_step < 0:
            raise ValueError("proposal scales must be non-negative")
        if self.nu < 3:
            raise ValueError("nu must be >= 3")
        if self.ess_per_iter < 1:
            raise ValueError("ess_per_iter must be >= 1")
        return self

    @property
    def n_samples(self):
        return (self.n_iter - self.burn_in) // self.thin


def step_rng(seed, iteration, update):
    """Independent generator for one (iteration, update) pair of a chain."""
    return np.random.default_rng([int(seed), int(iteration), int(update)])


class GwpModel:
    """Posterior pieces for tensors ``S`` observed at ``sites``.

    All quantities live in the internal (rescaled) units chosen by the
    caller. Subclass and override :meth:`log_likelihood` or
    :meth:`log_prior_u` to run the sampler against a different target (the
    tests use constant factors).
    """

    def __init__(self, tensors, sites, nu, sigma2, hyper, jitter=None):
        self.tensors = np.asarray(tensors, dtype=float)
        self.sites = np.atleast_2d(np.asarray(sites, dtype=float))
        self.nu = int(nu)
        self.sigma2 = float(sigma2)
        self.hyper = hyper
        self.jitter = jitter

    @property
    def n(self):
        return len(self.sites)

    def gram(self, theta):
        return gwp.gram(self.sites, theta, self.jitter)

    def log_likelihood(self, u, L):
        return gwp.log_likelihood(self.tensors, u, L, self.sigma2)

    def log_prior_u(self, u, g):
        return gwp.log_prior_u(u, g)

    def log_prior_theta(self, theta):
        return gwp.log_prior_theta(theta, self.hyper.theta_median, self.hyper.theta_log_sd)

    def log_prior_L(self, L):
        return gwp.log_prior_L(L, self.hyper.L_mean, self.hyper.L_sd)


@dataclass
class ChainState:
    """Current chain position with caches kept coherent by every update."""

    u: np.ndarray
    theta: float
    L: np.ndarray
    gram: gwp.GramMatrix
    loglik: float

    def log_posterior(self, model):
        return (
            self.loglik
            + model.log_prior_u(self.u, self.gram)
            + model.log_prior_theta(self.theta)
            + model.log_prior_L(self.L)
        )

    def check_cache(self, model, tol=1e-9):
        """Recompute cached values from scratch and compare."""
        g = model.gram(self.theta)
        ll = model.log_likelihood(self.u, self.L)
        ok_g = np.allclose(g.chol, self.gram.chol, rtol=tol, atol=tol)
        ok_ll = abs(ll - self.loglik) <= tol * max(1.0, abs(ll))
        return bool(ok_g and ok_ll)


@dataclass
class Diagnostics:
    theta_accepted: int = 0
    theta_proposed: int = 0
    theta_conditioning_rejects: int = 0
    L_accepted: int = 0
    L_proposed: int = 0
    ess_evaluations: int = 0
    ess_updates: int = 0

    def rates(self):
        return {
            "theta": self.theta_accepted / max(self.theta_proposed, 1),
            "L": self.L_accepted / max(self.L_proposed, 1),
            "ess_evals_per_update": self.ess_evaluations / max(self.ess_updates, 1),
            "theta_conditioning_rejects": self.theta_conditioning_rejects,
        }


def _dump(state):
    return (
        f"theta={state.theta!r}, L={state.L.tolist()!r}, "
        f"|u|max={np.max(np.abs(state.u)) if np.all(np.isfinite(state.u)) else 'nan'}"
    )


def ess_update(state, model, rng, diag=None):
    """One elliptical slice sampling move on the latent values.

    The auxiliary draw shares the cached Cholesky factor across all
    ``3 nu`` GP blocks. The step never rejects: it shrinks the angle
    bracket until the proposal lands on the slice.
    """
    aux = gwp.sample_prior_u(state.gram, model.nu, rng)
    threshold = state.loglik + math.log(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = phi - 2.0 * math.pi, phi
    while True:
        proposal = state.u * math.cos(phi) + aux * math.sin(phi)
        ll = model.log_likelihood(proposal, state.L)
        if diag is not None:
            diag.ess_evaluations += 1
        if not math.isfinite(ll):
            raise NumericalError(f"non-finite log-likelihood in ESS step ({_dump(state)})")
        if ll > threshold:
            break
        if phi > 0:
            hi = phi
        elif phi < 0:
            lo = phi
        else:
            raise NumericalError(f"ESS bracket shrank to the current point ({_dump(state)})")
        phi = rng.uniform(lo, hi)
    if diag is not None:
        diag.ess_updates += 1
    return replace(state, u=proposal, loglik=ll)


def mh_update_theta(state, model, rng, step, diag=None):
    """Random-walk Metropolis-Hastings on ``log theta``.

    Targets ``p(u | theta) p(theta)``; the ``theta'/theta`` factor accounts
    for proposing in log space. A proposal whose Gram matrix cannot be
    factorized is rejected and counted.
    """
    if diag is not None:
        diag.theta_proposed += 1
    eps = rng.standard_normal()
    log_u = math.log(rng.uniform())
    if step == 0:
        if diag is not None:
            diag.theta_accepted += 1
        return state
    theta_new = state.theta * math.exp(step * eps)
    try:
        g_new = model.gram(theta_new)
    except ConditioningError:
        if diag is not None:
            diag.theta_conditioning_rejects += 1
        return state
    cur = model.log_prior_u(state.u, state.gram) + model.log_prior_theta(state.theta)
    new = model.log_prior_u(state.u, g_new) + model.log_prior_theta(theta_new)
    log_ratio = new - cur + math.log(theta_new) - math.log(state.theta)
    if log_u < log_ratio:
        if diag is not None:
            diag.theta_accepted += 1
        return replace(state, theta=theta_new, gram=g_new)
    return state


def propose_L(L, rng, off_step, log_diag_step):
    """Gaussian step on off-diagonal entries, log-normal step on the diagonal.

    Returns the proposal and the log proposal correction ``sum log(L'_jj / L_jj)``.
    """
    eps = rng.standard_normal(6)
    new = np.array(L, dtype=float)
    rows, cols = gwp.TRIL
    diag_mask = rows == cols
    new[rows[~diag_mask], cols[~diag_mask]] += off_step * eps[~diag_mask]
    d = np.arange(3)
    new[d, d] = L[d, d] * np.exp(log_diag_step * eps[diag_mask])
    correction = float(np.sum(np.log(new[d, d]) - np.log(np.asarray(L)[d, d])))
    return new, correction


def L_steps(model, scale):
    off = scale * model.hyper.L_sd
    ref = np.maximum(np.abs(np.diag(model.hyper.L_mean)), model.hyper.L_sd)
    return off, off / ref


def mh_update_L(state, model, rng, scale, diag=None):
    """Random-walk Metropolis-Hastings on the free entries of ``L``.

    Targets ``p(S | u, L) p(L)`` with the log-space correction for the
    diagonal entries.
    """
    if diag is not None:
        diag.L_proposed += 1
    off, logd = L_steps(model, scale)
    L_new, corr = propose_L(state.L, rng, off, logd)
    log_u = math.log(rng.uniform())
    if scale == 0:
        if diag is not None:
            diag.L_accepted += 1
        return state
    ll_new = model.log_likelihood(state.u, L_new)
    if not math.isfinite(ll_new):
        raise NumericalError(f"non-finite log-likelihood in L update ({_dump(state)})")
    log_ratio = (
        ll_new + model.log_prior_L(L_new) - state.loglik - model.log_prior_L(state.L) + corr
    )
    if log_u < log_ratio:
        if diag is not None:
            diag.L_accepted += 1
        return replace(state, L=L_new, loglik=ll_new)
    return state


def data_latents(tensors, L, nu, rng):
    """Latents reproducing ``tensors`` exactly: ``u_n = (L^-1 S_n L^-T)^{1/2} Q``.

    ``Q`` is a fixed ``3 x nu`` matrix with orthonormal rows, so the latent
    field is as smooth as the symmetric square root of the data.
    """
    Linv = np.linalg.inv(L)
    m = Linv @ np.asarray(tensors) @ Linv.T
    w, v = np.linalg.eigh(0.5 * (m + np.swapaxes(m, -1, -2)))
    root = (v * np.sqrt(np.maximum(w, 0.0))[:, None, :]) @ np.swapaxes(v, -1, -2)
    q, _ = np.linalg.qr(rng.standard_normal((nu, nu)))
    Q = q[:3]
    # (N, 3, nu) -> (nu, 3, N)
    return np.transpose(root @ Q, (2, 1, 0)).copy()


ADAPT_WINDOW = 50
ADAPT_TARGET = 0.3


def _adapted(step, rate):
    # multiplicative Robbins-Monro style nudge towards the target acceptance
    return step * math.exp(2.0 * (rate - ADAPT_TARGET))


def init_state(model, config):
    """Theta at its prior median and ``L`` at its prior mean.

    ``u`` comes from the GP prior (``init="prior"``) or from
    :func:`data_latents` (``init="data"``).
    """
    rng = step_rng(config.seed, 0, _INIT)
    theta = model.hyper.theta_median
    g = model.gram(theta)
    L = np.array(model.hyper.L_mean, dtype=float)
    if config.init == "data":
        u = data_latents(model.tensors, L, model.nu, rng)
    else:
        u = gwp.sample_prior_u(g, model.nu, rng)
    return ChainState(u=u, theta=theta, L=L, gram=g, loglik=model.log_likelihood(u, L))


def data_checksum(tensors, sites):
    """SHA-256 over the training tensors and coordinates (float64, C order)."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(np.asarray(sites, dtype=np.float64)).tobytes())
    h.update(np.ascontiguousarray(np.asarray(tensors, dtype=np.float64)).tobytes())
    return h.hexdigest()


@dataclass
class PosteriorSamples:
    """Retained post-burn-in states plus run metadata.

    ``L`` is stored in the original tensor units; ``u`` is dimensionless.
    """

    iterations: np.ndarray
    theta: np.ndarray
    L: np.ndarray
    log_posterior: np.ndarray
    u: np.ndarray
    sites: np.ndarray
    checksum: str
    config: dict
    acceptance: dict = field(default_factory=dict)
    trace: np.ndarray = None
    scale: float = 1.0
    hyper: dict = None

    def __len__(self):
        return len(self.theta)

    @property
    def nu(self):
        return self.u.shape[1]


def fit_scale(tensors):
    """Internal unit: mean of ``trace / 3`` over the data."""
    return float(np.mean(np.trace(np.asarray(tensors), axis1=-2, axis2=-1)) / 3.0)


def build_model(tensors, sites, config):
    """Rescaled :class:`GwpModel` and the scale factor used."""
    tensors = np.asarray(tensors, dtype=float)
    c = fit_scale(tensors)
    if not c > 0:
        raise ValueError("mean trace of the data must be positive")
    scaled = tensors / c
    sigma2 = config.sigma2 if config.sigma2 is not None else gwp.default_sigma2(scaled)
    hyper = gwp.default_hyperpriors(scaled, sites, config.nu, config.theta_log_sd)
    return GwpModel(scaled, sites, config.nu, sigma2, hyper, config.jitter), c


def run_chain(tensors, sites, config=None, model=None, scale=None, progress=None):
    """Cycle ESS -> theta -> L and keep thinned post-burn-in states.

    Parameters
    ----------
    tensors : array_like, shape (N, 3, 3)
        Observed tensors at the training sites (original units).
    sites : array_like, shape (N, 3)
    config : McmcConfig
    model : GwpModel, optional
        Overrides the default model built from the data (``scale`` then
        defaults to 1).

    Returns
    -------
    PosteriorSamples
    """
    config = (config or McmcConfig()).validate()
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    tensors = np.asarray(tensors, dtype=float)
    if len(sites) < 2:
        raise ValueError("need at least two training sites")
    if model is None:
        model, scale = build_model(tensors, sites, config)
    elif scale is None:
        scale = 1.0
    state = init_state(model, config)
    diag = Diagnostics()
    keep = []
    trace = np.empty(config.n_iter)
    theta_step, L_step = config.theta_step, config.L_step
    window = [0, 0, 0]
    for it in range(1, config.n_iter + 1):
        for k in range(config.ess_per_iter):
            state = ess_update(state, model, step_rng(config.seed, it, _ESS + 4 * k), diag)
        before = (diag.theta_accepted, diag.L_accepted)
        state = mh_update_theta(state, model, step_rng(config.seed, it, _THETA), theta_step, diag)
        state = mh_update_L(state, model, step_rng(config.seed, it, _L), L_step, diag)
        if config.adapt and it <= config.burn_in:
            window[0] += diag.theta_accepted - before[0]
            window[1] += diag.L_accepted - before[1]
            window[2] += 1
            if window[2] == ADAPT_WINDOW:
                theta_step = _adapted(theta_step, window[0] / ADAPT_WINDOW)
                L_step = _adapted(L_step, window[1] / ADAPT_WINDOW)
                window = [0, 0, 0]
        lp = state.log_posterior(model)
        if not math.isfinite(lp):
            raise NumericalError(f"non-finite log posterior at iteration {it} ({_dump(state)})")
        trace[it - 1] = lp
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            keep.append((it, state.theta, state.L.copy(), lp, state.u.copy()))
        if progress is not None:
            progress(it, state, lp)
    keep = keep[: config.n_samples]
    root = math.sqrt(scale)
    return PosteriorSamples(
        iterations=np.array([k[0] for k in keep], dtype=int),
        theta=np.array([k[1] for k in keep], dtype=float),
        L=np.array([k[2] * root for k in keep], dtype=float).reshape(-1, 3, 3),
        log_posterior=np.array([k[3] for k in keep], dtype=float),
        u=np.array([k[4] for k in keep], dtype=float).reshape(-1, model.nu, 3, model.n),
        sites=sites,
        checksum=data_checksum(tensors, sites),
        config=asdict(config),
        acceptance={**diag.rates(), "theta_step": theta_step, "L_step": L_step},
        trace=trace,
        scale=scale,
        hyper=model.hyper.to_dict(),
    )


def write_archive(samples, path):
    """Line-delimited JSON: a header record, then one record per sample."""
    header = {
        "kind": "gwp-posterior",
        "version": ARCHIVE_VERSION,
        "config": samples.config,
        "checksum": samples.checksum,
        "nu": samples.nu,
        "n_sites": int(samples.u.shape[-1]),
        "sites": samples.sites.tolist(),
        "scale": samples.scale,
        "hyper": samples.hyper,
        "acceptance": samples.acceptance,
        "trace": None if samples.trace is None else samples.trace.tolist(),
    }
    rows = gwp.TRIL
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for k in range(len(samples)):
            rec = {
                "iteration": int(samples.iterations[k]),
                "theta": float(samples.theta[k]),
                "L": samples.L[k][rows].tolist(),
                "log_posterior": float(samples.log_posterior[k]),
                "u": samples.u[k].ravel().tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


class ArchiveError(ValueError):
    """Malformed posterior archive or provenance mismatch."""


def read_archive(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ArchiveError(f"{path}: empty archive")
    try:
        header = json.loads(lines[0])
        if header.get("kind") != "gwp-posterior" or header.get("version") != ARCHIVE_VERSION:
            raise ArchiveError(f"{path}: not a version-{ARCHIVE_VERSION} GWP archive")
        nu, n = int(header["nu"]), int(header["n_sites"])
        recs = [json.loads(line) for line in lines[1:] if line.strip()]
        L = np.zeros((len(recs), 3, 3))
        for k, r in enumerate(recs):
            L[k][gwp.TRIL] = r["L"]
        u = np.array([r["u"] for r in recs], dtype=float).reshape(len(recs), nu, 3, n)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ArchiveError):
            raise
        raise ArchiveError(f"{path}: malformed archive: {exc}") from exc
    trace = header.get("trace")
    return PosteriorSamples(
        iterations=np.array([r["iteration"] for r in recs], dtype=int),
        theta=np.array([r["theta"] for r in recs], dtype=float),
        L=L,
        log_posterior=np.array([r["log_posterior"] for r in recs], dtype=float),
        u=u,
        sites=np.asarray(header["sites"], dtype=float).reshape(n, -1),
        checksum=header["checksum"],
        config=header["config"],
        acceptance=header.get("acceptance", {}),
        trace=None if trace is None else np.asarray(trace, dtype=float),
        scale=float(header.get("scale", 1.0)),
        hyper=header.get("hyper"),
    )
