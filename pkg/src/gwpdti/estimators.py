"""Scikit-learn style estimators wrapping the interpolation methods.

Every estimator is fitted on a tensor field (a :class:`TensorGrid`, or site
coordinates plus tensors) and predicts tensors at arbitrary target
coordinates::

    est = GWPInterpolator(seed=3).fit(low_grid)
    tensors = est.predict(targets)
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import linear_interpolate, logeuclid_interpolate
from .field import TensorGrid
from .inference import McmcConfig, run_chain
from .predict import interpolate_gwp
from .spd import check_sym, six_to_matrix

__all__ = [
    "GWPInterpolator",
    "LinearInterpolator",
    "LogEuclideanInterpolator",
    "check_sites",
    "check_tensors",
    "grid_from_sites",
    "make_interpolator",
]


def check_sites(sites, name="sites"):
    """Coerce coordinates to a float array of shape ``(N, 3)``.

    Two-column input is padded with a zero ``z`` coordinate.
    """
    sites = np.asarray(sites, dtype=float)
    if sites.ndim == 1:
        sites = sites[None, :]
    if sites.ndim != 2 or sites.shape[1] not in (2, 3):
        raise ValueError(f"{name} must have shape (N, 2) or (N, 3), got {sites.shape}")
    if not np.all(np.isfinite(sites)):
        raise ValueError(f"{name} contain non-finite values")
    if sites.shape[1] == 2:
        sites = np.hstack([sites, np.zeros((len(sites), 1))])
    return sites


def check_tensors(tensors, n=None):
    """Coerce tensors to ``(N, 3, 3)`` symmetric float arrays.

    Accepts full matrices or the six-component form
    ``(dxx, dyy, dzz, dxy, dxz, dyz)``.
    """
    t = np.asarray(tensors, dtype=float)
    if t.ndim == 2 and t.shape[1] == 6:
        t = six_to_matrix(t)
    if t.ndim != 3 or t.shape[1:] != (3, 3):
        raise ValueError(f"tensors must have shape (N, 3, 3) or (N, 6), got {t.shape}")
    if n is not None and len(t) != n:
        raise ValueError(f"got {len(t)} tensors for {n} sites")
    return check_sym(t, "tensors")


def grid_from_sites(sites, tensors, atol=1e-9):
    """Rebuild a :class:`TensorGrid` from scattered samples of a full lattice.

    Returns
    -------
    grid : TensorGrid
    origin : ndarray, shape (3,)
        Coordinates of the lowest corner; grid coordinates are relative to it.

    Raises
    ------
    ValueError
        If the sites do not form a complete regular lattice.
    """
    sites = check_sites(sites)
    tensors = check_tensors(tensors, len(sites))
    origin = sites.min(axis=0)
    rel = sites - origin
    dims, spacing = [], []
    for a in range(3):
        vals = np.unique(np.round(rel[:, a] / atol) * atol)
        if len(vals) == 1:
            dims.append(1)
            spacing.append(1.0)
            continue
        steps = np.diff(vals)
        h = steps.mean()
        if np.max(np.abs(steps - h)) > 1e-6 * h:
            raise ValueError(f"sites are not evenly spaced along axis {a}")
        dims.append(len(vals))
        spacing.append(float(h))
    idx = np.rint(rel / np.asarray(spacing)).astype(int)
    if len(sites) != np.prod(dims):
        raise ValueError(f"{len(sites)} sites do not fill a {tuple(dims)} lattice")
    flat = idx[:, 0] + dims[0] * (idx[:, 1] + dims[1] * idx[:, 2])
    if len(np.unique(flat)) != len(flat):
        raise ValueError("duplicate lattice sites")
    ordered = np.empty_like(tensors)
    ordered[flat] = tensors
    return TensorGrid(tuple(dims), tuple(spacing), ordered), origin


def _training_data(X, y):
    """Sites and tensors from either a grid or ``(sites, tensors)``."""
    if isinstance(X, TensorGrid):
        if y is not None:
            raise ValueError("pass either a TensorGrid or (sites, tensors), not both")
        valid = X.valid
        return X.coordinates()[valid], X.tensors[valid]
    if y is None:
        raise ValueError("tensors (y) are required when X holds coordinates")
    sites = check_sites(X)
    return sites, check_tensors(y, len(sites))


class _GridInterpolator(BaseEstimator):
    """Shared fit logic of the grid-based baselines."""

    _method = None

    def __init__(self, clamp=False):
        self.clamp = clamp

    def fit(self, X, y=None):
        """Store the source lattice.

        Parameters
        ----------
        X : TensorGrid or array_like, shape (N, 2|3)
        y : array_like, shape (N, 3, 3) or (N, 6), optional
            Tensors, when ``X`` holds coordinates of a full lattice.
        """
        if isinstance(X, TensorGrid):
            if y is not None:
                raise ValueError("pass either a TensorGrid or (sites, tensors), not both")
            self.grid_, self.origin_ = X, np.zeros(3)
        else:
            if y is None:
                raise ValueError("tensors (y) are required when X holds coordinates")
            self.grid_, self.origin_ = grid_from_sites(X, y)
        self.n_sites_ = self.grid_.n_sites
        return self

    def predict(self, X):
        """Tensors at target coordinates ``X`` of shape ``(M, 2|3)``."""
        check_is_fitted(self, "grid_")
        targets = check_sites(X, "targets") - self.origin_
        return type(self)._method(self.grid_, targets, clamp=self.clamp)


class LinearInterpolator(_GridInterpolator):
    """Component-wise bi/trilinear interpolation.

    Parameters
    ----------
    clamp : bool, default=False
        Clamp targets outside the grid onto its boundary instead of raising.
    """

    _method = staticmethod(linear_interpolate)


class LogEuclideanInterpolator(_GridInterpolator):
    """Interpolation of matrix logarithms followed by the matrix exponential.

    Parameters
    ----------
    clamp : bool, default=False
        Clamp targets outside the grid onto its boundary instead of raising.
    """

    _method = staticmethod(logeuclid_interpolate)


class GWPInterpolator(BaseEstimator):
    """Generalized Wishart process interpolation fitted by MCMC.

    Parameters
    ----------
    n_iter, burn_in, thin : int
        Chain length, discarded prefix and thinning stride.
    theta_step : float
        Initial random-walk scale for ``log theta``.
    L_step : float
        Initial random-walk scale for ``L``, relative to its prior sd.
    seed : int
    nu : int
        Degrees of freedom (number of latent GP vectors per site).
    sigma2 : float or None
        Likelihood variance in rescaled units (data divided by mean
        ``trace / 3``); ``None`` uses the default.
    theta_log_sd : float
        Log-scale sd of the length-scale prior.
    jitter : float or None
        Initial Gram diagonal jitter.
    adapt : bool
        Tune proposal scales during burn-in.
    mode : {"mean", "sample"}
        Use conditional-mean latents or conditional draws at prediction.

    Attributes
    ----------
    samples_ : PosteriorSamples
    acceptance_ : dict
    """

    def __init__(self, n_iter=2000, burn_in=500, thin=5, theta_step=0.15, L_step=0.1,
                 seed=0, nu=5, sigma2=None, theta_log_sd=1.0, jitter=None, adapt=True,
                 mode="mean"):
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.theta_step = theta_step
        self.L_step = L_step
        self.seed = seed
        self.nu = nu
        self.sigma2 = sigma2
        self.theta_log_sd = theta_log_sd
        self.jitter = jitter
        self.adapt = adapt
        self.mode = mode

    def mcmc_config(self):
        """The :class:`McmcConfig` implied by the current parameters."""
        p = self.get_params()
        p.pop("mode")
        return McmcConfig(**p).validate()

    def fit(self, X, y=None, progress=None):
        """Run the sampler on the training field.

        Parameters
        ----------
        X : TensorGrid or array_like, shape (N, 2|3)
            Invalid (masked) grid sites are skipped.
        y : array_like, shape (N, 3, 3) or (N, 6), optional
        progress : callable, optional
            Called as ``progress(iteration, state, log_posterior)``.
        """
        if self.mode not in ("mean", "sample"):
            raise ValueError(f"unknown mode {self.mode!r}")
        sites, tensors = _training_data(X, y)
        self.samples_ = run_chain(tensors, sites, self.mcmc_config(), progress=progress)
        self.acceptance_ = self.samples_.acceptance
        self.n_sites_ = len(sites)
        return self

    @classmethod
    def from_samples(cls, samples, **params):
        """Wrap an existing posterior archive without refitting."""
        est = cls(**params)
        est.samples_ = samples
        est.acceptance_ = samples.acceptance
        est.n_sites_ = len(samples.sites)
        return est

    def predict(self, X, return_uncertainty=False):
        """Posterior-mean tensors at target coordinates.

        Returns
        -------
        tensors : ndarray, shape (M, 3, 3)
        uncertainty : ndarray, shape (M,)
            Only with ``return_uncertainty``.
        """
        check_is_fitted(self, "samples_")
        pf = interpolate_gwp(self.samples_, check_sites(X, "targets"), mode=self.mode,
                             seed=self.seed)
        if return_uncertainty:
            return pf.mean, pf.uncertainty
        return pf.mean


_METHODS = {
    "gwp": GWPInterpolator,
    "linear": LinearInterpolator,
    "logeuclid": LogEuclideanInterpolator,
}


def make_interpolator(method, **params):
    """Estimator for a method name (``gwp``, ``linear`` or ``logeuclid``)."""
    try:
        cls = _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(_METHODS)}") from None
    return cls(**params)
