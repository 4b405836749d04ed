import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import random_spd
from gwpdti import GWPInterpolator, LinearInterpolator, LogEuclideanInterpolator, TensorGrid
from gwpdti.estimators import check_sites, check_tensors, grid_from_sites, make_interpolator
from gwpdti.spd import matrix_to_six


@pytest.fixture
def grid(rng):
    return TensorGrid((4, 3, 1), (2.0, 1.0, 1.0), random_spd(rng, 12, 1e-3))


def test_check_sites():
    np.testing.assert_array_equal(check_sites([[1, 2]]), [[1, 2, 0]])
    np.testing.assert_array_equal(check_sites([1, 2, 3]), [[1, 2, 3]])
    for bad in [[[1, 2, 3, 4]], [[np.nan, 0, 0]]]:
        with pytest.raises(ValueError):
            check_sites(bad)


def test_check_tensors(rng):
    t = random_spd(rng, 3)
    np.testing.assert_allclose(check_tensors(matrix_to_six(t)), t)
    with pytest.raises(ValueError):
        check_tensors(t, n=4)
    with pytest.raises(ValueError):
        check_tensors(np.ones((2, 3, 4)))


def test_grid_from_sites_shuffled(grid, rng):
    p = rng.permutation(grid.n_sites)
    origin = np.array([5.0, -1.0, 0.0])
    back, o = grid_from_sites(grid.coordinates()[p] + origin, grid.tensors[p])
    assert back.dims == grid.dims and back.spacing == grid.spacing
    np.testing.assert_array_equal(o, origin)
    np.testing.assert_array_equal(back.tensors, grid.tensors)


def test_grid_from_sites_rejects_incomplete(grid):
    with pytest.raises(ValueError):
        grid_from_sites(grid.coordinates()[1:], grid.tensors[1:])
    x = grid.coordinates().copy()
    x[x[:, 0] == 6.0, 0] = 7.0
    with pytest.raises(ValueError):
        grid_from_sites(x, grid.tensors)


@pytest.mark.parametrize("cls", [LinearInterpolator, LogEuclideanInterpolator])
def test_baseline_estimators(cls, grid, rng):
    targets = rng.uniform(0, 1, size=(10, 3)) * [6.0, 2.0, 0.0]
    a = cls().fit(grid).predict(targets)
    origin = np.array([10.0, 20.0, 0.0])
    b = cls().fit(grid.coordinates()[:, :2] + origin[:2], matrix_to_six(grid.tensors)).predict(
        targets[:, :2] + origin[:2])
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert cls(clamp=True).fit(grid).predict([[100.0, 0, 0]]).shape == (1, 3, 3)


def test_fit_argument_errors(grid):
    with pytest.raises(ValueError):
        LinearInterpolator().fit(grid, grid.tensors)
    with pytest.raises(ValueError):
        LinearInterpolator().fit(grid.coordinates())
    with pytest.raises(ValueError):
        GWPInterpolator(mode="median").fit(grid)


@pytest.mark.parametrize("est", [LinearInterpolator(), GWPInterpolator()])
def test_not_fitted(est):
    with pytest.raises(NotFittedError):
        est.predict([[0.0, 0, 0]])


def test_sklearn_params():
    est = GWPInterpolator(n_iter=50, burn_in=10, seed=3)
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    assert c.set_params(thin=2).thin == 2
    cfg = est.mcmc_config()
    assert cfg.n_iter == 50 and cfg.seed == 3
    assert clone(LinearInterpolator(clamp=True)).clamp


def test_gwp_estimator(grid):
    est = GWPInterpolator(n_iter=60, burn_in=30, thin=5, seed=1).fit(grid)
    assert len(est.samples_) == 6 and est.n_sites_ == 12
    pred, unc = est.predict(grid.coordinates()[:3], return_uncertainty=True)
    assert pred.shape == (3, 3, 3) and unc.shape == (3,)
    again = GWPInterpolator.from_samples(est.samples_, seed=1)
    np.testing.assert_array_equal(again.predict(grid.coordinates()[:3]), pred)


def test_make_interpolator():
    assert isinstance(make_interpolator("logeuclid", clamp=True), LogEuclideanInterpolator)
    assert make_interpolator("gwp", seed=2).seed == 2
    with pytest.raises(ValueError, match="unknown method"):
        make_interpolator("cubic")
