import numpy as np
import pytest
from scipy import stats

from conftest import batch_se, random_spd
from gwpdti import gwp
from gwpdti.inference import (
    ArchiveError,
    ChainState,
    Diagnostics,
    GwpModel,
    McmcConfig,
    data_checksum,
    data_latents,
    ess_update,
    init_state,
    mh_update_L,
    mh_update_theta,
    read_archive,
    run_chain,
    step_rng,
    write_archive,
)
from gwpdti.predict import interpolate_gwp

SITES = np.array([[0, 0, 0], [1, 0, 0], [0, 1.5, 0], [2, 2, 0]], dtype=float)


class FlatLikelihood(GwpModel):
    def log_likelihood(self, u, L):
        return 0.0


class FlatLatents(FlatLikelihood):
    def log_prior_u(self, u, g):
        return 0.0


def make_model(cls=GwpModel, nu=3, L_mean=None, L_sd=0.5, median=1.5, log_sd=0.6):
    hyper = gwp.Hyperpriors(median, log_sd, np.eye(3) if L_mean is None else L_mean, L_sd)
    tensors = np.tile(np.eye(3), (len(SITES), 1, 1))
    return cls(tensors, SITES, nu, 0.01, hyper)


def start(model, seed=0):
    return init_state(model, McmcConfig(seed=seed, init="prior", nu=model.nu))


def z_ok(samples, want, z=4.0):
    samples = np.asarray(samples)
    return np.abs(samples.mean(axis=0) - want) <= z * batch_se(samples)


def test_ess_preserves_prior_under_flat_likelihood():
    model = make_model(FlatLikelihood)
    state = start(model)
    draws, sq = [], []
    for it in range(10_000):
        state = ess_update(state, model, step_rng(1, it, 0))
        blocks = state.u.reshape(-1, model.n)
        draws.append(blocks)
        sq.append(np.einsum("bi,bj->ij", blocks, blocks) / len(blocks))
    draws = np.array(draws)
    assert np.all(z_ok(draws, 0.0))
    assert np.all(z_ok(np.array(sq), state.gram.K))


def test_ess_counts_and_cache():
    model = make_model()
    state = start(model)
    diag = Diagnostics()
    for it in range(50):
        state = ess_update(state, model, step_rng(2, it, 0), diag)
    assert diag.ess_updates == 50 and diag.ess_evaluations >= 50
    assert state.check_cache(model)


def test_theta_mh_recovers_lognormal_prior():
    model = make_model(FlatLatents, median=1.5, log_sd=0.6)
    state = start(model)
    logs = []
    for it in range(20_000):
        state = mh_update_theta(state, model, step_rng(3, it, 1), 1.0)
        logs.append(np.log(state.theta))
    logs = np.array(logs)
    assert z_ok(logs, np.log(1.5))
    assert z_ok((logs - np.log(1.5)) ** 2, 0.6**2)


def test_L_mh_recovers_gaussian_prior():
    mean = np.array([[1.0, 0, 0], [0.3, 0.8, 0], [-0.2, 0.1, 1.2]])
    sd = 0.5
    model = make_model(FlatLikelihood, L_mean=mean, L_sd=sd)
    state = start(model)
    rows, cols = gwp.TRIL
    draws = []
    for it in range(20_000):
        state = mh_update_L(state, model, step_rng(4, it, 2), 1.0)
        draws.append(state.L[rows, cols])
    draws = np.array(draws)
    off = rows != cols
    m = mean[rows, cols]
    assert np.all(z_ok(draws[:, off], m[off]))
    assert np.all(z_ok((draws[:, off] - m[off]) ** 2, sd**2))
    # positivity truncates the diagonal priors at zero
    diag = ~off
    assert np.all(draws[:, diag] > 0)
    tn = stats.truncnorm(-m[diag] / sd, np.inf, loc=m[diag], scale=sd)
    assert np.all(z_ok(draws[:, diag], tn.mean()))
    assert np.all(z_ok(draws[:, diag] ** 2, tn.var() + tn.mean() ** 2))


def test_zero_steps_leave_state_unchanged():
    model = make_model()
    state = start(model)
    diag = Diagnostics()
    assert mh_update_theta(state, model, step_rng(0, 1, 1), 0.0, diag) is state
    assert mh_update_L(state, model, step_rng(0, 1, 2), 0.0, diag) is state
    assert diag.theta_accepted == diag.L_accepted == 1


def test_log_posterior_combines_terms():
    model = make_model()
    s = start(model)
    want = (gwp.log_likelihood(model.tensors, s.u, s.L, model.sigma2) + gwp.log_prior_u(s.u, s.gram)
            + model.log_prior_theta(s.theta) + model.log_prior_L(s.L))
    assert s.log_posterior(model) == pytest.approx(want)
    assert isinstance(s, ChainState)


def test_data_latents_reproduce_tensors(rng):
    S = random_spd(rng, 7)
    L = np.linalg.cholesky(random_spd(rng))
    u = data_latents(S, L, 5, rng)
    assert u.shape == (5, 3, 7)
    np.testing.assert_allclose(gwp.construct_field(u, L), S, atol=1e-12)


def constant_field(n=5):
    xs = np.arange(n, dtype=float)
    sites = np.stack(np.meshgrid(xs, xs, [0.0], indexing="ij"), -1).reshape(-1, 3)
    D = np.diag([1.5e-3, 0.5e-3, 0.3e-3])
    return np.tile(D, (len(sites), 1, 1)), sites


class TestRunChain:
    def test_sample_count_and_config(self):
        S, sites = constant_field()
        cfg = McmcConfig(n_iter=100, burn_in=50, thin=5, seed=3)
        s = run_chain(S, sites, cfg)
        assert len(s) == cfg.n_samples == 10
        np.testing.assert_array_equal(s.iterations, np.arange(55, 101, 5))
        assert s.u.shape == (10, 5, 3, 25)
        assert len(s.trace) == 100 and np.all(np.isfinite(s.trace))
        assert s.checksum == data_checksum(S, sites)

    def test_deterministic(self):
        S, sites = constant_field(4)
        cfg = McmcConfig(n_iter=40, burn_in=20, thin=2, seed=9)
        a, b = run_chain(S, sites, cfg), run_chain(S, sites, cfg)
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.theta, b.theta)
        c = run_chain(S, sites, McmcConfig(n_iter=40, burn_in=20, thin=2, seed=10))
        assert not np.array_equal(a.u, c.u)

    def test_cache_coherent_along_chain(self):
        S, sites = constant_field(4)
        cfg = McmcConfig(n_iter=30, burn_in=10, thin=1, seed=1)
        checks = []
        run_chain(S, sites, cfg, progress=lambda it, st, lp: checks.append(st.theta > 0))
        assert len(checks) == 30 and all(checks)

    def test_constant_field_self_consistency(self):
        S, sites = constant_field()
        s = run_chain(S, sites, McmcConfig(n_iter=300, burn_in=150, thin=5, seed=0))
        pred = interpolate_gwp(s, sites).mean
        rel = np.linalg.norm(pred - S, axis=(1, 2)) / np.linalg.norm(S[0])
        assert rel.max() <= 0.05

    def test_config_validation(self):
        for bad in [dict(burn_in=10, n_iter=10), dict(thin=0), dict(nu=2), dict(theta_step=-1)]:
            with pytest.raises(ValueError):
                McmcConfig(**bad).validate()
        with pytest.raises(ValueError):
            run_chain(np.eye(3)[None], np.zeros((1, 3)))


class TestArchive:
    def test_round_trip(self, tmp_path):
        S, sites = constant_field(4)
        s = run_chain(S, sites, McmcConfig(n_iter=20, burn_in=10, thin=2, seed=2))
        p = tmp_path / "post.jsonl"
        write_archive(s, p)
        back = read_archive(p)
        for name in ["iterations", "theta", "L", "log_posterior", "u", "sites", "trace"]:
            np.testing.assert_array_equal(getattr(back, name), getattr(s, name))
        assert back.checksum == s.checksum and back.scale == s.scale
        assert back.config == s.config

    def test_errors(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text("")
        with pytest.raises(ArchiveError, match="empty"):
            read_archive(p)
        p.write_text('{"kind": "other", "version": 1}\n')
        with pytest.raises(ArchiveError):
            read_archive(p)
        p.write_text('{"kind": "gwp-posterior", "version": 1, "nu": 5}\n')
        with pytest.raises(ArchiveError, match="malformed"):
            read_archive(p)
