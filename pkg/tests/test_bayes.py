"""Calibration tests: sensor read-out, likelihoods, conjugate full
conditionals against hand-computed posteriors, the sampler on a
linear-Gaussian problem with a known answer, convergence diagnostics,
predictive bands, and the posterior file format."""

import numpy as np
import pytest

from wavecast import bayes, galerkin, sensors, swe
from wavecast.errors import DomainError, NumericalError, StructuralError
from wavecast.scenarios import Scenario, scenario_from_series


def zero_ops(k):
    return galerkin.RomOperators(c=np.zeros(k), l=np.zeros((k, k)),
                                 q=np.zeros((k, k, k)))


def linear_forecaster(k=2, n_sensors=3, n_steps=20, seed=0):
    """Read-out of a frozen trajectory a(t) = b0: a linear-Gaussian model."""
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((n_sensors, k))
    sb = bayes.SensorBasis(phi=phi, mean_eta=np.zeros(n_sensors),
                           sensor_ids=tuple(f"s{i:03d}"
                                            for i in range(n_sensors)))
    return bayes.SensorForecaster(zero_ops(k), sb, dt=1.0, n_steps=n_steps)


def simple_priors(k=2, eps_scale=4e-4):
    return bayes.Priors(a0=np.zeros(k), sigma0=np.eye(k), psi=np.eye(k),
                        nu=float(k + 2), eps_shape=2.0, eps_scale=eps_scale)


def synthetic_scenarios(fc, n_scen=4, noise_sd=0.02, seed=1):
    rng = np.random.default_rng(seed)
    k = fc.ops.rank
    truths = 0.5 * rng.standard_normal((n_scen, k))
    eta, ok = fc.eta_batch(truths)
    assert ok.all()
    scen = []
    for i in range(n_scen):
        vals = eta[i] + noise_sd * rng.standard_normal(eta[i].shape)
        scen.append(scenario_from_series(f"m{i:02d}", fc.times, vals,
                                         fc.sensor_basis.sensor_ids))
    return scen, truths


# ---------------------------------------------------------------------------
# forecaster
# ---------------------------------------------------------------------------

class TestSensorForecaster:
    def test_matches_single_integration(self, ref_prescaled, ref_trunc,
                                        ref_grid, ref_config):
        cells = [(10, 20), (40, 12)]
        ss = sensors.SensorSet(tuple(
            sensors.Sensor(sid=f"s{k}", lon=0.0, lat=0.0, i=i, j=j)
            for k, (i, j) in enumerate(cells)))
        sb = bayes.build_sensor_basis(ref_trunc, ref_grid, ss)
        fc = bayes.SensorForecaster(ref_prescaled, sb,
                                    dt=ref_config.cadence, n_steps=30)
        b0s = np.stack([ref_trunc.coeffs[0], 1.1 * ref_trunc.coeffs[0]])
        coeffs, ok = fc.coeff_batch(b0s)
        assert ok.all()
        for r in range(2):
            single = galerkin.integrate(ref_prescaled, b0s[r],
                                        ref_config.cadence, 30)
            assert np.allclose(coeffs[r], single.values,
                               rtol=1e-12, atol=1e-12)

    def test_eta_batch_is_height_readout(self, ref_prescaled, ref_trunc,
                                         ref_grid, ref_config):
        cells = [(10, 20)]
        ss = sensors.SensorSet((sensors.Sensor(sid="s0", lon=0.0, lat=0.0,
                                               i=10, j=20),))
        sb = bayes.build_sensor_basis(ref_trunc, ref_grid, ss)
        fc = bayes.SensorForecaster(ref_prescaled, sb,
                                    dt=ref_config.cadence, n_steps=10)
        b0 = ref_trunc.coeffs[0]
        eta, ok = fc.eta_batch(b0[None, :])
        traj = galerkin.integrate(ref_prescaled, b0, ref_config.cadence, 10)
        rows = ss.h_rows(ref_grid)
        h_rec = galerkin.reconstruct(ref_trunc, traj, rows=rows)
        expect = h_rec + ref_grid.z_b[10, 20]  # surface = h + z_b
        assert np.allclose(eta[0], expect, atol=1e-10)

    def test_divergent_rows_flagged_and_zeroed(self):
        k = 1
        ops = galerkin.RomOperators(c=np.zeros(1), l=np.zeros((1, 1)),
                                    q=np.ones((1, 1, 1)))
        sb = bayes.SensorBasis(phi=np.ones((1, 1)), mean_eta=np.zeros(1),
                               sensor_ids=("s0",))
        fc = bayes.SensorForecaster(ops, sb, dt=0.1, n_steps=50, blowup=1e3)
        eta, ok = fc.eta_batch(np.array([[0.01], [5.0]]))
        assert ok[0] and not ok[1]
        assert np.all(eta[1] == 0.0)
        assert np.all(np.isfinite(eta[0]))

    def test_rank_mismatch(self, ref_prescaled):
        sb = bayes.SensorBasis(phi=np.zeros((2, 3)), mean_eta=np.zeros(2),
                               sensor_ids=("a", "b"))
        with pytest.raises(StructuralError):
            bayes.SensorForecaster(ref_prescaled, sb, dt=1.0, n_steps=5)

    def test_build_sensor_basis_rows(self, ref_trunc, ref_grid):
        ss = sensors.SensorSet((sensors.Sensor(sid="s0", lon=0.0, lat=0.0,
                                               i=7, j=9),))
        sb = bayes.build_sensor_basis(ref_trunc, ref_grid, ss)
        row = 7 * ref_grid.nx + 9
        assert np.array_equal(sb.phi[0], ref_trunc.modes[row,
                                                         :ref_trunc.rank])
        assert sb.mean_eta[0] == pytest.approx(
            ref_trunc.mean[row] + ref_grid.z_b[7, 9])


# ---------------------------------------------------------------------------
# likelihood helpers
# ---------------------------------------------------------------------------

class TestLikelihood:
    def test_residual_ss_hand_computed(self):
        scen = Scenario(sid="x", times=np.arange(2.0),
                        values=np.array([[1.0, np.nan], [3.0, 2.0]]),
                        mask=np.array([[True, False], [True, True]]),
                        sensor_ids=("a", "b"))
        model = np.array([[0.0, 9.0], [1.0, 1.0]])
        ss = bayes.residual_ss(scen, model)
        assert np.allclose(ss, [1.0 + 4.0, 1.0])

    def test_loglik_matches_scipy(self):
        from scipy.stats import norm
        rng = np.random.default_rng(2)
        resid = rng.standard_normal((6, 2)) * 0.3
        eps = np.array([0.09, 0.04])
        ss = np.sum(resid**2, axis=0)
        n_obs = np.array([6.0, 6.0])
        got = bayes.loglik_from_ss(ss, n_obs, eps)
        expect = sum(norm.logpdf(resid[:, s], scale=np.sqrt(eps[s])).sum()
                     for s in range(2))
        assert got == pytest.approx(expect, rel=1e-12)

    def test_divergent_b0_gives_minus_inf(self):
        fc = linear_forecaster()
        ops = galerkin.RomOperators(c=np.zeros(2), l=np.zeros((2, 2)),
                                    q=np.ones((2, 2, 2)))
        fc2 = bayes.SensorForecaster(ops, fc.sensor_basis, dt=0.5,
                                     n_steps=40, blowup=10.0)
        scen, _ = synthetic_scenarios(fc, n_scen=1)
        ll = bayes.log_likelihood(np.array([50.0, 50.0]), scen[0], fc2,
                                  np.full(3, 1e-4))
        assert ll == -np.inf


# ---------------------------------------------------------------------------
# conjugate conditionals
# ---------------------------------------------------------------------------

class TestConditionals:
    def test_mu0_no_data_returns_prior(self):
        pr = simple_priors()
        mean, cov = bayes.mu0_conditional(np.zeros((0, 2)), np.eye(2), pr)
        assert np.array_equal(mean, pr.a0)
        assert np.array_equal(cov, pr.sigma0)

    def test_mu0_scalar_hand_computed(self):
        # k=1: prior N(a0, s0), n obs with population var s ->
        # posterior precision 1/s0 + n/s, mean weighted accordingly
        pr = bayes.Priors(a0=np.array([2.0]), sigma0=np.array([[4.0]]),
                          psi=np.array([[1.0]]), nu=3.0)
        b0s = np.array([[1.0], [3.0], [5.0]])
        mean, cov = bayes.mu0_conditional(b0s, np.array([[2.0]]), pr)
        prec = 1.0 / 4.0 + 3.0 / 2.0
        expect_mean = (2.0 / 4.0 + (1.0 + 3.0 + 5.0) / 2.0) / prec
        assert cov[0, 0] == pytest.approx(1.0 / prec)
        assert mean[0] == pytest.approx(expect_mean)

    def test_mu0_gibbs_moments(self):
        # many draws from the conditional match its analytic mean/cov
        pr = simple_priors()
        rng = np.random.default_rng(3)
        b0s = rng.standard_normal((5, 2))
        sigma = np.array([[0.5, 0.1], [0.1, 0.3]])
        mean, cov = bayes.mu0_conditional(b0s, sigma, pr)
        draws = np.stack([bayes.gibbs_update_mu0(b0s, sigma, pr, rng)
                          for _ in range(20000)])
        assert np.allclose(draws.mean(axis=0), mean, atol=0.02)
        assert np.allclose(np.cov(draws.T), cov, atol=0.02)

    def test_sigma_conditional_hand_computed(self):
        pr = simple_priors()
        b0s = np.array([[1.0, 0.0], [0.0, 1.0]])
        mu0 = np.zeros(2)
        df, scale = bayes.sigma_conditional(b0s, mu0, pr)
        assert df == pr.nu + 2
        assert np.allclose(scale, np.eye(2) + b0s.T @ b0s)

    def test_sigma_gibbs_mean(self):
        # inverse-Wishart mean = scale / (df - k - 1)
        pr = simple_priors()
        rng = np.random.default_rng(4)
        b0s = rng.standard_normal((10, 2))
        mu0 = b0s.mean(axis=0)
        df, scale = bayes.sigma_conditional(b0s, mu0, pr)
        draws = np.stack([bayes.gibbs_update_sigma(b0s, mu0, pr, rng)
                          for _ in range(20000)])
        expect = scale / (df - 2 - 1)
        assert np.allclose(draws.mean(axis=0), expect, rtol=0.05)

    def test_sigma_eps_conditional_hand_computed(self):
        pr = simple_priors(eps_scale=0.01)
        shape, scale = bayes.sigma_eps_conditional(
            np.array([2.0, 0.0]), np.array([8.0, 0.0]), pr)
        assert np.allclose(shape, [2.0 + 4.0, 2.0])
        assert np.allclose(scale, [0.01 + 1.0, 0.01])

    def test_sigma_eps_gibbs_mean(self):
        # inverse-gamma mean = scale / (shape - 1)
        pr = simple_priors(eps_scale=0.01)
        rng = np.random.default_rng(5)
        ss, n_obs = np.array([3.0]), np.array([40.0])
        draws = np.stack([bayes.gibbs_update_sigma_eps(ss, n_obs, pr, rng)
                          for _ in range(20000)])
        shape, scale = bayes.sigma_eps_conditional(ss, n_obs, pr)
        assert draws.mean() == pytest.approx(
            float(scale[0] / (shape[0] - 1.0)), rel=0.03)

    def test_priors_validation(self):
        with pytest.raises(DomainError):
            bayes.Priors(a0=np.zeros(3), sigma0=np.eye(3), psi=np.eye(3),
                         nu=1.0)
        with pytest.raises(StructuralError):
            bayes.Priors(a0=np.zeros(3), sigma0=np.eye(2), psi=np.eye(3),
                         nu=5.0)

    def test_default_priors_structure(self, ref_trunc):
        pr = bayes.default_priors(ref_trunc)
        k = ref_trunc.rank
        assert pr.a0.shape == (k,)
        assert np.array_equal(pr.a0, ref_trunc.coeffs[0, :k])
        assert pr.nu == k + 2
        assert np.all(np.diag(pr.sigma0) > 0)
        assert np.count_nonzero(pr.sigma0 - np.diag(np.diag(pr.sigma0))) == 0


# ---------------------------------------------------------------------------
# starting points
# ---------------------------------------------------------------------------

class TestLeastSquaresInit:
    def test_recovers_linear_truth(self):
        fc = linear_forecaster()
        scen, truths = synthetic_scenarios(fc, noise_sd=0.001)
        pr = simple_priors()
        b0 = bayes.least_squares_init(scen, fc, pr)
        assert np.max(np.abs(b0 - truths)) < 0.01

    def test_unobserved_scenario_stays_at_prior_mean(self):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=2)
        empty = Scenario(sid="none", times=scen[0].times,
                         values=np.full_like(scen[0].values, np.nan),
                         mask=np.zeros_like(scen[0].mask),
                         sensor_ids=scen[0].sensor_ids)
        pr = simple_priors()
        b0 = bayes.least_squares_init([scen[0], empty], fc, pr)
        assert np.array_equal(b0[1], pr.a0)

    def test_returns_laplace_covariance(self):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=2)
        pr = simple_priors()
        b0, cov = bayes.least_squares_init(scen, fc, pr, return_cov=True)
        assert cov.shape == (2, 2, 2)
        for i in range(2):
            np.linalg.cholesky(cov[i])  # must be SPD


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------

def quick_config(**kw):
    base = dict(chains=2, iters=700, warmup=500, seed=0, adapt_start=50)
    base.update(kw)
    return bayes.McmcConfig(**base)


class TestMcmc:
    def test_linear_gaussian_recovery(self):
        # exact conjugate structure: the sampler must land each scenario's
        # b0 near its generating value (posterior sd ~ noise/sqrt(n_obs))
        fc = linear_forecaster()
        scen, truths = synthetic_scenarios(fc, noise_sd=0.02)
        pr = simple_priors(eps_scale=4e-4)
        samples = bayes.run_mcmc(scen, fc, pr, quick_config())
        post_mean = samples.b0.mean(axis=(0, 1))
        assert np.max(np.abs(post_mean - truths)) < 0.05
        # noise variance recovered (truth 4e-4)
        eps_mean = samples.sigma_eps.mean()
        assert 1e-4 < eps_mean < 1.6e-3

    def test_deterministic_given_seed(self):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=2)
        pr = simple_priors()
        cfg = quick_config(iters=150, warmup=100)
        a = bayes.run_mcmc(scen, fc, pr, cfg)
        b = bayes.run_mcmc(scen, fc, pr, cfg)
        assert np.array_equal(a.b0, b.b0)
        assert np.array_equal(a.mu0, b.mu0)
        assert np.array_equal(a.sigma, b.sigma)
        assert np.array_equal(a.sigma_eps, b.sigma_eps)

    def test_different_seeds_differ(self):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=2)
        pr = simple_priors()
        a = bayes.run_mcmc(scen, fc, pr, quick_config(iters=150, warmup=100,
                                                      seed=0))
        b = bayes.run_mcmc(scen, fc, pr, quick_config(iters=150, warmup=100,
                                                      seed=1))
        assert not np.array_equal(a.b0, b.b0)

    def test_prior_recovery_without_observations(self):
        # fully masked data: b0 marginals must revert to the hierarchical
        # prior (mean a0, spread governed by sigma0/psi)
        fc = linear_forecaster()
        times = fc.times
        empty = [Scenario(sid=f"e{i}", times=times,
                          values=np.full((len(times), 3), np.nan),
                          mask=np.zeros((len(times), 3), bool),
                          sensor_ids=fc.sensor_basis.sensor_ids)
                 for i in range(3)]
        pr = simple_priors()
        samples = bayes.run_mcmc(empty, fc, pr,
                                 quick_config(iters=2500, warmup=500))
        mu_mean = samples.mu0.mean(axis=(0, 1))
        assert np.max(np.abs(mu_mean - pr.a0)) < 0.25
        eps_mean = samples.sigma_eps.mean()
        prior_mean = pr.eps_scale / (pr.eps_shape - 1.0)
        assert eps_mean == pytest.approx(prior_mean, rel=0.5)

    def test_shapes_and_metadata(self):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=3)
        pr = simple_priors()
        cfg = quick_config(iters=120, warmup=100)
        s = bayes.run_mcmc(scen, fc, pr, cfg)
        assert s.b0.shape == (2, 20, 3, 2)
        assert s.mu0.shape == (2, 20, 2)
        assert s.sigma.shape == (2, 20, 2, 2)
        assert s.sigma_eps.shape == (2, 20, 3)
        assert s.accept_rate.shape == (2, 3)
        assert s.sensor_ids == fc.sensor_basis.sensor_ids
        assert len(s.seeds) == 2 and len(set(s.seeds)) == 2

    def test_empty_scenario_list(self):
        fc = linear_forecaster()
        with pytest.raises(DomainError):
            bayes.run_mcmc([], fc, simple_priors(), quick_config())

    def test_sensor_id_mismatch(self):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=1)
        bad = Scenario(sid="bad", times=scen[0].times,
                       values=scen[0].values, mask=scen[0].mask,
                       sensor_ids=("x", "y", "z"))
        with pytest.raises(StructuralError):
            bayes.run_mcmc([bad], fc, simple_priors(), quick_config())

    def test_warmup_must_be_shorter(self):
        with pytest.raises(DomainError):
            bayes.McmcConfig(iters=100, warmup=100)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

class TestPsrf:
    def test_identical_chains_give_one(self):
        rng = np.random.default_rng(0)
        row = rng.standard_normal(50)
        assert bayes.psrf(np.stack([row, row])) == pytest.approx(1.0)

    def test_hand_computed(self):
        chains = np.array([[0.0, 2.0, 0.0, 2.0] * 5,
                           [1.0, 3.0, 1.0, 3.0] * 5])
        w = np.mean([np.var(c, ddof=1) for c in chains])
        b_over_n = np.var([c.mean() for c in chains], ddof=1)
        expect = np.sqrt((w + b_over_n) / w)
        assert bayes.psrf(chains) == pytest.approx(expect, rel=1e-12)

    def test_separated_chains_large(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal(200)
        b = rng.standard_normal(200) + 10.0
        assert bayes.psrf(np.stack([a, b])) > 3.0

    def test_mixed_chains_near_one(self):
        rng = np.random.default_rng(2)
        chains = rng.standard_normal((4, 2000))
        assert bayes.psrf(chains) < 1.05

    def test_too_few_chains_or_draws(self):
        with pytest.raises(DomainError):
            bayes.psrf(np.zeros((1, 100)))
        with pytest.raises(DomainError):
            bayes.psrf(np.zeros((2, 5)))

    def test_gelman_rubin_blocks(self):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=2)
        s = bayes.run_mcmc(scen, fc, simple_priors(),
                           quick_config(iters=150, warmup=100))
        rhats = bayes.gelman_rubin(s)
        assert rhats["mu0"].shape == (2,)
        assert rhats["b0"].shape == (2, 2)
        assert rhats["sigma_diag"].shape == (2,)
        assert rhats["sigma_eps"].shape == (3,)
        assert bayes.max_rhat(rhats) >= 1.0


# ---------------------------------------------------------------------------
# predictive bands
# ---------------------------------------------------------------------------

def synthetic_posterior(k=2, n_sensors=3, chains=2, draws=200, seed=0):
    rng = np.random.default_rng(seed)
    mu0 = 0.05 * rng.standard_normal((chains, draws, k)) + 0.3
    sigma = np.tile(0.01 * np.eye(k), (chains, draws, 1, 1))
    eps = np.full((chains, draws, n_sensors), 1e-4)
    b0 = np.zeros((chains, draws, 1, k))
    return bayes.PosteriorSamples(
        b0=b0, mu0=mu0, sigma=sigma, sigma_eps=eps,
        accept_rate=np.full((chains, 1), 0.3), seeds=(1, 2),
        warmup=10, iters=10 + draws,
        sensor_ids=tuple(f"s{i:03d}" for i in range(n_sensors)))


class TestPosteriorPredictive:
    def test_band_ordering_and_nesting(self):
        fc = linear_forecaster()
        post = synthetic_posterior()
        f = bayes.posterior_predictive(post, fc, level=0.9, seed=3)
        assert np.all(f.ci_lo <= f.ci_hi)
        assert np.all(f.pi_lo <= f.pi_hi)
        # adding observation noise widens the bands on average
        assert np.mean(f.pi_hi - f.pi_lo) >= np.mean(f.ci_hi - f.ci_lo)
        assert f.excluded_fraction == 0.0
        assert f.mean.shape == (fc.n_steps + 1, 3)

    def test_mean_matches_analytic(self):
        fc = linear_forecaster()
        post = synthetic_posterior(draws=2000)
        f = bayes.posterior_predictive(post, fc, level=0.9, seed=4)
        # eta mean = phi @ E[b0] with E[b0] = E[mu0] = 0.3 per coordinate
        expect = fc.sensor_basis.phi @ np.full(2, 0.3)
        assert np.allclose(f.mean[0], expect, atol=0.02)

    def test_deterministic_given_seed(self):
        fc = linear_forecaster()
        post = synthetic_posterior()
        a = bayes.posterior_predictive(post, fc, seed=7)
        b = bayes.posterior_predictive(post, fc, seed=7)
        assert np.array_equal(a.pi_lo, b.pi_lo)

    def test_bad_level(self):
        fc = linear_forecaster()
        post = synthetic_posterior()
        with pytest.raises(DomainError):
            bayes.posterior_predictive(post, fc, level=1.5)

    def test_divergent_draws_counted(self):
        ops = galerkin.RomOperators(c=np.zeros(2), l=np.zeros((2, 2)),
                                    q=np.ones((2, 2, 2)))
        sb = linear_forecaster().sensor_basis
        fc = bayes.SensorForecaster(ops, sb, dt=0.2, n_steps=10, blowup=5.0)
        post = synthetic_posterior(draws=50)
        # da/dt per entry is (a_1 + a_2)^2, so draws started near 0.05
        # survive the short horizon while those at 4.0 blow up fast
        mu0 = post.mu0.copy() - 0.25  # surviving draws near 0.05
        mu0[:, ::2, :] = 4.0
        post = bayes.PosteriorSamples(
            b0=post.b0, mu0=mu0, sigma=post.sigma,
            sigma_eps=post.sigma_eps, accept_rate=post.accept_rate,
            seeds=post.seeds, warmup=post.warmup, iters=post.iters,
            sensor_ids=post.sensor_ids)
        f = bayes.posterior_predictive(post, fc, seed=1)
        assert 0.0 < f.excluded_fraction < 1.0


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

class TestPosteriorFile:
    def test_roundtrip(self, tmp_path):
        fc = linear_forecaster()
        scen, _ = synthetic_scenarios(fc, n_scen=2)
        s = bayes.run_mcmc(scen, fc, simple_priors(),
                           quick_config(iters=120, warmup=100))
        path = tmp_path / "post.bin"
        bayes.save_posterior(s, path)
        back = bayes.load_posterior(path)
        assert np.array_equal(back.b0, s.b0)
        assert np.array_equal(back.mu0, s.mu0)
        assert np.array_equal(back.sigma, s.sigma)
        assert np.array_equal(back.sigma_eps, s.sigma_eps)
        assert np.array_equal(back.accept_rate, s.accept_rate)
        assert back.seeds == s.seeds
        assert back.sensor_ids == s.sensor_ids
        assert (back.warmup, back.iters) == (s.warmup, s.iters)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"WRONG!!" + b"\x00" * 32)
        with pytest.raises(StructuralError):
            bayes.load_posterior(path)
