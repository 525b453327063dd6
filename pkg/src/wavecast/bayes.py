"""Hierarchical Bayesian calibration of ROM initial values to sensor data.

Model: each scenario's sensor record y_i(t) is a masked linear read-out of
the corrected-ROM trajectory started from a scenario-specific initial
coefficient vector b0_i, plus Gaussian noise with per-sensor variances.
The b0_i share a global Normal(mu0, Sigma) population with conjugate
Normal / inverse-Wishart hyperpriors, and the noise variances carry
inverse-gamma priors.  Sampling is adaptive random-walk Metropolis for the
b0_i inside a Gibbs sweep for the remaining parameters.
"""

from __future__ import annotations

import io as _io
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import DomainError, NumericalError, StructuralError
from .galerkin import RomOperators
from .pod import ModalBasis
from .scenarios import Scenario
from .sensors import SensorSet
from .swe import Grid
from .tuning import TunedRom

POST_MAGIC = b"RPPOST1"


# ---------------------------------------------------------------------------
# Sensor-restricted read-out of the ROM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorBasis:
    """Height rows of the modes at the sensor cells, plus the mean surface."""
    phi: np.ndarray       # [n_sensors, k]
    mean_eta: np.ndarray  # [n_sensors]
    sensor_ids: tuple[str, ...]

    @property
    def n_sensors(self) -> int:
        return self.phi.shape[0]

    @property
    def rank(self) -> int:
        return self.phi.shape[1]


def build_sensor_basis(basis: ModalBasis, grid: Grid,
                       sensors: SensorSet) -> SensorBasis:
    rows = sensors.h_rows(grid)
    ij = sensors.cells()
    mean_eta = basis.mean[rows] + grid.z_b[ij[:, 0], ij[:, 1]]
    return SensorBasis(phi=basis.modes[rows, : basis.rank].copy(),
                       mean_eta=mean_eta, sensor_ids=sensors.ids)


class SensorForecaster:
    """Batched RK4 solves of the corrected ROM with sensor read-out.

    Rows whose trajectory leaves the finite range (or exceeds the blowup
    bound) are zeroed and reported as failed rather than raising.
    """

    def __init__(self, ops: RomOperators, sensor_basis: SensorBasis,
                 dt: float, n_steps: int, blowup: float | None = None):
        if sensor_basis.rank != ops.rank:
            raise StructuralError("sensor basis rank does not match operators")
        self.ops = ops
        self.sensor_basis = sensor_basis
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.blowup = blowup
        self.times = self.dt * np.arange(self.n_steps + 1)

    def _rhs(self, a):
        qa = np.tensordot(a, self.ops.q, axes=(1, 0))  # [m, j, out]
        return self.ops.c + a @ self.ops.l + np.einsum("mj,mjk->mk", a, qa)

    def coeff_batch(self, b0s: np.ndarray):
        """(values [m, n_t, k], ok [m]) for a batch of initial vectors."""
        a = np.array(b0s, dtype=float)
        if a.ndim != 2 or a.shape[1] != self.ops.rank:
            raise StructuralError("b0 batch must be [m, k]")
        m = a.shape[0]
        out = np.empty((m, self.n_steps + 1, self.ops.rank))
        out[:, 0] = a
        ok = np.ones(m, dtype=bool)
        dt = self.dt
        for s in range(1, self.n_steps + 1):
            k1 = self._rhs(a)
            k2 = self._rhs(a + 0.5 * dt * k1)
            k3 = self._rhs(a + 0.5 * dt * k2)
            k4 = self._rhs(a + dt * k3)
            a = a + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = ~np.all(np.isfinite(a), axis=1)
            if self.blowup is not None:
                with np.errstate(invalid="ignore"):
                    bad |= np.max(np.abs(a), axis=1) > self.blowup
            if bad.any():
                ok &= ~bad
                a[bad] = 0.0
            out[:, s] = a
        out[~ok] = 0.0
        return out, ok

    def eta_batch(self, b0s: np.ndarray):
        """(eta [m, n_t, n_sensors], ok [m]) surface heights at the sensors."""
        coeffs, ok = self.coeff_batch(b0s)
        eta = coeffs @ self.sensor_basis.phi.T + self.sensor_basis.mean_eta
        return eta, ok


# ---------------------------------------------------------------------------
# Priors, configuration, state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Priors:
    a0: np.ndarray       # prior mean of mu0 (reference initial coefficients)
    sigma0: np.ndarray   # prior covariance of mu0 [k, k]
    psi: np.ndarray      # inverse-Wishart scale [k, k]
    nu: float            # inverse-Wishart degrees of freedom, > k - 1
    eps_shape: float = 2.0   # inverse-gamma shape for sensor variances
    eps_scale: float = 4e-4  # inverse-gamma scale (prior mean ~ scale/(shape-1))

    def __post_init__(self):
        k = self.a0.shape[0]
        if self.sigma0.shape != (k, k) or self.psi.shape != (k, k):
            raise StructuralError("prior covariance shapes inconsistent")
        if self.nu <= k - 1:
            raise DomainError("inverse-Wishart dof must exceed k - 1")


def default_priors(basis: ModalBasis, tau: float = 1.0,
                   psi_scale: float = 1.0, eps_shape: float = 2.0,
                   eps_scale: float = 4e-4) -> Priors:
    """Weakly informative defaults scaled to the POD coefficient magnitudes."""
    k = basis.rank
    a0 = basis.coeffs[0, :k].copy()
    scales = (tau * basis.singulars[:k] / np.sqrt(basis.n_t)) ** 2
    sigma0 = np.diag(scales)
    return Priors(a0=a0, sigma0=sigma0, psi=psi_scale * sigma0.copy(),
                  nu=float(k + 2), eps_shape=eps_shape, eps_scale=eps_scale)


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 2
    iters: int = 6000
    warmup: int = 5000
    seed: int = 0
    adapt_start: int = 200     # iterations before covariance adaptation kicks in
    adapt_interval: int = 25
    init_prop_scale: float = 0.1  # initial proposal sd as a fraction of prior sd
    target_accept: float = 0.234  # Robbins-Monro step-scale target
    adapt_rate: float = 0.05
    init: str = "least-squares"   # least-squares | prior
    ind_prob: float = 0.5         # share of linearized-conditional proposals

    def __post_init__(self):
        if self.warmup >= self.iters:
            raise DomainError("warmup must be smaller than the iteration count")


@dataclass(frozen=True)
class PosteriorSamples:
    b0: np.ndarray         # [chains, draws, n_scenarios, k]
    mu0: np.ndarray        # [chains, draws, k]
    sigma: np.ndarray      # [chains, draws, k, k]
    sigma_eps: np.ndarray  # [chains, draws, n_sensors]
    accept_rate: np.ndarray  # [chains, n_scenarios], post-warmup
    seeds: tuple[int, ...]
    warmup: int
    iters: int
    sensor_ids: tuple[str, ...] = ()

    @property
    def n_chains(self) -> int:
        return self.b0.shape[0]

    @property
    def n_draws(self) -> int:
        return self.b0.shape[1]


# ---------------------------------------------------------------------------
# Likelihood helpers
# ---------------------------------------------------------------------------

def residual_ss(scenario: Scenario, eta_model: np.ndarray) -> np.ndarray:
    """Per-sensor sum of squared residuals over observed entries."""
    diff = np.where(scenario.mask, scenario.values - eta_model, 0.0)
    return np.sum(diff * diff, axis=0)


def loglik_from_ss(ss: np.ndarray, n_obs: np.ndarray,
                   sigma_eps: np.ndarray) -> float:
    """Gaussian log-likelihood given per-sensor residual sums."""
    return float(-0.5 * np.sum(n_obs * np.log(2.0 * np.pi * sigma_eps)
                               + ss / sigma_eps))


def log_likelihood(b0: np.ndarray, scenario: Scenario,
                   forecaster: SensorForecaster,
                   sigma_eps: np.ndarray) -> float:
    """Log-density of the observed entries; -inf if the solve diverges."""
    eta, ok = forecaster.eta_batch(b0[None, :])
    if not ok[0]:
        return -np.inf
    ss = residual_ss(scenario, eta[0])
    n_obs = scenario.mask.sum(axis=0)
    return loglik_from_ss(ss, n_obs, sigma_eps)


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray):
    """Rows of x under N(mean, L L^T); returns [m]."""
    from scipy.linalg import solve_triangular

    dev = np.atleast_2d(x) - mean
    sol = solve_triangular(chol, dev.T, lower=True).T
    k = mean.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(sol * sol, axis=1) + k * np.log(2.0 * np.pi) + logdet)


def _chol(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(mat)
        raise NumericalError(f"{what} not positive definite "
                             f"(cond={cond:.3e})") from exc


# ---------------------------------------------------------------------------
# Conjugate full conditionals (exposed for direct verification)
# ---------------------------------------------------------------------------

def mu0_conditional(b0s: np.ndarray, sigma: np.ndarray,
                    priors: Priors) -> tuple[np.ndarray, np.ndarray]:
    """Normal full conditional (mean, cov) of mu0 given the b0 draws."""
    n = b0s.shape[0]
    prec0 = np.linalg.inv(priors.sigma0)
    if n == 0:
        return priors.a0.copy(), priors.sigma0.copy()
    prec = np.linalg.inv(sigma)
    post_prec = prec0 + n * prec
    cov = np.linalg.inv(post_prec)
    mean = cov @ (prec0 @ priors.a0 + prec @ b0s.sum(axis=0))
    return mean, cov


def gibbs_update_mu0(b0s, sigma, priors: Priors,
                     rng: np.random.Generator) -> np.ndarray:
    mean, cov = mu0_conditional(b0s, sigma, priors)
    return mean + _chol(cov, "mu0 conditional covariance") @ rng.standard_normal(mean.shape[0])


def sigma_conditional(b0s: np.ndarray, mu0: np.ndarray,
                      priors: Priors) -> tuple[float, np.ndarray]:
    """Inverse-Wishart full conditional (dof, scale) of Sigma."""
    dev = b0s - mu0
    scale = priors.psi + dev.T @ dev
    return priors.nu + b0s.shape[0], scale


def gibbs_update_sigma(b0s, mu0, priors: Priors,
                       rng: np.random.Generator) -> np.ndarray:
    df, scale = sigma_conditional(b0s, mu0, priors)
    scale = 0.5 * (scale + scale.T)
    try:
        return stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("inverse-Wishart scale not SPD") from exc


def sigma_eps_conditional(ss: np.ndarray, n_obs: np.ndarray,
                          priors: Priors) -> tuple[np.ndarray, np.ndarray]:
    """Per-sensor inverse-gamma (shape, scale) full conditional."""
    return priors.eps_shape + 0.5 * n_obs, priors.eps_scale + 0.5 * ss


def gibbs_update_sigma_eps(ss, n_obs, priors: Priors,
                           rng: np.random.Generator) -> np.ndarray:
    shape, scale = sigma_eps_conditional(np.asarray(ss, dtype=float),
                                         np.asarray(n_obs, dtype=float),
                                         priors)
    # inverse-gamma draw via reciprocal gamma; sensors without data fall
    # back to a fresh prior draw automatically (n_obs = 0, ss = 0)
    return scale / rng.gamma(shape)


def mh_update_b0(b0: np.ndarray, scenario: Scenario,
                 forecaster: SensorForecaster, sigma_eps: np.ndarray,
                 mu0: np.ndarray, sigma_chol: np.ndarray,
                 prop_chol: np.ndarray, rng: np.random.Generator):
    """Single-scenario random-walk update; returns (b0_new, accepted)."""
    prop = b0 + prop_chol @ rng.standard_normal(b0.shape[0])
    ll_cur = log_likelihood(b0, scenario, forecaster, sigma_eps)
    ll_prop = log_likelihood(prop, scenario, forecaster, sigma_eps)
    lp_cur = _mvn_logpdf(b0, mu0, sigma_chol)[0]
    lp_prop = _mvn_logpdf(prop, mu0, sigma_chol)[0]
    log_ratio = (ll_prop + lp_prop) - (ll_cur + lp_cur)
    if np.log(rng.random()) < log_ratio:
        return prop, True
    return b0, False


# ---------------------------------------------------------------------------
# The sampler
# ---------------------------------------------------------------------------

def least_squares_init(scenarios, forecaster: SensorForecaster,
                       priors: Priors, n_newton: int = 8,
                       fd_scale: float = 1e-4,
                       return_cov: bool = False):
    """Deterministic MAP starting points for the b0 vectors.

    The likelihood is sharply peaked when many time points are observed, so
    a random-walk chain started at the prior mean may never reach it.  Each
    iteration takes a prior-regularized Gauss-Newton step on the masked
    residuals (Jacobian by forward differences through the batched solver)
    with backtracking line search, so a scenario's penalized misfit never
    increases — important under short observation windows, where the plain
    normal equations are rank-deficient and unguarded steps overshoot into
    regions that fit the window worse than the prior mean does.  Scenarios
    without observations stay at the prior mean.

    With return_cov=True also returns a per-scenario Laplace covariance
    (J^T J / sigma_eps + Sigma0^-1)^-1 from the final Jacobian, a good
    starting proposal shape for strongly anisotropic posteriors.
    """
    k = priors.a0.shape[0]
    n = len(scenarios)
    b0 = np.tile(priors.a0, (n, 1))
    steps = fd_scale * np.sqrt(np.diag(priors.sigma0)) + 1e-12
    prior_prec = np.linalg.inv(priors.sigma0)
    eps0 = priors.eps_scale / max(priors.eps_shape - 1.0, 0.5)
    lap_cov = np.tile(priors.sigma0, (n, 1, 1))
    active = [i for i, sc in enumerate(scenarios) if sc.n_observed > 0]
    if not active:
        return (b0, lap_cov) if return_cov else b0

    def penalized(i, b, eta):
        sc = scenarios[i]
        r = (sc.values - eta)[sc.mask]
        dev = b - priors.a0
        return float(r @ r / eps0 + dev @ prior_prec @ dev)

    for itn in range(n_newton):
        base, ok0 = forecaster.eta_batch(b0)
        cols = np.empty((k, n, base.shape[1], base.shape[2]))
        for p in range(k):
            pert = b0.copy()
            pert[:, p] += steps[p]
            etap, okp = forecaster.eta_batch(pert)
            cols[p] = (etap - base) / steps[p]
            ok0 &= okp
        moved = False
        for i in active:
            if not ok0[i]:
                continue
            sc = scenarios[i]
            m = sc.mask
            r = (sc.values - base[i])[m]
            jac = cols[:, i][:, m].T  # [n_obs, k]
            hess = jac.T @ jac / eps0 + prior_prec
            grad = jac.T @ r / eps0 + prior_prec @ (priors.a0 - b0[i])
            try:
                step = np.linalg.solve(hess, grad)
                lap_cov[i] = np.linalg.inv(hess)
            except np.linalg.LinAlgError:
                continue
            f_cur = penalized(i, b0[i], base[i])
            for alpha in (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125):
                cand = b0[i] + alpha * step
                eta_c, okc = forecaster.eta_batch(cand[None, :])
                if okc[0] and penalized(i, cand, eta_c[0]) < f_cur:
                    b0[i] = cand
                    moved = True
                    break
        if not moved:
            break
    return (b0, lap_cov) if return_cov else b0


def _linearized_readout(b0_lin, scenarios, forecaster, priors: Priors,
                        fd_scale: float = 1e-4):
    """Per-scenario per-sensor Gram blocks of the sensor read-out Jacobian.

    The read-out eta(b0) is linearized at b0_lin; the blocks G[i, s] =
    J_s^T J_s and v[i, s] = J_s^T d_s (d = y - eta0 + J b0_lin, observed
    entries only) let the sampler build the exact Gaussian conditional of
    the linearized model under the current hyperparameters.  Scenarios
    without observations get zero blocks, i.e. the prior conditional.
    """
    n, k = b0_lin.shape
    steps = fd_scale * np.sqrt(np.diag(priors.sigma0)) + 1e-12
    base, ok = forecaster.eta_batch(b0_lin)
    n_t, n_s = base.shape[1:]
    jac = np.empty((n, n_t, n_s, k))
    for p in range(k):
        pert = b0_lin.copy()
        pert[:, p] += steps[p]
        etap, okp = forecaster.eta_batch(pert)
        jac[..., p] = (etap - base) / steps[p]
        ok &= okp
    g = np.zeros((n, n_s, k, k))
    v = np.zeros((n, n_s, k))
    for i, sc in enumerate(scenarios):
        if not ok[i]:
            continue
        d = sc.values - base[i] + np.einsum("tsk,k->ts", jac[i], b0_lin[i])
        for s in range(n_s):
            m = sc.mask[:, s]
            if not m.any():
                continue
            js = jac[i][m, s, :]
            g[i, s] = js.T @ js
            v[i, s] = js.T @ d[m, s]
    return g, v


def _run_chain(scenarios, forecaster, priors: Priors, config: McmcConfig,
               seed: int):
    n = len(scenarios)
    k = priors.a0.shape[0]
    n_sensors = forecaster.sensor_basis.n_sensors
    rng = np.random.default_rng(seed)

    n_obs = np.stack([sc.mask.sum(axis=0) for sc in scenarios])  # [n, n_s]
    lap_cov = None
    if config.init == "least-squares":
        b0, lap_cov = least_squares_init(scenarios, forecaster, priors,
                                         return_cov=True)
    else:
        b0 = np.tile(priors.a0, (n, 1))
    mu0 = priors.a0.copy()
    sigma = priors.psi / max(priors.nu - k - 1, 1.0)
    sigma_eps = np.full(n_sensors, priors.eps_scale / max(priors.eps_shape - 1.0, 0.5))

    eta, ok = forecaster.eta_batch(b0)
    if not ok.all():
        raise NumericalError(
            "corrected ROM diverges at the prior-mean start; cannot "
            "initialize the sampler")
    ss = np.stack([residual_ss(sc, eta[i]) for i, sc in enumerate(scenarios)])
    ll = np.array([loglik_from_ss(ss[i], n_obs[i], sigma_eps)
                   for i in range(n)])
    if not np.all(np.isfinite(ll)):
        raise NumericalError("initial log-likelihood not finite at the "
                             "reference initial condition")

    # proposal covariances adapted from warmup history, with a global
    # per-scenario step scale steered toward the target acceptance rate
    base_var = np.diag(priors.sigma0) * config.init_prop_scale**2
    prop_chol = np.tile(np.diag(np.sqrt(base_var / k)), (n, 1, 1))
    jitter = 1e-12 * float(np.mean(np.diag(priors.sigma0)))
    lin = None
    if lap_cov is not None:
        for i in range(n):
            try:
                prop_chol[i] = np.linalg.cholesky(
                    (2.38**2 / k) * lap_cov[i] + jitter * np.eye(k))
            except np.linalg.LinAlgError:
                pass  # keep the diagonal fallback
        lin = _linearized_readout(b0, scenarios, forecaster, priors)
    log_s = np.zeros(n)
    w_count = 0
    w_mean = np.zeros((n, k))
    w_m2 = np.zeros((n, k, k))

    draws = config.iters - config.warmup
    out_b0 = np.empty((draws, n, k))
    out_mu0 = np.empty((draws, k))
    out_sigma = np.empty((draws, k, k))
    out_eps = np.empty((draws, n_sensors))
    acc_post = np.zeros(n)

    for it in range(config.iters):
        warm = it < config.warmup
        sigma_chol = _chol(sigma, "population covariance")

        # --- Metropolis step for every scenario (batched solves) ---
        # mixture kernel: adaptive random walk, or a draw from the exact
        # Gaussian conditional of the linearized model under the current
        # hyperparameters (acceptance near one when the read-out is close
        # to linear over posterior-sized moves)
        z = rng.standard_normal((n, k))
        use_lin = (rng.random(n) < config.ind_prob) if lin is not None \
            else np.zeros(n, dtype=bool)
        prop = b0 + np.exp(0.5 * log_s)[:, None] * np.einsum(
            "nij,nj->ni", prop_chol, z)
        log_q_diff = np.zeros(n)
        if use_lin.any():
            from scipy.linalg import cho_solve, solve_triangular
            g_all, v_all = lin
            sigma_inv = cho_solve((sigma_chol, True), np.eye(k))
            inv_eps = 1.0 / sigma_eps
            for i in np.nonzero(use_lin)[0]:
                prec = sigma_inv + np.einsum("s,sij->ij", inv_eps, g_all[i])
                rhsv = sigma_inv @ mu0 + inv_eps @ v_all[i]
                try:
                    lp_chol = np.linalg.cholesky(prec)
                except np.linalg.LinAlgError:
                    use_lin[i] = False
                    continue
                mean_i = cho_solve((lp_chol, True), rhsv)
                prop[i] = mean_i + solve_triangular(lp_chol.T, z[i],
                                                    lower=False)
                qf_prop = np.sum((lp_chol.T @ (prop[i] - mean_i)) ** 2)
                qf_cur = np.sum((lp_chol.T @ (b0[i] - mean_i)) ** 2)
                log_q_diff[i] = 0.5 * (qf_prop - qf_cur)
        eta_prop, ok = forecaster.eta_batch(prop)
        ss_prop = np.stack([residual_ss(sc, eta_prop[i])
                            for i, sc in enumerate(scenarios)])
        ll_prop = np.array([loglik_from_ss(ss_prop[i], n_obs[i], sigma_eps)
                            for i in range(n)])
        ll_prop[~ok] = -np.inf
        lp_cur = _mvn_logpdf(b0, mu0, sigma_chol)
        lp_prop = _mvn_logpdf(prop, mu0, sigma_chol)
        log_u = np.log(rng.random(n))
        acc = log_u < (ll_prop + lp_prop) - (ll + lp_cur) + log_q_diff
        b0[acc] = prop[acc]
        ss[acc] = ss_prop[acc]
        ll[acc] = ll_prop[acc]
        if not warm:
            acc_post += acc

        # --- proposal adaptation (warmup only) ---
        if warm:
            rw = ~use_lin
            log_s[rw] += config.adapt_rate * (acc[rw].astype(float)
                                              - config.target_accept)
            if it >= config.adapt_start:
                w_count += 1
                delta = b0 - w_mean
                w_mean += delta / w_count
                w_m2 += np.einsum("ni,nj->nij", delta, b0 - w_mean)
                if (w_count > k + 1
                        and (it + 1) % config.adapt_interval == 0):
                    cov = w_m2 / (w_count - 1)
                    cov = (2.38**2 / k) * cov + jitter * np.eye(k)
                    for i in range(n):
                        try:
                            prop_chol[i] = np.linalg.cholesky(cov[i])
                        except np.linalg.LinAlgError:
                            pass  # keep the previous proposal

        # --- conjugate Gibbs sweep ---
        mu0 = gibbs_update_mu0(b0, sigma, priors, rng)
        sigma = gibbs_update_sigma(b0, mu0, priors, rng)
        sigma_eps = gibbs_update_sigma_eps(ss.sum(axis=0), n_obs.sum(axis=0),
                                           priors, rng)
        ll = np.array([loglik_from_ss(ss[i], n_obs[i], sigma_eps)
                       for i in range(n)])

        if not warm:
            d = it - config.warmup
            out_b0[d] = b0
            out_mu0[d] = mu0
            out_sigma[d] = sigma
            out_eps[d] = sigma_eps

    return out_b0, out_mu0, out_sigma, out_eps, acc_post / draws


def run_mcmc(scenarios, forecaster: SensorForecaster, priors: Priors,
             config: McmcConfig = McmcConfig()) -> PosteriorSamples:
    """Adaptive Metropolis-within-Gibbs over all scenarios; deterministic
    for a given seed."""
    if not scenarios:
        raise DomainError("need at least one scenario")
    if all(sc.n_observed == 0 for sc in scenarios):
        pass  # prior recovery is a supported (and tested) degenerate mode
    for sc in scenarios:
        if sc.sensor_ids != forecaster.sensor_basis.sensor_ids:
            raise StructuralError(
                f"scenario {sc.sid}: sensor ids do not match the basis")
    seeds = tuple(int(s.generate_state(1)[0])
                  for s in np.random.SeedSequence(config.seed).spawn(config.chains))
    chains = [
        _run_chain(list(scenarios), forecaster, priors, config, seed)
        for seed in seeds
    ]
    return PosteriorSamples(
        b0=np.stack([c[0] for c in chains]),
        mu0=np.stack([c[1] for c in chains]),
        sigma=np.stack([c[2] for c in chains]),
        sigma_eps=np.stack([c[3] for c in chains]),
        accept_rate=np.stack([c[4] for c in chains]),
        seeds=seeds, warmup=config.warmup, iters=config.iters,
        sensor_ids=forecaster.sensor_basis.sensor_ids,
    )


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

def psrf(chains: np.ndarray) -> float:
    """Potential scale reduction for one scalar parameter, [m_chains, n]."""
    m, n = chains.shape
    if m < 2 or n < 10:
        raise DomainError("need at least 2 chains of 10 draws for R-hat")
    w = float(np.mean(np.var(chains, axis=1, ddof=1)))
    b_over_n = float(np.var(np.mean(chains, axis=1), ddof=1))
    if w == 0.0:
        return 1.0 if b_over_n == 0.0 else np.inf
    return float(np.sqrt((w + b_over_n) / w))


def gelman_rubin(samples: PosteriorSamples) -> dict[str, np.ndarray]:
    """R-hat per scalar parameter, grouped by block."""

    def stat(arr):  # arr [chains, draws, ...]
        flat = arr.reshape(arr.shape[0], arr.shape[1], -1)
        return np.array([psrf(flat[:, :, p]) for p in range(flat.shape[2])]
                        ).reshape(arr.shape[2:])

    k = samples.mu0.shape[2]
    diag = samples.sigma[:, :, np.arange(k), np.arange(k)]
    return {
        "mu0": stat(samples.mu0),
        "b0": stat(samples.b0),
        "sigma_diag": stat(diag),
        "sigma_eps": stat(samples.sigma_eps),
    }


def max_rhat(rhats: dict[str, np.ndarray]) -> float:
    return float(max(np.max(v) for v in rhats.values()))


# ---------------------------------------------------------------------------
# Posterior predictive forecasts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Forecast:
    times: np.ndarray
    sensor_ids: tuple[str, ...]
    mean: np.ndarray   # [n_t, n_sensors]
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    pi_lo: np.ndarray
    pi_hi: np.ndarray
    level: float
    excluded_fraction: float


def posterior_predictive(samples: PosteriorSamples,
                         forecaster: SensorForecaster,
                         level: float = 0.99, seed: int = 0,
                         chunk: int = 256) -> Forecast:
    """Credible and prediction bands at the sensors.

    For every retained draw: sample b0 from the population, run the
    corrected ROM, read out the sensors.  Credible intervals are quantiles
    of the reconstructions; prediction intervals add the per-sensor noise
    before taking quantiles.  Diverging draws are excluded and counted.
    """
    if samples.n_draws == 0:
        raise DomainError("empty posterior")
    if not 0 < level < 1:
        raise DomainError("interval level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    mu0 = samples.mu0.reshape(-1, samples.mu0.shape[2])
    sigma = samples.sigma.reshape(-1, *samples.sigma.shape[2:])
    eps = samples.sigma_eps.reshape(-1, samples.sigma_eps.shape[2])
    n_draws = mu0.shape[0]
    k = mu0.shape[1]

    b0s = np.empty((n_draws, k))
    for d in range(n_draws):
        try:
            chol = np.linalg.cholesky(sigma[d])
        except np.linalg.LinAlgError:
            chol = np.linalg.cholesky(sigma[d] + 1e-12 * np.eye(k))
        b0s[d] = mu0[d] + chol @ rng.standard_normal(k)

    etas = np.empty((n_draws, forecaster.n_steps + 1,
                     forecaster.sensor_basis.n_sensors))
    ok = np.empty(n_draws, dtype=bool)
    for lo in range(0, n_draws, chunk):
        hi = min(lo + chunk, n_draws)
        etas[lo:hi], ok[lo:hi] = forecaster.eta_batch(b0s[lo:hi])

    good = etas[ok]
    if good.shape[0] == 0:
        raise NumericalError("every posterior draw diverged")
    noise = rng.standard_normal(good.shape) * np.sqrt(eps[ok])[:, None, :]
    lo_q, hi_q = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    return Forecast(
        times=forecaster.times.copy(),
        sensor_ids=forecaster.sensor_basis.sensor_ids,
        mean=good.mean(axis=0),
        ci_lo=np.quantile(good, lo_q, axis=0),
        ci_hi=np.quantile(good, hi_q, axis=0),
        pi_lo=np.quantile(good + noise, lo_q, axis=0),
        pi_hi=np.quantile(good + noise, hi_q, axis=0),
        level=level,
        excluded_fraction=1.0 - float(ok.mean()),
    )


# ---------------------------------------------------------------------------
# Posterior file format: little-endian, magic "RPPOST1",
# u32 chains draws n_scenarios k n_sensors warmup iters;
# then draw-major per chain: b0, mu0, sigma, sigma_eps records (f64).
# ---------------------------------------------------------------------------

def save_posterior(samples: PosteriorSamples, path) -> None:
    c, d, n, k = samples.b0.shape
    n_s = samples.sigma_eps.shape[2]
    buf = _io.BytesIO()
    buf.write(POST_MAGIC)
    buf.write(struct.pack("<7I", c, d, n, k, n_s, samples.warmup,
                          samples.iters))
    for ci in range(c):
        for di in range(d):
            buf.write(np.ascontiguousarray(samples.b0[ci, di], dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(samples.mu0[ci, di], dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(samples.sigma[ci, di], dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(samples.sigma_eps[ci, di], dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(samples.accept_rate, dtype="<f8").tobytes())
    ids = ",".join(samples.sensor_ids).encode()
    buf.write(struct.pack("<I", len(ids)))
    buf.write(ids)
    seeds = np.asarray(samples.seeds, dtype="<u8")
    buf.write(struct.pack("<I", len(seeds)))
    buf.write(seeds.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_posterior(path) -> PosteriorSamples:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(POST_MAGIC)] != POST_MAGIC:
        raise StructuralError(f"{path}: not a posterior file")
    off = len(POST_MAGIC)
    c, d, n, k, n_s, warmup, iters = struct.unpack_from("<7I", raw, off)
    off += 28

    def read(count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        return arr.reshape(shape).copy()

    b0 = np.empty((c, d, n, k))
    mu0 = np.empty((c, d, k))
    sigma = np.empty((c, d, k, k))
    eps = np.empty((c, d, n_s))
    for ci in range(c):
        for di in range(d):
            b0[ci, di] = read(n * k, (n, k))
            mu0[ci, di] = read(k, (k,))
            sigma[ci, di] = read(k * k, (k, k))
            eps[ci, di] = read(n_s, (n_s,))
    accept = read(c * n, (c, n))
    (id_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    ids = tuple(raw[off : off + id_len].decode().split(",")) if id_len else ()
    off += id_len
    (n_seeds,) = struct.unpack_from("<I", raw, off)
    off += 4
    seeds = tuple(int(x) for x in np.frombuffer(raw, dtype="<u8",
                                                count=n_seeds, offset=off))
    return PosteriorSamples(b0=b0, mu0=mu0, sigma=sigma, sigma_eps=eps,
                            accept_rate=accept, seeds=seeds, warmup=warmup,
                            iters=iters, sensor_ids=ids)


__all__ = [
    "SensorBasis", "SensorForecaster", "build_sensor_basis",
    "Priors", "default_priors", "McmcConfig", "PosteriorSamples",
    "log_likelihood", "residual_ss", "loglik_from_ss",
    "mu0_conditional", "gibbs_update_mu0", "sigma_conditional",
    "gibbs_update_sigma", "sigma_eps_conditional", "gibbs_update_sigma_eps",
    "mh_update_b0", "least_squares_init", "run_mcmc", "psrf",
    "gelman_rubin", "max_rhat",
    "Forecast", "posterior_predictive", "save_posterior", "load_posterior",
]
