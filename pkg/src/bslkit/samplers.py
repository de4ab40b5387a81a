"""Pseudo-marginal MCMC, importance sampling and rejection sampling for synthetic likelihood posteriors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import BSLError, DegenerateSummaryError, as_generator, check_psd
from .synlik import CovarianceSpec, analytic_log_synlik, estimated_log_synlik

log = logging.getLogger(__name__)


class InitializationError(BSLError):
    pass


class ProposalMismatchError(BSLError):
    pass


class BoundViolationError(BSLError):
    def __init__(self, max_log_lik, bound_log):
        super().__init__(
            f"bound violated: log-likelihood estimate {max_log_lik:.6g} exceeds bound {bound_log:.6g}"
        )
        self.max_log_lik = max_log_lik
        self.bound_log = bound_log


@dataclass
class Chain:
    draws: np.ndarray
    log_liks: np.ndarray
    accept_count: int
    m: int | None
    spec: str
    rw_cov: np.ndarray
    n_failed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / len(self.draws)

    def burned(self, fraction=0.2) -> np.ndarray:
        return self.draws[int(fraction * len(self.draws)):]


@dataclass
class WeightedSample:
    draws: np.ndarray
    log_weights: np.ndarray
    ess: float

    @property
    def weights(self) -> np.ndarray:
        return normalized_weights(self.log_weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.draws

    def cov(self) -> np.ndarray:
        w = self.weights
        c = self.draws - w @ self.draws
        return (c * w[:, None]).T @ c


@dataclass(frozen=True)
class GaussianProposal:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = check_psd(np.atleast_2d(np.asarray(self.cov, dtype=float)))
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", np.linalg.cholesky(cov))

    def sample(self, rng, size) -> np.ndarray:
        z = as_generator(rng).standard_normal((size, self.mean.size))
        return self.mean + z @ self._chol.T

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        z = np.linalg.solve(self._chol, (x - self.mean).T)
        log_det = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (self.mean.size * np.log(2 * np.pi) + log_det + np.sum(z * z, axis=0))


def make_loglik(model, s_obs, m, spec: CovarianceSpec, idealized=False):
    """Return ``f(theta, rng) -> log-likelihood`` for the requested target.

    ``idealized=True`` uses the model's exact summary moments (no simulation).
    Degenerate simulated summaries count as a zero likelihood estimate.
    """
    if idealized:
        def loglik(theta, rng):
            return analytic_log_synlik(model, theta, s_obs, spec.scale)
    else:
        def loglik(theta, rng):
            try:
                return estimated_log_synlik(model, theta, m, spec, s_obs, rng)[0]
            except DegenerateSummaryError:
                return -np.inf
    return loglik


def pm_rw_mh(model, s_obs, m, spec, init, rw_cov, n_iter, rng, idealized=False) -> Chain:
    """Pseudo-marginal random-walk Metropolis-Hastings.

    The log-likelihood estimate of the current state is carried forward and
    never refreshed. Proposals outside the prior support are rejected
    without simulating.
    """
    rng = as_generator(rng)
    loglik = make_loglik(model, s_obs, m, spec, idealized)
    theta = model.check_theta(init)
    if not model.support(theta):
        raise InitializationError(f"initial value {theta} outside the prior support")
    if n_iter < 1:
        raise ValueError("n_iter must be positive")
    rw_cov = check_psd(np.atleast_2d(rw_cov))
    chol = np.linalg.cholesky(rw_cov)
    d = theta.size

    ll = -np.inf
    for _ in range(50):
        ll = loglik(theta, rng)
        if np.isfinite(ll):
            break
    else:
        raise InitializationError(f"no finite likelihood estimate at {theta} after 50 attempts")
    lp = model.prior_log_density(theta)

    draws = np.empty((n_iter, d))
    log_liks = np.empty(n_iter)
    accepted = 0
    n_failed = 0
    steps = rng.standard_normal((n_iter, d)) @ chol.T
    log_u = np.log(rng.random(n_iter))
    for q in range(n_iter):
        prop = theta + steps[q]
        if model.support(prop):
            ll_prop = loglik(prop, rng)
            if not np.isfinite(ll_prop):
                n_failed += 1
            else:
                lp_prop = model.prior_log_density(prop)
                if log_u[q] < ll_prop + lp_prop - ll - lp:
                    theta, ll, lp = prop, ll_prop, lp_prop
                    accepted += 1
        draws[q] = theta
        log_liks[q] = ll
    return Chain(draws, log_liks, accepted, None if idealized else m,
                 ("idealized-" if idealized else "") + str(spec), rw_cov, n_failed)


def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(lw)):
        raise ProposalMismatchError("all importance weights are zero")
    return np.exp(lw - logsumexp(lw))


def ess(log_weights) -> float:
    """Effective sample size (sum w)^2 / sum w^2 of importance weights."""
    w = normalized_weights(log_weights)
    return float(1.0 / np.sum(w * w))


def importance_sample(model, s_obs, m, spec, proposal: GaussianProposal, N, rng,
                      idealized=False) -> WeightedSample:
    """Importance sampling from a Gaussian proposal with estimated likelihoods."""
    if N < 2:
        raise ValueError("need at least 2 importance draws")
    rng = as_generator(rng)
    loglik = make_loglik(model, s_obs, m, spec, idealized)
    draws = proposal.sample(rng, N)
    log_q = proposal.log_density(draws)
    log_w = np.full(N, -np.inf)
    for i, theta in enumerate(draws):
        lp = model.prior_log_density(theta)
        if not np.isfinite(lp):
            continue
        ll = loglik(theta, rng)
        if np.isfinite(ll):
            log_w[i] = ll + lp - log_q[i]
    if not np.any(np.isfinite(log_w)):
        raise ProposalMismatchError(f"proposal mismatch: all {N} importance weights are zero")
    return WeightedSample(draws, log_w, ess(log_w))


def resample(ws: WeightedSample, K, rng) -> np.ndarray:
    """Multinomial resample of ``K`` rows by normalized weight."""
    if K < 1:
        raise ValueError("K must be positive")
    w = normalized_weights(ws.log_weights)
    idx = as_generator(rng).choice(len(w), size=K, p=w)
    return ws.draws[idx]


@dataclass
class RejectionResult:
    draws: np.ndarray
    acceptance_rate: float
    log_weights: np.ndarray
    max_log_lik: float
    n_proposed: int

    @property
    def weights(self) -> np.ndarray:
        return normalized_weights(self.log_weights)


def rejection_bsl(model, s_obs, m, spec, proposal: GaussianProposal, bound_log, N_prop, rng,
                  idealized=False) -> RejectionResult:
    """Rejection sampler accepting with probability exp(log-lik estimate - bound_log).

    Accepted draws follow q(theta) times the estimated likelihood; the
    returned log-weights log pi(theta) - log q(theta) recover the posterior.
    Raises :class:`BoundViolationError` if any estimate exceeds the bound.
    """
    rng = as_generator(rng)
    loglik = make_loglik(model, s_obs, m, spec, idealized)
    props = proposal.sample(rng, N_prop)
    log_u = np.log(rng.random(N_prop))
    lls = np.full(N_prop, -np.inf)
    for i, theta in enumerate(props):
        if model.support(theta):
            lls[i] = loglik(theta, rng)
    max_ll = float(np.max(lls))
    if max_ll > bound_log:
        raise BoundViolationError(max_ll, bound_log)
    keep = log_u < lls - bound_log
    acc = props[keep]
    log_w = np.array([model.prior_log_density(t) for t in acc]) - proposal.log_density(acc) if len(acc) else np.empty(0)
    return RejectionResult(acc, float(keep.mean()), log_w, max_ll, N_prop)


def batch_means_se(x, n_batches=50) -> np.ndarray:
    """Monte Carlo standard error of a chain mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    b = len(x) // n_batches
    means = x[: b * n_batches].reshape(n_batches, b, -1).mean(axis=1)
    return np.sqrt(means.var(axis=0, ddof=1) / n_batches)
