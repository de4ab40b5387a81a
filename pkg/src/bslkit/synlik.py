"""Synthetic likelihood estimation under full, shrinkage, diagonal or analytic covariances."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .core import DegenerateSummaryError, SimulatorModel, SupportError, as_generator

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CovarianceSpec:
    """How the synthetic likelihood covariance is formed.

    ``kind`` is one of ``"full"``, ``"shrinkage"``, ``"diagonal"`` or
    ``"analytic"``. ``gamma`` is the shrinkage weight on the sample
    correlation; ``scale`` multiplies the model's analytic covariance.
    """

    kind: str = "full"
    gamma: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("full", "shrinkage", "diagonal", "analytic"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"shrinkage gamma must lie in [0,1], got {self.gamma}")
        if not self.scale > 0:
            raise ValueError(f"analytic scale must be positive, got {self.scale}")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def shrinkage(cls, gamma):
        return cls("shrinkage", gamma=gamma)

    @classmethod
    def diagonal(cls):
        return cls("diagonal")

    @classmethod
    def analytic(cls, scale=1.0):
        return cls("analytic", scale=scale)

    def __str__(self):
        if self.kind == "shrinkage":
            return f"shrinkage({self.gamma:g})"
        if self.kind == "analytic":
            return f"analytic({self.scale:g})"
        return self.kind


@dataclass(frozen=True)
class SynLikEstimate:
    mean: np.ndarray
    cov: np.ndarray
    log_lik: float
    log_det: float
    m_used: int


class _Diagnostics:
    """Thread-safe counters for covariance fallbacks."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.nugget_used = 0
            self.degenerate = 0

    def bump(self, name):
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


diagnostics = _Diagnostics()


def simulate_batch(model: SimulatorModel, theta, m: int, rng) -> np.ndarray:
    """Draw ``m`` independent summary statistics at ``theta``; shape (m, d)."""
    if m < 2:
        raise ValueError(f"need at least 2 simulations, got m={m}")
    theta = model.check_theta(theta)
    if not model.support(theta):
        raise SupportError(f"theta={theta} outside the prior support")
    draws = np.asarray(model.simulate_batch(theta, m, as_generator(rng)), dtype=float)
    return draws.reshape(m, model.dim_summary)


def sample_mean_cov(batch) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (divisor m - 1) sample covariance."""
    batch = np.asarray(batch, dtype=float)
    m = batch.shape[0]
    if m < 2:
        raise ValueError("need at least 2 rows")
    mean = batch.mean(axis=0)
    centred = batch - mean
    cov = centred.T @ centred / (m - 1)
    return mean, 0.5 * (cov + cov.T)


def shrink_covariance(cov, gamma) -> np.ndarray:
    """Shrink the correlation of ``cov`` towards the identity, keeping variances."""
    cov = np.asarray(cov, dtype=float)
    var = np.diag(cov)
    if np.any(var <= 0):
        bad = np.flatnonzero(var <= 0)
        raise DegenerateSummaryError(f"degenerate summary coordinate(s) {bad.tolist()}: zero sample variance")
    sd = np.sqrt(var)
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    shrunk = gamma * corr + (1.0 - gamma) * np.eye(len(var))
    out = shrunk * np.outer(sd, sd)
    np.fill_diagonal(out, var)
    return out


def build_covariance(batch, spec: CovarianceSpec, model: SimulatorModel | None = None, theta=None):
    """Covariance for the synthetic likelihood according to ``spec``."""
    if spec.kind == "analytic":
        if model is None or not model.has_analytic:
            raise ValueError("analytic covariance needs a model with analytic moments")
        return spec.scale * np.atleast_2d(model.analytic_cov(theta))
    _, cov = sample_mean_cov(batch)
    if spec.kind == "full":
        return cov
    if spec.kind == "diagonal":
        return np.diag(np.diag(cov))
    if spec.gamma == 1.0:
        # correlation undefined with zero variance even without shrinkage
        shrink_covariance(cov, 1.0)
        return cov
    return shrink_covariance(cov, spec.gamma)


def _cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    diag_mean = float(np.mean(np.diag(cov)))
    if not np.isfinite(diag_mean) or diag_mean <= 0:
        return None
    diagnostics.bump("nugget_used")
    try:
        return np.linalg.cholesky(cov + 1e-8 * diag_mean * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        return None


def _log_normal(s_obs, mean, cov):
    s_obs = np.atleast_1d(np.asarray(s_obs, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = s_obs.shape[0]
    if mean.shape != (d,) or cov.shape != (d, d):
        raise ValueError(f"dimension mismatch: S {s_obs.shape}, mean {mean.shape}, cov {cov.shape}")
    L = _cholesky(cov)
    if L is None:
        diagnostics.bump("degenerate")
        return -np.inf, np.nan
    z = np.linalg.solve(L, s_obs - mean) if d > 1 else (s_obs - mean) / L[0, 0]
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (d * LOG_2PI + log_det + float(z @ z)), log_det


def log_synlik(s_obs, mean, cov) -> float:
    """Multivariate normal log density of ``s_obs``, including the 2*pi constant.

    If the Cholesky factorization fails a nugget of 1e-8 times the mean
    diagonal is added once; if that fails too the result is ``-inf`` and
    ``diagnostics.degenerate`` is incremented.
    """
    return _log_normal(s_obs, mean, cov)[0]


def estimated_log_synlik(model, theta, m, spec, s_obs, rng) -> tuple[float, SynLikEstimate]:
    """Simulate ``m`` summaries at ``theta`` and evaluate the Gaussian log density.

    The density (not its log) is an unbiased estimate of the likelihood that
    the pseudo-marginal samplers target.
    """
    batch = simulate_batch(model, theta, m, rng)
    mean = batch.mean(axis=0)
    cov = build_covariance(batch, spec, model, theta)
    ll, log_det = _log_normal(s_obs, mean, cov)
    return ll, SynLikEstimate(mean, cov, ll, log_det, m)


def analytic_log_synlik(model, theta, s_obs, scale=1.0) -> float:
    """Idealized synthetic likelihood with the model's exact summary mean and covariance."""
    if not model.has_analytic:
        raise ValueError(f"{type(model).__name__} has no analytic summary moments")
    theta = model.check_theta(theta)
    return log_synlik(s_obs, model.analytic_mean(theta), scale * np.atleast_2d(model.analytic_cov(theta)))


def loglik_variance_diagnostic(model, theta, m, R, spec, s_obs, rng) -> float:
    """Sample variance of ``R`` independent log-likelihood estimates at ``theta``.

    Pseudo-marginal samplers work well when this lies roughly in [1, 3];
    increase ``m`` when it is larger.
    """
    if R < 20:
        raise ValueError(f"need at least 20 repeats, got R={R}")
    rng = as_generator(rng)
    vals = np.array([estimated_log_synlik(model, theta, m, spec, s_obs, rng)[0] for _ in range(R)])
    n_bad = int(np.sum(~np.isfinite(vals)))
    if n_bad:
        raise DegenerateSummaryError(f"{n_bad} of {R} log-likelihood estimates were not finite")
    return float(np.var(vals, ddof=1))
