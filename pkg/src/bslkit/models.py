"""Simulator models: Poisson/negative-binomial toy, MA(2) and the toad movement model."""

from __future__ import annotations

import numpy as np
from scipy import special

from . import _kernels
from .core import DegenerateSummaryError, SimulatorModel, SupportError, as_generator


class ToyModel(SimulatorModel):
    """Poisson(theta) working model for data that are really NB(5, 0.5).

    The summary is the sample mean, so ``b(theta) = theta`` and
    ``var = theta / n``. The prior is Gamma(shape=2, rate=0.5).
    """

    dim_theta = 1
    dim_summary = 1
    param_names = ("theta",)

    def __init__(self, n=20, prior_shape=2.0, prior_rate=0.5, nb_size=5, nb_prob=0.5):
        self.n = int(n)
        self.prior_shape = float(prior_shape)
        self.prior_rate = float(prior_rate)
        self.nb_size = nb_size
        self.nb_prob = nb_prob

    def generate_data(self, rng) -> np.ndarray:
        """Observed data: ``n`` draws from NB(size=5, p=0.5), mean 5 and variance 10."""
        return as_generator(rng).negative_binomial(self.nb_size, self.nb_prob, size=self.n)

    @staticmethod
    def summary(data) -> np.ndarray:
        return np.array([np.mean(data)], dtype=float)

    def simulate_summary(self, theta, rng) -> np.ndarray:
        theta = self.check_theta(theta)
        if theta[0] <= 0:
            raise SupportError(f"toy model needs theta > 0, got {theta[0]}")
        return self.summary(as_generator(rng).poisson(theta[0], size=self.n))

    def simulate_batch(self, theta, m, rng) -> np.ndarray:
        # the sum of n iid Poisson(theta) draws is Poisson(n * theta)
        theta = self.check_theta(theta)
        if theta[0] <= 0:
            raise SupportError(f"toy model needs theta > 0, got {theta[0]}")
        totals = as_generator(rng).poisson(self.n * theta[0], size=m)
        return (totals / self.n)[:, None]

    def support(self, theta) -> bool:
        return bool(np.all(np.asarray(theta) > 0))

    def _log_prior(self, theta) -> float:
        a, b = self.prior_shape, self.prior_rate
        t = float(np.asarray(theta).ravel()[0])
        return a * np.log(b) - special.gammaln(a) + (a - 1) * np.log(t) - b * t

    def prior_sample(self, rng) -> np.ndarray:
        return np.array([as_generator(rng).gamma(self.prior_shape, 1.0 / self.prior_rate)])

    @property
    def has_analytic(self) -> bool:
        return True

    def analytic_mean(self, theta) -> np.ndarray:
        return np.atleast_1d(np.asarray(theta, dtype=float)).copy()

    def analytic_cov(self, theta) -> np.ndarray:
        t = float(np.asarray(theta).ravel()[0])
        return np.array([[t / self.n]])

    def exact_posterior(self, data) -> tuple[float, float]:
        """Shape and rate of the conjugate Gamma posterior under the Poisson model."""
        return toy_exact_posterior(data, self.prior_shape, self.prior_rate)


def toy_exact_posterior(data, prior_shape=2.0, prior_rate=0.5) -> tuple[float, float]:
    data = np.asarray(data)
    if np.any(data < 0) or np.any(data != np.round(data)):
        raise ValueError("toy data must be non-negative integers")
    return prior_shape + float(data.sum()), prior_rate + data.size


def ma2_support(theta) -> bool:
    t1, t2 = float(theta[0]), float(theta[1])
    return -1.0 < t2 < 1.0 and t1 + t2 > -1.0 and t1 - t2 < 1.0


class MA2Model(SimulatorModel):
    """MA(2) series with the first ``n_lags`` sample autocovariances as summary.

    Lags 0..n_lags-1 are used; the prior is uniform on the invertibility
    triangle, which has area 4.
    """

    dim_theta = 2
    param_names = ("theta1", "theta2")

    def __init__(self, n=1000, n_lags=20):
        if n <= n_lags:
            raise ValueError("series length must exceed the number of lags")
        self.n = int(n)
        self.n_lags = int(n_lags)
        self.dim_summary = self.n_lags

    def support(self, theta) -> bool:
        return ma2_support(theta)

    def _log_prior(self, theta) -> float:
        return -np.log(4.0)

    def prior_sample(self, rng) -> np.ndarray:
        rng = as_generator(rng)
        while True:
            t = np.array([rng.uniform(-2, 2), rng.uniform(-1, 1)])
            if ma2_support(t):
                return t

    def simulate_series(self, theta, rng) -> np.ndarray:
        theta = self._checked(theta)
        z = as_generator(rng).standard_normal(self.n + 2)
        return z[2:] + theta[0] * z[1:-1] + theta[1] * z[:-2]

    def autocov(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        yc = y - y.mean()
        n = y.size
        return np.array([yc[k:] @ yc[: n - k] / n for k in range(self.n_lags)])

    def simulate_summary(self, theta, rng) -> np.ndarray:
        return self.simulate_batch(theta, 1, rng)[0]

    def simulate_batch(self, theta, m, rng) -> np.ndarray:
        theta = self._checked(theta)
        innov = as_generator(rng).standard_normal((m, self.n + 2))
        return _kernels.ma2_autocov(innov, theta[0], theta[1], self.n_lags)

    def true_autocov(self, theta) -> np.ndarray:
        t1, t2 = theta
        out = np.zeros(self.n_lags)
        out[0] = 1 + t1**2 + t2**2
        out[1] = t1 + t1 * t2
        out[2] = t2
        return out

    def _checked(self, theta):
        theta = self.check_theta(theta)
        if not ma2_support(theta):
            raise SupportError(f"MA(2) parameters {theta} outside the invertibility region")
        return theta


def levy_stable_sample(alpha, delta, rng, size=None):
    """Symmetric alpha-stable draws with scale ``delta`` (Chambers-Mallows-Stuck).

    With zero skewness the usual parameterizations coincide; ``alpha = 2``
    gives N(0, 2 delta^2).
    """
    if not 1.0 < alpha <= 2.0:
        raise ValueError(f"stability alpha must lie in (1, 2], got {alpha}")
    if not delta > 0:
        raise ValueError(f"scale delta must be positive, got {delta}")
    rng = as_generator(rng)
    phi = rng.uniform(-np.pi / 2, np.pi / 2, size=size)
    w = rng.standard_exponential(size=size)
    return _kernels.stable_transform(phi, w, alpha, delta)


class ToadModel(SimulatorModel):
    """Individual-based toad movement model with random returns to past refuges.

    theta = (alpha, delta, p0): stability and scale of the overnight stable
    displacement and the probability of returning to an earlier refuge.
    """

    dim_theta = 3
    param_names = ("alpha", "delta", "p0")
    lower = np.array([1.0, 0.0, 0.0])
    upper = np.array([2.0, 100.0, 0.9])

    def __init__(self, n_toads=66, n_days=63, lags=(1, 2, 4, 8), threshold=10.0):
        self.n_toads = int(n_toads)
        self.n_days = int(n_days)
        self.lags = tuple(int(l) for l in lags)
        if self.n_days <= max(self.lags):
            raise ValueError("need more days than the largest lag")
        self.threshold = float(threshold)
        self.n = self.n_toads * self.n_days
        self.dim_summary = 12 * len(self.lags)

    def support(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper))

    def _log_prior(self, theta) -> float:
        return -float(np.sum(np.log(self.upper - self.lower)))

    def prior_sample(self, rng) -> np.ndarray:
        rng = as_generator(rng)
        while True:
            t = rng.uniform(self.lower, self.upper)
            if self.support(t):
                return t

    def simulate_paths_batch(self, theta, m, rng) -> np.ndarray:
        theta = self.check_theta(theta)
        if not self.support(theta):
            raise SupportError(f"toad parameters {theta} outside the prior support")
        alpha, delta, p0 = theta
        rng = as_generator(rng)
        shape = (m, self.n_days - 1, self.n_toads)
        phi = rng.uniform(-np.pi / 2, np.pi / 2, size=shape)
        w = rng.standard_exponential(size=shape)
        u_return = rng.random(shape)
        u_day = rng.random(shape)
        return _kernels.toad_paths(phi, w, u_return, u_day, alpha, delta, p0)

    def simulate_paths(self, theta, rng) -> np.ndarray:
        """One dataset: an (n_days, n_toads) matrix of refuge locations."""
        return self.simulate_paths_batch(theta, 1, rng)[0]

    def summaries(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        return self.summaries_batch(Y[None])[0]

    def summaries_batch(self, Ys) -> np.ndarray:
        Ys = np.ascontiguousarray(Ys, dtype=float)
        out, status = _kernels.toad_summaries(Ys, np.asarray(self.lags, dtype=np.int64), self.threshold)
        bad = np.flatnonzero(status)
        if bad.size:
            code = int(status[bad[0]])
            reason = ("no non-return displacements at some lag" if code == 1
                      else "non-positive gap between adjacent quantiles")
            raise DegenerateSummaryError(f"{bad.size} of {len(status)} toad summaries degenerate: {reason}")
        return out

    def simulate_summary(self, theta, rng) -> np.ndarray:
        return self.simulate_batch(theta, 1, rng)[0]

    def simulate_batch(self, theta, m, rng) -> np.ndarray:
        return self.summaries_batch(self.simulate_paths_batch(theta, m, rng))


def toad_summaries(Y, lags=(1, 2, 4, 8), threshold=10.0) -> np.ndarray:
    """48-dimensional summary of an (n_days, n_toads) location matrix."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] < max(lags) + 1:
        raise ValueError("location matrix has too few days for the requested lags")
    model = ToadModel(n_toads=Y.shape[1], n_days=Y.shape[0], lags=lags, threshold=threshold)
    return model.summaries(Y)
