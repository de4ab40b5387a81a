"""Sandwich-type adjustment of synthetic likelihood posterior samples.

The adjusted draws are an affine map of the originals whose covariance is
``Gamma @ Omega @ Gamma``, where ``Gamma`` is the posterior covariance and
``Omega`` estimates the variance of the synthetic log-likelihood gradient at
the posterior mean. Gradients come from a Gaussian-process emulator of the
log-likelihood surface fitted to a Latin hypercube design around the mean.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .core import (
    BSLError,
    SingularCovarianceError,
    as_generator,
    clamp_psd,
    sym_inv_sqrt,
    sym_sqrt,
)
from .synlik import CovarianceSpec, _log_normal, build_covariance, simulate_batch

log = logging.getLogger(__name__)


class GPFitError(BSLError):
    pass


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


@dataclass
class OmegaEstimate:
    omega: np.ndarray
    gradients: np.ndarray

    @property
    def J(self) -> int:
        return len(self.gradients)


@dataclass
class AdjustmentResult:
    moments: PosteriorMoments
    omega: OmegaEstimate | None
    original: np.ndarray
    adjusted: np.ndarray
    transform: np.ndarray

    def to_csv(self, path, names=None):
        """Original and adjusted draws side by side."""
        d = self.original.shape[1]
        names = list(names or [f"theta{k + 1}" for k in range(d)])
        header = ",".join(names + [f"{v}_adjusted" for v in names])
        np.savetxt(path, np.hstack([self.original, self.adjusted]), delimiter=",",
                   header=header, comments="", fmt="%.17g")

    def to_json(self) -> str:
        omega = None if self.omega is None else self.omega.omega.tolist()
        return json.dumps({"mean": self.moments.mean.tolist(), "cov": self.moments.cov.tolist(),
                           "omega": omega, "transform": self.transform.tolist()})

    @staticmethod
    def from_json(text) -> dict:
        raw = json.loads(text)
        return {k: None if v is None else np.asarray(v, dtype=float) for k, v in raw.items()}


def sample_cov(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    c = x - x.mean(axis=0)
    cov = c.T @ c / (len(x) - 1)
    return 0.5 * (cov + cov.T)


def posterior_moments(samples) -> PosteriorMoments:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    Q, d = samples.shape
    if Q < d + 1:
        raise ValueError(f"need at least {d + 1} samples, got {Q}")
    mean = samples.mean(axis=0)
    cov = sample_cov(samples)
    w = np.linalg.eigvalsh(cov)
    if w.max() <= 0 or w.min() <= 1e-12 * w.max():
        raise SingularCovarianceError("singular posterior covariance")
    return PosteriorMoments(mean, cov)


def adjust_samples(samples, moments: PosteriorMoments, omega) -> AdjustmentResult:
    """Map draws to ``mean + Gamma Omega^{1/2} Gamma^{-1/2} (theta - mean)``."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    est = omega if isinstance(omega, OmegaEstimate) else None
    omega = np.atleast_2d(est.omega if est is not None else np.asarray(omega, dtype=float))
    d = moments.mean.size
    if samples.shape[1] != d or omega.shape != (d, d) or moments.cov.shape != (d, d):
        raise ValueError(
            f"dimension mismatch: samples {samples.shape}, Gamma {moments.cov.shape}, Omega {omega.shape}"
        )
    transform = moments.cov @ sym_sqrt(clamp_psd(omega)) @ sym_inv_sqrt(moments.cov)
    adjusted = moments.mean + (samples - moments.mean) @ transform.T
    return AdjustmentResult(moments, est, samples, adjusted, transform)


def latin_hypercube(center, half_width, B, rng, support=None, max_tries=100) -> np.ndarray:
    """Latin hypercube of ``B`` points on ``[center - half_width, center + half_width]``.

    Points outside ``support`` are redrawn inside their own cells; after
    ``max_tries`` failures such a point is redrawn uniformly over the box.
    """
    rng = as_generator(rng)
    center = np.atleast_1d(np.asarray(center, dtype=float))
    half_width = np.atleast_1d(np.asarray(half_width, dtype=float))
    d = center.size
    cells = np.stack([rng.permutation(B) for _ in range(d)], axis=1)
    lo = center - half_width
    width = 2.0 * half_width

    def place(c):
        return lo + width * (c + rng.random(c.shape)) / B

    X = place(cells)
    if support is not None:
        for b in range(B):
            tries = 0
            while not support(X[b]):
                tries += 1
                if tries <= max_tries:
                    X[b] = place(cells[b])
                else:
                    X[b] = lo + width * rng.random(d)
                if tries > 100 * max_tries:
                    raise ValueError("cannot place design point inside the prior support")
    return X


class GaussianProcess:
    """Zero-mean GP regression with an ARD squared-exponential kernel.

    Responses are centred before fitting (the constant offset does not
    affect gradients). Hyperparameters are log length scales, log signal
    variance and log nugget variance.
    """

    def __init__(self, length_scales=None, signal_var=None, nugget=None):
        self.length_scales = None if length_scales is None else np.atleast_1d(length_scales).astype(float)
        self.signal_var = signal_var
        self.nugget = nugget

    @staticmethod
    def _kernel(A, B, ls, sf2):
        diff = (A[:, None, :] - B[None, :, :]) / ls
        return sf2 * np.exp(-0.5 * np.sum(diff * diff, axis=-1))

    def _nlml(self, params, X, y, sq):
        d = X.shape[1]
        ls = np.exp(params[:d])
        sf2 = np.exp(params[d])
        sn2 = np.exp(params[d + 1])
        K = sf2 * np.exp(-0.5 * np.einsum("ijk,k->ij", sq, 1.0 / ls**2))
        K[np.diag_indices_from(K)] += sn2
        try:
            c, low = linalg.cho_factor(K, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return 1e25
        alpha = linalg.cho_solve((c, low), y, check_finite=False)
        return 0.5 * y @ alpha + np.sum(np.log(np.diag(c)))

    def fit(self, X, y, optimize_hyper=True, init=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        n, d = X.shape
        self.X = X
        self.offset = float(y.mean())
        yc = y - self.offset
        var_y = float(yc.var())
        scale_y = var_y if var_y > 0 else 1.0
        sd_x = X.std(axis=0)
        sd_x[sd_x == 0] = 1.0

        if optimize_hyper:
            if init is None:
                init = np.concatenate([np.log(sd_x), [np.log(scale_y), np.log(1e-4 * scale_y)]])
            floor = np.log(1e-8 * scale_y)
            # length scales below a quarter of the design spread chase simulation noise
            bounds = [(np.log(s / 4.0), np.log(s * 1e3)) for s in sd_x]
            bounds += [(np.log(1e-6 * scale_y), np.log(1e8 * scale_y)), (floor, np.log(scale_y))]
            init = np.clip(init, [b[0] for b in bounds], [b[1] for b in bounds])
            sq = (X[:, None, :] - X[None, :, :]) ** 2
            res = optimize.minimize(
                self._nlml, init, args=(X, yc, sq), method="Nelder-Mead", bounds=bounds,
                options={"xatol": 1e-2, "fatol": 1e-4, "maxfev": 2000},
            )
            p = res.x
            self.length_scales = np.exp(p[:d])
            self.signal_var = float(np.exp(p[d]))
            self.nugget = float(np.exp(p[d + 1]))
            self.hyper = p
        elif self.length_scales is None:
            raise ValueError("fixed hyperparameters were not supplied")
        self._factorize(yc)
        return self

    def _factorize(self, yc):
        K = self._kernel(self.X, self.X, self.length_scales, self.signal_var)
        nugget = self.nugget
        while True:
            try:
                Kn = K.copy()
                Kn[np.diag_indices_from(Kn)] += nugget
                self._chol = linalg.cho_factor(Kn, lower=True, check_finite=False)
                break
            except linalg.LinAlgError:
                nugget *= 10.0
                if nugget > 1e-4 * self.signal_var:
                    raise GPFitError("kernel matrix not positive definite after nugget escalation")
        self.nugget = nugget
        self.alpha = linalg.cho_solve(self._chol, yc, check_finite=False)

    def predict(self, Xs) -> np.ndarray:
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        return self.offset + self._kernel(Xs, self.X, self.length_scales, self.signal_var) @ self.alpha

    def gradient_fd(self, x, step) -> np.ndarray:
        """Central finite-difference gradient of the predictive mean."""
        x = np.asarray(x, dtype=float)
        step = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
        E = np.diag(step)
        pts = np.concatenate([x + E, x - E])
        f = self.predict(pts)
        d = x.size
        return (f[:d] - f[d:]) / (2.0 * step)


@dataclass
class GPEmulator:
    """Latin hypercube design with cached synthetic-likelihood moments per point."""

    center: np.ndarray
    half_width: np.ndarray
    inputs: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    spec: CovarianceSpec
    m: int
    _chols: list | None = None
    _warm: np.ndarray | None = None

    @property
    def B(self) -> int:
        return len(self.inputs)

    def responses(self, s_target) -> np.ndarray:
        s_target = np.atleast_1d(np.asarray(s_target, dtype=float))
        if self._chols is None:
            self._chols = [_safe_chol(c) for c in self.covs]
        out = np.empty(self.B)
        for b, L in enumerate(self._chols):
            if L is None:
                out[b] = _log_normal(s_target, self.means[b], self.covs[b])[0]
                continue
            z = linalg.solve_triangular(L, s_target - self.means[b], lower=True, check_finite=False)
            out[b] = -0.5 * (s_target.size * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(L))) + z @ z)
        return out


def _safe_chol(c):
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        return None


def build_gp_emulator(model, center, half_width, B, m, spec, rng) -> GPEmulator:
    """Simulate ``m`` summaries at each of ``B`` Latin hypercube points around ``center``."""
    center = model.check_theta(center)
    half_width = np.atleast_1d(np.asarray(half_width, dtype=float))
    if B < 10 * model.dim_theta:
        raise ValueError(f"need B >= {10 * model.dim_theta} design points, got {B}")
    rng = as_generator(rng)
    X = latin_hypercube(center, half_width, B, rng, support=model.support)
    means = np.empty((B, model.dim_summary))
    covs = np.empty((B, model.dim_summary, model.dim_summary))
    for b, theta in enumerate(X):
        batch = simulate_batch(model, theta, m, rng)
        means[b] = batch.mean(axis=0)
        covs[b] = build_covariance(batch, spec, model, theta)
    return GPEmulator(center, half_width, X, means, covs, spec, m)


def gp_fit_and_gradient(emulator: GPEmulator, s_target, center=None, warm_start=True) -> np.ndarray:
    """Gradient at ``center`` of a GP fitted to log-likelihood responses for ``s_target``.

    The step for coordinate k is ``1e-4 * half_width[k]``.
    """
    center = emulator.center if center is None else np.asarray(center, dtype=float)
    y = emulator.responses(s_target)
    if not np.all(np.isfinite(y)):
        raise GPFitError(f"{int(np.sum(~np.isfinite(y)))} non-finite training responses")
    init = emulator._warm if warm_start else None
    gp = GaussianProcess().fit(emulator.inputs, y, init=init)
    if warm_start:
        emulator._warm = gp.hyper.copy()
    if np.ptp(y) == 0:
        return np.zeros(center.size)
    return gp.gradient_fd(center, 1e-4 * emulator.half_width)


def _omega_from(gradients) -> OmegaEstimate:
    g = np.asarray(gradients, dtype=float)
    return OmegaEstimate(sample_cov(g), g)


def estimate_omega_model_correct(model, center, J, emulator: GPEmulator, rng) -> OmegaEstimate:
    """Variance of log-likelihood gradients over summaries simulated at ``center``."""
    if J < model.dim_theta + 1:
        raise ValueError(f"need J >= {model.dim_theta + 1}")
    rng = as_generator(rng)
    center = model.check_theta(center)
    S = simulate_batch(model, center, J, rng)
    grads = np.array([gp_fit_and_gradient(emulator, s, center) for s in S])
    return _omega_from(grads)


def estimate_omega_bootstrap(data, summary_fn, center, J, emulator: GPEmulator, rng) -> OmegaEstimate:
    """As the model-correct variant but with summaries of i.i.d. bootstrap resamples of ``data``."""
    data = np.asarray(data)
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if J < center.size + 1:
        raise ValueError(f"need J >= {center.size + 1}")
    rng = as_generator(rng)
    n = len(data)
    S = [np.atleast_1d(summary_fn(data[rng.integers(0, n, size=n)])) for _ in range(J)]
    if all(np.array_equal(S[0], s) for s in S[1:]):
        d = center.size
        return OmegaEstimate(np.zeros((d, d)), np.zeros((J, d)))
    grads = np.array([gp_fit_and_gradient(emulator, s, center) for s in S])
    return _omega_from(grads)
