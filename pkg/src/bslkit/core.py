"""Shared types, the simulator interface, RNG streams and symmetric matrix roots."""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np


class BSLError(Exception):
    """Base class for all package errors."""


class SupportError(BSLError, ValueError):
    """Parameter lies outside the model's prior support."""


class DegenerateSummaryError(BSLError):
    """A summary statistic cannot be computed or has zero spread."""


class SingularCovarianceError(BSLError, np.linalg.LinAlgError):
    """Singular posterior covariance."""


class NotPSDError(BSLError, ValueError):
    """Matrix is not symmetric positive semi-definite."""


_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Draws come from a Philox generator keyed by the pair, so equal pairs
    reproduce equal sequences and different ids are independent streams.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def spawn(self, index: int) -> "RngStream":
        return spawn_stream(self, index)


def spawn_stream(root: RngStream, index: int) -> RngStream:
    """Deterministic child stream of ``root`` for replicate ``index``."""
    if index < 0:
        raise ValueError("index must be non-negative")
    ss = np.random.SeedSequence([root.seed, root.stream_id, index, 0x5B5])
    child = int(ss.generate_state(1, dtype=np.uint64)[0])
    return RngStream(root.seed, child)


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an RngStream or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


class SimulatorModel(abc.ABC):
    """A parametric model we can simulate summary statistics from.

    Subclasses set ``dim_theta``, ``dim_summary`` and ``n`` and implement the
    simulator and prior. Models with closed-form summary moments override
    :meth:`analytic_mean` and :meth:`analytic_cov`.
    """

    dim_theta: int
    dim_summary: int
    n: int
    param_names: tuple[str, ...] = ()

    @abc.abstractmethod
    def simulate_summary(self, theta, rng) -> np.ndarray:
        ...

    def simulate_batch(self, theta, m: int, rng) -> np.ndarray:
        rng = as_generator(rng)
        return np.stack([self.simulate_summary(theta, rng) for _ in range(m)])

    @abc.abstractmethod
    def support(self, theta) -> bool:
        ...

    @abc.abstractmethod
    def _log_prior(self, theta) -> float:
        ...

    def prior_log_density(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if not self.support(theta):
            return -np.inf
        return float(self._log_prior(theta))

    @abc.abstractmethod
    def prior_sample(self, rng) -> np.ndarray:
        ...

    @property
    def has_analytic(self) -> bool:
        return False

    def analytic_mean(self, theta) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no analytic summary mean")

    def analytic_cov(self, theta) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no analytic summary covariance")

    def check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.dim_theta,):
            raise ValueError(f"theta must have length {self.dim_theta}, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        return theta


def _check_symmetric(M, rtol=1e-12):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotPSDError(f"expected a square matrix, got shape {M.shape}")
    scale = max(np.abs(M).max(), np.finfo(float).tiny)
    if np.abs(M - M.T).max() > rtol * scale:
        raise NotPSDError("matrix is not symmetric")
    return 0.5 * (M + M.T)


def sym_sqrt(M) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues are clamped at zero; anything below ``-1e-10 * lambda_max``
    is treated as a genuine indefinite input.
    """
    M = _check_symmetric(M)
    w, V = np.linalg.eigh(M)
    lmax = max(w.max(), 0.0)
    if w.min() < -1e-10 * lmax or (lmax == 0.0 and w.min() < 0.0):
        raise NotPSDError(f"matrix has eigenvalue {w.min():.3g} < 0")
    w = np.clip(w, 0.0, None)
    S = (V * np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def sym_inv_sqrt(M) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    M = _check_symmetric(M)
    w, V = np.linalg.eigh(M)
    lmax = w.max()
    if lmax <= 0.0 or w.min() <= 1e-12 * lmax:
        raise SingularCovarianceError(
            f"singular posterior covariance (eigenvalues {w.min():.3g}..{lmax:.3g})"
        )
    T = (V / np.sqrt(w)) @ V.T
    return 0.5 * (T + T.T)


def clamp_psd(M) -> np.ndarray:
    """Symmetrize and clamp negative eigenvalues to zero."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    if w.min() >= 0.0:
        return M
    out = (V * np.clip(w, 0.0, None)) @ V.T
    return 0.5 * (out + out.T)


def check_psd(M, rtol=1e-12, eig_tol=1e-10) -> np.ndarray:
    M = _check_symmetric(M, rtol)
    w = np.linalg.eigvalsh(M)
    if w.min() < -eig_tol * max(w.max(), 0.0):
        raise NotPSDError(f"matrix has eigenvalue {w.min():.3g} < 0")
    return M
