"""Experiment drivers, configuration handling and result files.

Every driver takes an :class:`ExperimentConfig` and returns a plain dict
summary. When ``config.out`` is set the driver also writes
``<out>/<experiment>/`` containing ``samples_*.csv``, ``summary.json`` and
``meta.json``. Outputs depend only on the configuration (seed included).
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, stats
from scipy.special import gammaln, logsumexp

from . import __version__
from .adjust import (
    adjust_samples,
    build_gp_emulator,
    estimate_omega_bootstrap,
    estimate_omega_model_correct,
    posterior_moments,
)
from .core import RngStream, spawn_stream
from .models import MA2Model, ToadModel, ToyModel
from .samplers import (
    GaussianProposal,
    WeightedSample,
    ess,
    importance_sample,
    pm_rw_mh,
    rejection_bsl,
)
from .synlik import CovarianceSpec

log = logging.getLogger(__name__)

EXPERIMENTS = ("toy-figure1", "ma2-coverage", "toad", "bvm-check", "acceptance-rate",
               "m-convergence", "sandwich-check", "sample")


class ConfigError(ValueError):
    """Invalid experiment configuration; messages name the offending ``section.key``."""


class InsufficientESSError(ValueError):
    pass


# --- configuration ---------------------------------------------------------

# (section, type) for every config field; tuples are comma-separated lists
_FIELDS = {
    "experiment": ("experiment", str),
    "seed": ("experiment", int),
    "replicates": ("experiment", int),
    "threads": ("experiment", int),
    "model": ("model", str),
    "n": ("model", int),
    "theta_true": ("model", "floats"),
    "n_ladder": ("model", "ints"),
    "m": ("sampler", int),
    "iterations": ("sampler", int),
    "pilot_iterations": ("sampler", int),
    "pilot_scale": ("sampler", "floats"),
    "burn_in": ("sampler", float),
    "importance_draws": ("sampler", int),
    "m_ladder": ("sampler", "ints"),
    "m_constant": ("sampler", int),
    "proposal_scale": ("sampler", float),
    "control_sd": ("sampler", float),
    "m_coefficient": ("sampler", float),
    "m_exponent": ("sampler", float),
    "sampler": ("sampler", str),
    "covariance": ("covariance", str),
    "gamma": ("covariance", float),
    "scale": ("covariance", float),
    "standard_m": ("covariance", int),
    "B": ("adjust", int),
    "J": ("adjust", int),
    "delta_multiplier": ("adjust", float),
    "emulator_m": ("adjust", int),
}


@dataclass
class ExperimentConfig:
    """All settings for one experiment run.

    Unused fields are ignored by a given experiment. ``out=None`` disables
    file output.
    """

    experiment: str
    seed: int
    out: str | None = None
    replicates: int = 1
    threads: int = 1
    model: str = "toy"
    n: int = 20
    theta_true: tuple = ()
    n_ladder: tuple = ()
    m: int = 200
    iterations: int = 50_000
    pilot_iterations: int = 2000
    pilot_scale: tuple = (1.0,)
    burn_in: float = 0.2
    importance_draws: int = 2000
    m_ladder: tuple = ()
    m_constant: int = 5
    proposal_scale: float = 3.0
    control_sd: float = 1.0
    m_coefficient: float = 2.0
    m_exponent: float = 1.0
    sampler: str = "mh"
    covariance: str = "full"
    gamma: float = 1.0
    scale: float = 1.0
    standard_m: int = 500
    B: int = 200
    J: int = 200
    delta_multiplier: float = 1.0
    emulator_m: int = 1000
    preset: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def spec(self) -> CovarianceSpec:
        return CovarianceSpec(self.covariance, gamma=self.gamma, scale=self.scale)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **kw) -> "ExperimentConfig":
        return validate(dataclasses.replace(self, **kw))


def _err(name, msg):
    section = _FIELDS.get(name, ("experiment",))[0]
    return ConfigError(f"{section}.{name}: {msg}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.experiment not in EXPERIMENTS:
        raise _err("experiment", f"unknown experiment {cfg.experiment!r}")
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**63:
        raise _err("seed", "seed must be a non-negative integer")
    if cfg.m < 2:
        raise _err("m", "m must be ≥ 2")
    if cfg.emulator_m < 2:
        raise _err("emulator_m", "m must be ≥ 2")
    if cfg.standard_m < 2:
        raise _err("standard_m", "m must be ≥ 2")
    if any(v < 2 for v in cfg.m_ladder):
        raise _err("m_ladder", "m must be ≥ 2")
    if not 0.0 <= cfg.gamma <= 1.0:
        raise _err("gamma", "shrinkage γ must lie in [0,1]")
    if cfg.covariance not in ("full", "shrinkage", "diagonal", "analytic"):
        raise _err("covariance", f"unknown covariance kind {cfg.covariance!r}")
    if cfg.scale <= 0:
        raise _err("scale", "scale must be positive")
    if cfg.model not in ("toy", "ma2", "toad"):
        raise _err("model", f"unknown model {cfg.model!r}")
    if cfg.sampler not in ("mh", "is"):
        raise _err("sampler", "sampler must be 'mh' or 'is'")
    for name in ("replicates", "threads", "n", "iterations", "pilot_iterations", "importance_draws"):
        if getattr(cfg, name) < 1:
            raise _err(name, f"{name} must be positive")
    if not 0.0 <= cfg.burn_in < 1.0:
        raise _err("burn_in", "burn_in must lie in [0,1)")
    if cfg.experiment == "ma2-coverage" and cfg.replicates < 30:
        raise _err("replicates", "coverage needs at least 30 replicate datasets")
    if cfg.J < 2:
        raise _err("J", "J must be ≥ 2")
    if cfg.B < 10:
        raise _err("B", "B must be ≥ 10")
    if cfg.delta_multiplier <= 0:
        raise _err("delta_multiplier", "delta_multiplier must be positive")
    return cfg


_PRESETS = {
    "toy-figure1": {
        "desk": dict(model="toy", n=20, m=200, iterations=50_000, covariance="analytic", scale=0.5,
                     B=200, J=200, emulator_m=1000),
    },
    "ma2-coverage": {
        "desk": dict(model="ma2", n=1000, theta_true=(0.6, 0.2), m=200, replicates=30,
                     importance_draws=2000, pilot_iterations=1000, pilot_scale=(0.03,)),
        "paper": dict(model="ma2", n=1000, theta_true=(0.6, 0.2), m=200, replicates=100,
                      importance_draws=10_000, pilot_iterations=2000, pilot_scale=(0.03,)),
    },
    "toad": {
        "desk": dict(model="toad", theta_true=(1.7, 35.0, 0.6), iterations=5000, m=50,
                     covariance="shrinkage", gamma=0.1, standard_m=500, pilot_iterations=2000,
                     pilot_scale=(0.02,), B=200, J=200, emulator_m=500),
        "paper": dict(model="toad", theta_true=(1.7, 35.0, 0.6), iterations=20_000, m=50,
                      covariance="shrinkage", gamma=0.1, standard_m=500, pilot_iterations=2000,
                      pilot_scale=(0.02,), B=200, J=200, emulator_m=500),
    },
    "bvm-check": {
        "desk": dict(model="toy", n_ladder=(1000, 4000, 5000), iterations=50_000,
                     covariance="analytic", scale=1.0),
    },
    "acceptance-rate": {
        "desk": dict(model="toy", n_ladder=(100, 400, 1600), importance_draws=20_000,
                     covariance="analytic", scale=1.0, m_coefficient=2.0, m_exponent=1.0,
                     proposal_scale=3.0, control_sd=1.0, m_constant=5),
    },
    "m-convergence": {
        "desk": dict(model="toy", n=100, m_ladder=(20, 40, 80, 160), replicates=20,
                     covariance="analytic", scale=1.0),
    },
    "sandwich-check": {
        "desk": dict(model="toy", n=200, replicates=500, covariance="analytic", scale=0.5),
    },
    "sample": {
        "desk": dict(model="toy", n=20, m=200, iterations=10_000, covariance="full"),
    },
}
# settings without a separate full-scale variant use the desk values
for _exp, _p in _PRESETS.items():
    _p.setdefault("paper", dict(_p["desk"]))


def preset_config(experiment, preset="desk", seed=1, out=None, **overrides) -> ExperimentConfig:
    if experiment not in _PRESETS:
        raise ConfigError(f"experiment.experiment: unknown experiment {experiment!r}")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"experiment.preset: unknown preset {preset!r}")
    kw = dict(_PRESETS[experiment][preset])
    kw.update(overrides)
    return validate(ExperimentConfig(experiment=experiment, seed=seed, out=out, preset=preset, **kw))


def _parse_value(name, raw, typ):
    try:
        if typ == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if typ == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise _err(name, f"cannot parse {raw!r}") from None


def load_config(path, experiment=None, preset=None, seed=None, out=None) -> ExperimentConfig:
    """Read an INI-style config file, layered over a preset.

    Sections are ``[experiment]``, ``[model]``, ``[sampler]``,
    ``[covariance]`` and ``[adjust]``. ``[experiment] preset`` selects the
    base values (default ``desk``).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key == "preset" and section == "experiment":
                continue
            if key not in _FIELDS or _FIELDS[key][0] != section:
                raise ConfigError(f"{section}.{key}: unknown setting")
            values[key] = _parse_value(key, raw, _FIELDS[key][1])
    exp = experiment or values.pop("experiment", None)
    values.pop("experiment", None)
    if exp is None:
        raise ConfigError("experiment.experiment: missing")
    if preset is None:
        preset = parser.get("experiment", "preset", fallback="desk").strip()
    if seed is None:
        if "seed" not in values:
            raise ConfigError("experiment.seed: missing (a seed is mandatory)")
        seed = values.pop("seed")
    else:
        values.pop("seed", None)
    return preset_config(exp, preset, seed=seed, out=out, **values)


# --- output helpers --------------------------------------------------------

def version_string() -> str:
    """``v<version>`` plus ``-g<short sha>`` when run from a git checkout."""
    base = f"v{__version__}"
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return base
    return f"{base}-g{sha}" if sha else base


def write_csv(path, data, header) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_svg_lines(path, x, curves: dict, title="", width=640, height=400) -> Path:
    """Minimal SVG line plot of several curves sharing one x grid."""
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in curves.items()}
    ymax = max(float(np.max(v)) for v in ys.values()) or 1.0
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def px(v):
        return pad + (v - x[0]) / (x[-1] - x[0]) * (width - 2 * pad)

    def py(v):
        return height - pad - v / ymax * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - 15}" font-size="11">{x[0]:.3g}</text>',
        f'<text x="{width - pad}" y="{height - 15}" font-size="11" text-anchor="end">{x[-1]:.3g}</text>',
    ]
    for i, (name, y) in enumerate(ys.items()):
        c = colors[i % len(colors)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 5}" y="{40 + 16 * i}" font-size="12" fill="{c}" '
                     f'text-anchor="end">{name}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
    return path


def kde_grid(samples: dict, n_grid=512, extra_range=()):
    """Gaussian KDE (Silverman bandwidth) of 1-d samples on a shared grid."""
    kdes = {k: stats.gaussian_kde(np.asarray(v, dtype=float).ravel(), bw_method="silverman")
            for k, v in samples.items()}
    lo = min(float(np.min(v)) for v in samples.values())
    hi = max(float(np.max(v)) for v in samples.values())
    if len(extra_range):
        lo, hi = min(lo, extra_range[0]), max(hi, extra_range[1])
    pad = 0.1 * (hi - lo)
    grid = np.linspace(lo - pad, hi + pad, n_grid)
    return grid, {k: kde(grid) for k, kde in kdes.items()}


def kde_grid_2d(x, y, n_grid=64):
    kde = stats.gaussian_kde(np.vstack([x, y]), bw_method="silverman")
    gx = np.linspace(np.min(x), np.max(x), n_grid)
    gy = np.linspace(np.min(y), np.max(y), n_grid)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    Z = kde(np.vstack([X.ravel(), Y.ravel()]))
    return np.column_stack([X.ravel(), Y.ravel(), Z])


class _Output:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out) / cfg.experiment if cfg.out else None
        self.paths = []

    def csv(self, name, data, header):
        if self.dir is not None:
            self.paths.append(write_csv(self.dir / name, data, header))

    def svg(self, name, *args, **kw):
        if self.dir is not None:
            self.paths.append(write_svg_lines(self.dir / name, *args, **kw))

    def finish(self, summary):
        if self.dir is not None:
            self.paths.append(write_json(self.dir / "summary.json", summary))
            meta = {"config": self.cfg.to_dict(), "version": version_string()}
            meta["config"].pop("out", None)
            self.paths.append(write_json(self.dir / "meta.json", meta))
        summary = dict(summary)
        summary["outputs"] = [str(p) for p in self.paths]
        return summary


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --- intervals -------------------------------------------------------------

@dataclass(frozen=True)
class CredibleInterval:
    lo: float
    hi: float
    level: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("interval lower end exceeds upper end")

    def contains(self, x) -> bool:
        return self.lo <= x <= self.hi


def weighted_quantile(x, probs, weights=None) -> np.ndarray:
    """Quantiles from the piecewise-linear CDF through the weight midpoints."""
    x = np.asarray(x, dtype=float).ravel()
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order] / w.sum()
    cdf = np.cumsum(w) - 0.5 * w
    return np.interp(probs, cdf, x)


def credible_interval(samples, level, weights=None, min_ess=50) -> CredibleInterval:
    """Equal-tailed interval from (weighted) 1-d samples."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    x = np.asarray(samples, dtype=float).ravel()
    if weights is None:
        n_eff = float(x.size)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        n_eff = float(w.sum() ** 2 / np.sum(w * w))
    if n_eff < min_ess:
        raise InsufficientESSError(f"effective sample size {n_eff:.1f} below {min_ess}")
    a = (1.0 - level) / 2.0
    lo, hi = weighted_quantile(x, [a, 1.0 - a], weights)
    return CredibleInterval(float(lo), float(hi), level)


# --- toy-model quadrature ----------------------------------------------------

def _toy_grid(s, n, scale, prior_shape, prior_rate, n_grid):
    w = math.sqrt(max(s, 1e-3) * max(scale, 1.0) / n)
    lo = max(s - 16 * w, 1e-9)
    hi = s + 16 * w + 1e-9
    return np.linspace(lo, hi, n_grid)


def toy_log_posterior_kernel(theta, s, n, scale=1.0, m=None, prior_shape=2.0, prior_rate=0.5):
    """Unnormalized log posterior of the toy model on a grid of theta values.

    ``m=None`` gives the idealized synthetic likelihood N(s; theta, scale*theta/n).
    An integer ``m`` gives the expected estimated likelihood when the mean
    is the average of ``m`` simulated summaries: a Poisson(n m theta)
    mixture of normals.
    """
    theta = np.asarray(theta, dtype=float)
    lp = (prior_shape - 1) * np.log(theta) - prior_rate * theta
    var = scale * theta / n
    if m is None:
        return lp - 0.5 * np.log(2 * np.pi * var) - 0.5 * (s - theta) ** 2 / var
    out = np.empty_like(theta)
    nm = n * m
    for i, (t, v) in enumerate(zip(theta, var)):
        lam = nm * t
        half = 12.0 * math.sqrt(lam) + 20.0
        k = np.arange(max(0, int(lam - half)), int(lam + half) + 1, dtype=float)
        log_pois = k * math.log(lam) - lam - gammaln(k + 1)
        log_norm = -0.5 * math.log(2 * math.pi * v) - 0.5 * (s - k / nm) ** 2 / v
        out[i] = logsumexp(log_pois + log_norm)
    return lp + out


def toy_posterior_moments(s, n, scale=1.0, m=None, n_grid=801, prior_shape=2.0, prior_rate=0.5):
    """Posterior mean and sd of the toy synthetic likelihood posterior by Simpson quadrature."""
    grid = _toy_grid(s, n, scale, prior_shape, prior_rate, n_grid)
    lk = toy_log_posterior_kernel(grid, s, n, scale, m, prior_shape, prior_rate)
    dens = np.exp(lk - lk.max())
    z = integrate.simpson(dens, x=grid)
    mean = integrate.simpson(grid * dens, x=grid) / z
    var = integrate.simpson((grid - mean) ** 2 * dens, x=grid) / z
    return float(mean), float(math.sqrt(var))


def toy_posterior_moments_quad(s, n, scale=1.0, prior_shape=2.0, prior_rate=0.5):
    """Idealized posterior moments by adaptive quadrature (independent check of the grid rule)."""
    grid = _toy_grid(s, n, scale, prior_shape, prior_rate, 3)
    lo, hi = grid[0], grid[-1]
    peak = float(np.max(toy_log_posterior_kernel(np.linspace(lo, hi, 201), s, n, scale)))

    def f(t, p):
        return t**p * math.exp(float(toy_log_posterior_kernel(np.array([t]), s, n, scale)[0]) - peak)

    opts = dict(epsabs=0, epsrel=1e-12, limit=200, points=[s])
    z = integrate.quad(f, lo, hi, args=(0,), **opts)[0]
    m1 = integrate.quad(f, lo, hi, args=(1,), **opts)[0] / z
    m2 = integrate.quad(f, lo, hi, args=(2,), **opts)[0] / z
    return m1, math.sqrt(m2 - m1 * m1)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# --- experiments -----------------------------------------------------------

def _pilot_cov(kept, fallback):
    """Covariance of pilot draws, or ``fallback`` when the pilot barely moved."""
    cov = np.atleast_2d(np.cov(kept.T))
    w = np.linalg.eigvalsh(cov)
    if w.max() <= 0 or w.min() <= 1e-10 * w.max():
        log.warning("pilot chain covariance is singular; using the pilot random-walk covariance")
        return np.atleast_2d(np.asarray(fallback, dtype=float))
    return cov


def _pilot_then_chain(model, s_obs, m, spec, init, cfg, root, pilot_rw, idealized=False):
    """Pilot chain, then a chain with random-walk covariance 2.38^2/d times the pilot covariance."""
    d = model.dim_theta
    pilot = pm_rw_mh(model, s_obs, m, spec, init, pilot_rw, cfg.pilot_iterations,
                     spawn_stream(root, 1), idealized=idealized)
    kept = pilot.burned(0.5)
    rw = 2.38**2 / d * _pilot_cov(kept, pilot_rw)
    chain = pm_rw_mh(model, s_obs, m, spec, kept.mean(axis=0), rw, cfg.iterations,
                     spawn_stream(root, 2), idealized=idealized)
    return pilot, chain


def run_toy_figure1(cfg: ExperimentConfig) -> dict:
    """Misspecified, exact, adjusted and bootstrap-adjusted toy posteriors."""
    root = RngStream(cfg.seed)
    model = ToyModel(cfg.n)
    data = model.generate_data(spawn_stream(root, 0))
    s_obs = model.summary(data)
    spec = cfg.spec
    pilot_rw = np.atleast_2d(float(s_obs[0]) / cfg.n)
    pilot, chain = _pilot_then_chain(model, s_obs, cfg.m, spec, s_obs, cfg, root, pilot_rw)
    draws = chain.burned(cfg.burn_in)
    mom = posterior_moments(draws)
    emulator = build_gp_emulator(model, mom.mean, cfg.delta_multiplier * mom.sd, cfg.B,
                                 cfg.emulator_m, spec, spawn_stream(root, 3))
    om_c = estimate_omega_model_correct(model, mom.mean, cfg.J, emulator, spawn_stream(root, 4))
    om_b = estimate_omega_bootstrap(data, model.summary, mom.mean, cfg.J, emulator,
                                    spawn_stream(root, 5))
    adj_c = adjust_samples(draws, mom, om_c)
    adj_b = adjust_samples(draws, mom, om_b)
    shape, rate = model.exact_posterior(data)

    def moments(x):
        return {"mean": float(np.mean(x)), "sd": float(np.std(x, ddof=1))}

    summary = {
        "n": cfg.n,
        "s_obs": float(s_obs[0]),
        "acceptance_rate": chain.acceptance_rate,
        "bslm": moments(draws),
        "exact": {"mean": shape / rate, "sd": math.sqrt(shape) / rate, "shape": shape, "rate": rate},
        "adjusted": moments(adj_c.adjusted),
        "bootstrap_adjusted": moments(adj_b.adjusted),
        "omega_model_correct": float(om_c.omega[0, 0]),
        "omega_bootstrap": float(om_b.omega[0, 0]),
        "gamma_bar": float(mom.cov[0, 0]),
    }
    out = _Output(cfg)
    if out.dir is not None:
        out.csv("samples_bsl.csv", draws, ["theta"])
        out.csv("samples_adjusted.csv", np.column_stack([draws, adj_c.adjusted]),
                ["theta", "theta_adjusted"])
        out.csv("samples_bootstrap.csv", np.column_stack([draws, adj_b.adjusted]),
                ["theta", "theta_adjusted"])
        out.csv("gradients.csv", np.column_stack([om_c.gradients, om_b.gradients]),
                ["model_correct", "bootstrap"])
        ex = stats.gamma(shape, scale=1.0 / rate)
        grid, dens = kde_grid({"bsl": draws, "adjusted": adj_c.adjusted,
                               "bootstrap": adj_b.adjusted}, extra_range=ex.ppf([1e-4, 1 - 1e-4]))
        dens["exact"] = ex.pdf(grid)
        cols = ["exact", "bsl", "adjusted", "bootstrap"]
        out.csv("density.csv", np.column_stack([grid] + [dens[c] for c in cols]), ["theta"] + cols)
        out.svg("figure1.svg", grid, {c: dens[c] for c in cols}, title="toy posterior densities")
    return out.finish(summary)


def _coverage_one(cfg, root, index, model, levels):
    rs = spawn_stream(root, index)
    data_rng = spawn_stream(rs, 0).generator()
    s_obs = model.simulate_summary(np.asarray(cfg.theta_true), data_rng)
    spec = cfg.spec
    d = model.dim_theta
    scale = np.broadcast_to(np.asarray(cfg.pilot_scale, dtype=float), (d,))
    pilot = pm_rw_mh(model, s_obs, cfg.m, spec, cfg.theta_true, np.diag(scale**2),
                     cfg.pilot_iterations, spawn_stream(rs, 1))
    kept = pilot.burned(0.5)
    proposal = GaussianProposal(kept.mean(axis=0), 2.0 * _pilot_cov(kept, np.diag(scale**2)))
    N = cfg.importance_draws
    ws = importance_sample(model, s_obs, cfg.m, spec, proposal, N, spawn_stream(rs, 2))
    reran = False
    if ws.ess < 100:
        reran = True
        ws = importance_sample(model, s_obs, cfg.m, spec, proposal, 2 * N, spawn_stream(rs, 3))
    if ws.ess < 100:
        return {"index": index, "excluded": True, "ess": ws.ess, "reran": reran}
    w = ws.weights
    covered = np.zeros((len(levels), d), dtype=bool)
    for a, lev in enumerate(levels):
        for k in range(d):
            ci = credible_interval(ws.draws[:, k], lev, weights=w)
            covered[a, k] = ci.contains(cfg.theta_true[k])
    return {"index": index, "excluded": False, "ess": ws.ess, "reran": reran,
            "covered": covered, "mean": ws.mean(), "pilot_acceptance": pilot.acceptance_rate}


def run_ma2_coverage(cfg: ExperimentConfig) -> dict:
    """Coverage of importance-sampling BSL credible intervals over replicate MA(2) datasets."""
    levels = (0.95, 0.90, 0.80)
    model = MA2Model(cfg.n)
    root = RngStream(cfg.seed)
    results = _map(lambda i: _coverage_one(cfg, root, i, model, levels), range(cfg.replicates),
                   cfg.threads)
    used = [r for r in results if not r["excluded"]]
    n_excl = len(results) - len(used)
    if n_excl:
        log.warning("%d of %d datasets excluded for ESS < 100", n_excl, len(results))
    counts = np.sum([r["covered"] for r in used], axis=0) if used else np.zeros((3, 2))
    R = len(used)
    table = {
        "method": "BSL", "n": cfg.n, "m": cfg.m, "R": R, "excluded": n_excl,
        "levels": list(levels),
        "covered": counts.astype(int).tolist(),
        "coverage": (counts / max(R, 1)).tolist(),
    }
    summary = {
        "coverage_table": table,
        "ess": [float(r["ess"]) for r in results],
        "reran": int(sum(r["reran"] for r in results)),
        "theta_true": list(cfg.theta_true),
    }
    out = _Output(cfg)
    if used:
        out.csv("samples_posterior_means.csv", np.array([r["mean"] for r in used]),
                list(model.param_names))
        rows = [[r["index"]] + r["covered"].astype(float).ravel().tolist() for r in used]
        hdr = ["dataset"] + [f"cover{int(100 * l)}_{p}" for l in levels for p in model.param_names]
        out.csv("coverage_indicators.csv", rows, hdr)
    return out.finish(summary)


def _moment_stats(x):
    z = (x - x.mean()) / x.std(ddof=1)
    probs = (np.arange(1, 200) - 0.5) / 199
    qq = np.max(np.abs(np.quantile(z, probs) - stats.norm.ppf(probs)))
    return {"mean": float(x.mean()), "sd": float(x.std(ddof=1)), "skewness": float(stats.skew(x)),
            "excess_kurtosis": float(stats.kurtosis(x)), "qq_max_deviation": float(qq)}


def run_bvm_diagnostic(cfg: ExperimentConfig) -> dict:
    """Normality of the idealized toy posterior over a ladder of sample sizes."""
    root = RngStream(cfg.seed)
    spec = cfg.spec
    rows = {}
    samples = {}
    for idx, n in enumerate(cfg.n_ladder):
        model = ToyModel(n)
        rs = spawn_stream(root, idx)
        s_obs = model.summary(model.generate_data(spawn_stream(rs, 0)))
        pilot_rw = np.atleast_2d(float(s_obs[0]) / n)
        _, chain = _pilot_then_chain(model, s_obs, cfg.m, spec, s_obs, cfg, rs, pilot_rw,
                                     idealized=True)
        x = chain.burned(cfg.burn_in)[:, 0]
        stats_n = _moment_stats(x)
        stats_n["acceptance_rate"] = chain.acceptance_rate
        stats_n["s_obs"] = float(s_obs[0])
        stats_n["sampling_se"] = math.sqrt(10.0 / n)
        rows[str(n)] = stats_n
        samples[n] = x
    summary = {"ladder": list(cfg.n_ladder), "results": rows}
    ladder = list(cfg.n_ladder)
    pairs = [(a, b) for a in ladder for b in ladder if b == 4 * a]
    summary["sd_ratios"] = {f"{b}/{a}": rows[str(b)]["sd"] / rows[str(a)]["sd"] for a, b in pairs}
    out = _Output(cfg)
    for n, x in samples.items():
        out.csv(f"samples_n{n}.csv", x, ["theta"])
    return out.finish(summary)


def toy_rejection_bound(s_obs, n) -> float:
    """log of 1/sqrt(2 pi theta/n) at theta = s_obs/2.

    Bounds the analytic-covariance toy likelihood estimate whenever
    theta >= s_obs/2, which a proposal centred at s_obs with sd of order
    n^(-1/2) essentially never leaves.
    """
    return 0.5 * math.log(n) - 0.5 * math.log(2 * math.pi * s_obs / 2.0)


def run_acceptance_experiment(cfg: ExperimentConfig) -> dict:
    """Rejection-sampler acceptance rates for shrinking and fixed proposals."""
    root = RngStream(cfg.seed)
    spec = cfg.spec
    ladder = list(cfg.n_ladder)
    res = {"shrinking": {}, "fixed": {}, "constant_m": {}}
    m_of_n = {}
    for idx, n in enumerate(ladder):
        model = ToyModel(n)
        rs = spawn_stream(root, idx)
        s = model.summary(model.generate_data(spawn_stream(rs, 0)))
        mn = int(math.ceil(cfg.m_coefficient * n ** (cfg.m_exponent / 2.0)))
        m_of_n[str(n)] = mn
        bound = toy_rejection_bound(float(s[0]), n)
        sd_shrink = cfg.proposal_scale * math.sqrt(float(s[0])) / math.sqrt(n)
        runs = {
            "shrinking": (mn, sd_shrink),
            "fixed": (mn, cfg.control_sd),
            "constant_m": (cfg.m_constant, sd_shrink),
        }
        for j, (name, (m, sd)) in enumerate(runs.items()):
            prop = GaussianProposal(s, np.atleast_2d(sd**2))
            r = rejection_bsl(model, s, m, spec, prop, bound, cfg.importance_draws,
                              spawn_stream(rs, 1 + j))
            res[name][str(n)] = {"rate": r.acceptance_rate, "m": m, "proposal_sd": sd,
                                 "accepted": int(len(r.draws)), "max_log_lik_minus_bound": r.max_log_lik - bound}
    summary = {"ladder": ladder, "m_of_n": m_of_n, "results": res}
    for name in res:
        rates = [res[name][str(n)]["rate"] for n in ladder]
        summary[f"{name}_ratio"] = max(rates) / min(rates) if min(rates) > 0 else float("inf")
        summary[f"{name}_slope"] = loglog_slope(ladder, rates) if min(rates) > 0 else float("-inf")
    out = _Output(cfg)
    rows = [[n] + [res[k][str(n)]["rate"] for k in res] for n in ladder]
    out.csv("samples_rates.csv", rows, ["n"] + list(res))
    return out.finish(summary)


def run_m_convergence(cfg: ExperimentConfig) -> dict:
    """Distance between estimated and idealized toy posteriors as m grows.

    Both posteriors are computed by quadrature; the estimated one uses the
    exact expectation of the likelihood estimate over the simulated mean.
    """
    root = RngStream(cfg.seed)
    model = ToyModel(cfg.n)
    ladder = list(cfg.m_ladder)

    def one(i):
        s = float(model.summary(model.generate_data(spawn_stream(root, i)))[0])
        ideal = toy_posterior_moments(s, cfg.n, cfg.scale)
        check = toy_posterior_moments_quad(s, cfg.n, cfg.scale)
        rows = []
        for m in ladder:
            est = toy_posterior_moments(s, cfg.n, cfg.scale, m=m)
            rows.append((abs(est[0] - ideal[0]), abs(est[1] - ideal[1])))
        control = max(abs(ideal[0] - check[0]), abs(ideal[1] - check[1]))
        return s, np.array(rows), control

    results = _map(one, range(cfg.replicates), cfg.threads)
    disc = np.array([r[1] for r in results])  # (R, len(ladder), 2)
    mean_disc = disc.mean(axis=0)
    summary = {
        "ladder": ladder,
        "replicates": cfg.replicates,
        "mean_discrepancy": mean_disc[:, 0].tolist(),
        "sd_discrepancy": mean_disc[:, 1].tolist(),
        "slope_mean": loglog_slope(ladder, mean_disc[:, 0]),
        "slope_sd": loglog_slope(ladder, mean_disc[:, 1]),
        "control_max": float(max(r[2] for r in results)),
    }
    out = _Output(cfg)
    out.csv("samples_discrepancy.csv", np.column_stack([ladder, mean_disc]),
            ["m", "mean_discrepancy", "sd_discrepancy"])
    return out.finish(summary)


def run_sandwich_check(cfg: ExperimentConfig) -> dict:
    """Sampling variance of the idealized toy posterior mean over replicate datasets."""
    root = RngStream(cfg.seed)
    model = ToyModel(cfg.n)

    def one(i):
        s = float(model.summary(model.generate_data(spawn_stream(root, i)))[0])
        return toy_posterior_moments(s, cfg.n, cfg.scale)[0]

    means = np.array(_map(one, range(cfg.replicates), cfg.threads))
    summary = {"n": cfg.n, "replicates": cfg.replicates, "scale": cfg.scale,
               "n_times_variance": float(cfg.n * np.var(means, ddof=1)),
               "target": 10.0, "mean_of_means": float(means.mean())}
    out = _Output(cfg)
    out.csv("samples_posterior_means.csv", means, ["posterior_mean"])
    return out.finish(summary)


def run_toad_study(cfg: ExperimentConfig) -> dict:
    """Standard, shrinkage and adjusted BSL posteriors for one simulated toad dataset."""
    root = RngStream(cfg.seed)
    model = ToadModel()
    theta0 = np.asarray(cfg.theta_true, dtype=float)
    s_obs = model.simulate_summary(theta0, spawn_stream(root, 0))
    shrink = cfg.spec
    widths = model.upper - model.lower
    scale = np.broadcast_to(np.asarray(cfg.pilot_scale, dtype=float), (3,))
    pilot = pm_rw_mh(model, s_obs, cfg.m, shrink, theta0, np.diag((scale * widths) ** 2),
                     cfg.pilot_iterations, spawn_stream(root, 1))
    kept = pilot.burned(0.5)
    rw = 2.38**2 / 3 * _pilot_cov(kept, np.diag((scale * widths) ** 2))
    start = kept.mean(axis=0)
    ch_shrink = pm_rw_mh(model, s_obs, cfg.m, shrink, start, rw, cfg.iterations, spawn_stream(root, 2))
    ch_std = pm_rw_mh(model, s_obs, cfg.standard_m, CovarianceSpec.full(), start, rw, cfg.iterations,
                      spawn_stream(root, 3))
    d_shrink = ch_shrink.burned(cfg.burn_in)
    d_std = ch_std.burned(cfg.burn_in)
    mom = posterior_moments(d_shrink)
    emulator = build_gp_emulator(model, mom.mean, cfg.delta_multiplier * mom.sd, cfg.B,
                                 cfg.emulator_m, shrink, spawn_stream(root, 4))
    omega = estimate_omega_model_correct(model, mom.mean, cfg.J, emulator, spawn_stream(root, 5))
    adj = adjust_samples(d_shrink, mom, omega)

    def describe(x, chain=None):
        r = {"mean": x.mean(axis=0).tolist(), "sd": x.std(axis=0, ddof=1).tolist()}
        if chain is not None:
            r["acceptance_rate"] = chain.acceptance_rate
            r["failed_simulations"] = chain.n_failed
        return r

    summary = {
        "theta_true": theta0.tolist(),
        "pilot_acceptance_rate": pilot.acceptance_rate,
        "standard": describe(d_std, ch_std),
        "shrinkage": describe(d_shrink, ch_shrink),
        "adjusted": describe(adj.adjusted),
        "omega": omega.omega.tolist(),
    }
    out = _Output(cfg)
    names = list(model.param_names)
    out.csv("samples_standard.csv", d_std, names)
    out.csv("samples_shrinkage.csv", d_shrink, names)
    out.csv("samples_adjusted.csv", adj.adjusted, names)
    if out.dir is not None:
        for a, b in ((0, 1), (0, 2), (1, 2)):
            blocks = []
            for k, x in enumerate((d_std, d_shrink, adj.adjusted)):
                g = kde_grid_2d(x[:, a], x[:, b])
                blocks.append(np.column_stack([np.full(len(g), k), g]))
            out.csv(f"density_{names[a]}_{names[b]}.csv", np.vstack(blocks),
                    ["method", names[a], names[b], "density"])
    return out.finish(summary)


def _make_model(cfg):
    if cfg.model == "toy":
        return ToyModel(cfg.n)
    if cfg.model == "ma2":
        return MA2Model(cfg.n)
    return ToadModel()


def default_theta(model_name):
    return {"toy": (5.0,), "ma2": (0.6, 0.2), "toad": (1.7, 35.0, 0.6)}[model_name]


def run_sample(cfg: ExperimentConfig) -> dict:
    """Ad-hoc posterior sampling for simulated data from one of the bundled models."""
    root = RngStream(cfg.seed)
    model = _make_model(cfg)
    theta0 = np.asarray(cfg.theta_true or default_theta(cfg.model), dtype=float)
    if cfg.model == "toy":
        s_obs = model.summary(model.generate_data(spawn_stream(root, 0)))
    else:
        s_obs = model.simulate_summary(theta0, spawn_stream(root, 0))
    spec = cfg.spec
    d = model.dim_theta
    scale = np.broadcast_to(np.asarray(cfg.pilot_scale, dtype=float), (d,))
    if cfg.model == "toad":
        scale = scale * (model.upper - model.lower)
    pilot = pm_rw_mh(model, s_obs, cfg.m, spec, theta0, np.diag(scale**2), cfg.pilot_iterations,
                     spawn_stream(root, 1))
    kept = pilot.burned(0.5)
    out = _Output(cfg)
    names = list(model.param_names)
    if cfg.sampler == "mh":
        rw = 2.38**2 / d * _pilot_cov(kept, np.diag(scale**2))
        chain = pm_rw_mh(model, s_obs, cfg.m, spec, kept.mean(axis=0), rw, cfg.iterations,
                         spawn_stream(root, 2))
        x = chain.burned(cfg.burn_in)
        summary = {"sampler": "mh", "acceptance_rate": chain.acceptance_rate,
                   "mean": x.mean(axis=0).tolist(), "sd": x.std(axis=0, ddof=1).tolist()}
        out.csv("samples_posterior.csv", x, names)
    else:
        prop = GaussianProposal(kept.mean(axis=0), 2.0 * _pilot_cov(kept, np.diag(scale**2)))
        ws = importance_sample(model, s_obs, cfg.m, spec, prop, cfg.importance_draws,
                               spawn_stream(root, 2))
        summary = {"sampler": "is", "ess": ws.ess, "mean": ws.mean().tolist(),
                   "sd": np.sqrt(np.diag(ws.cov())).tolist()}
        out.csv("samples_posterior.csv", np.column_stack([ws.draws, ws.log_weights]),
                names + ["log_weight"])
    summary.update({"model": cfg.model, "m": cfg.m, "covariance": str(spec)})
    return out.finish(summary)


RUNNERS = {
    "toy-figure1": run_toy_figure1,
    "ma2-coverage": run_ma2_coverage,
    "toad": run_toad_study,
    "bvm-check": run_bvm_diagnostic,
    "acceptance-rate": run_acceptance_experiment,
    "m-convergence": run_m_convergence,
    "sandwich-check": run_sandwich_check,
    "sample": run_sample,
}


def run_experiment(cfg: ExperimentConfig) -> dict:
    return RUNNERS[cfg.experiment](validate(cfg))


__all__ = [
    "ConfigError", "CredibleInterval", "ExperimentConfig", "InsufficientESSError", "RUNNERS",
    "WeightedSample", "credible_interval", "ess", "load_config", "preset_config", "read_csv",
    "run_acceptance_experiment", "run_bvm_diagnostic", "run_experiment", "run_m_convergence",
    "run_ma2_coverage", "run_sample", "run_sandwich_check", "run_toad_study", "run_toy_figure1",
    "toy_posterior_moments", "validate", "weighted_quantile", "write_csv", "write_json",
]
