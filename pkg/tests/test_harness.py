import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bslkit.harness import (
    ConfigError,
    InsufficientESSError,
    credible_interval,
    load_config,
    preset_config,
    read_csv,
    run_experiment,
    toy_log_posterior_kernel,
    toy_posterior_moments,
    toy_posterior_moments_quad,
    weighted_quantile,
    write_csv,
)


def test_interval_uniform(rng):
    ci = credible_interval(rng.random(100_000), 0.8)
    assert abs(ci.lo - 0.1) < 0.005 and abs(ci.hi - 0.9) < 0.005


def test_interval_point_mass():
    ci = credible_interval(np.full(100, 3.0), 0.9)
    assert ci.lo == ci.hi == 3.0


def test_interval_normal(rng):
    ci = credible_interval(rng.standard_normal(100_000), 0.95)
    assert abs(ci.lo + 1.96) < 0.03 and abs(ci.hi - 1.96) < 0.03


def test_interval_weighted_and_ess(rng):
    x = rng.standard_normal(2000)
    w = np.exp(-0.5 * x**2)  # reweights N(0,1) to N(0,1/2)
    ci = credible_interval(x, 0.95, weights=w)
    assert abs(ci.hi - 1.96 / np.sqrt(2)) < 0.1
    with pytest.raises(InsufficientESSError):
        credible_interval(np.arange(10.0), 0.9)
    lopsided = np.r_[1.0, np.full(99, 1e-9)]
    with pytest.raises(InsufficientESSError):
        credible_interval(np.arange(100.0), 0.9, weights=lopsided)


def test_weighted_quantile_equal_weights(rng):
    x = rng.standard_normal(501)
    p = [0.05, 0.5, 0.95]
    assert np.allclose(weighted_quantile(x, p), weighted_quantile(x, p, np.full(501, 3.0)))
    assert np.isclose(weighted_quantile(x, [0.5])[0], np.median(x))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
                  elements=st.floats(-1e300, 1e300, allow_nan=False)))
@settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_csv_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("csv") / "x.csv"
    header = [f"c{k}" for k in range(arr.shape[1])]
    write_csv(path, arr, header)
    h, back = read_csv(path)
    assert h == header
    assert np.array_equal(back, arr)


def test_toy_quadrature_dual_route():
    for s, n, scale in ((5.35, 20, 1.0), (4.1, 200, 0.5), (5.0, 5000, 1.0)):
        a = toy_posterior_moments(s, n, scale)
        b = toy_posterior_moments_quad(s, n, scale)
        assert np.allclose(a, b, rtol=0, atol=1e-8)


def test_toy_mixture_converges_to_idealized():
    s, n = 5.2, 100
    ideal = toy_posterior_moments(s, n)
    d = [abs(toy_posterior_moments(s, n, m=m)[0] - ideal[0]) for m in (10, 100, 1000)]
    assert d[0] > d[1] > d[2]
    # the Poisson mixture is close to a normal with inflated variance theta (1 + 1/m) / n
    t = np.linspace(4.5, 6, 7)
    mix = toy_log_posterior_kernel(t, s, n, m=400)
    approx = toy_log_posterior_kernel(t, s, n, scale=1 + 1 / 400)
    assert np.allclose(mix - mix[0], approx - approx[0], atol=1e-3)


def write_cfg(tmp_path, text):
    p = tmp_path / "exp.ini"
    p.write_text(text)
    return p


def test_config_round_trip(tmp_path):
    p = write_cfg(tmp_path, """
[experiment]
experiment = ma2-coverage
preset = paper
seed = 11
[sampler]
m = 200
importance_draws = 10000
""")
    cfg = load_config(p)
    assert cfg.experiment == "ma2-coverage" and cfg.seed == 11 and cfg.replicates == 100
    assert cfg.theta_true == (0.6, 0.2) and cfg.importance_draws == 10_000
    assert cfg.to_dict()["theta_true"] == [0.6, 0.2]


@pytest.mark.parametrize("section,line,msg", [
    ("sampler", "m = 0", "sampler.m: m must be ≥ 2"),
    ("covariance", "gamma = 1.5", "covariance.gamma: shrinkage γ must lie in [0,1]"),
    ("sampler", "m = two", "sampler.m: cannot parse"),
    ("sampler", "bogus = 1", "sampler.bogus: unknown setting"),
    ("model", "m = 5", "model.m: unknown setting"),
])
def test_config_errors(tmp_path, section, line, msg):
    p = write_cfg(tmp_path, f"[experiment]\nexperiment = toy-figure1\nseed = 1\n[{section}]\n{line}\n")
    with pytest.raises(ConfigError) as info:
        load_config(p)
    assert msg in str(info.value)


def test_config_missing(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")
    p = write_cfg(tmp_path, "[experiment]\nexperiment = toy-figure1\n")
    with pytest.raises(ConfigError, match="seed"):
        load_config(p)


def test_sample_experiment_deterministic(tmp_path):
    outs = []
    for k in range(2):
        cfg = preset_config("sample", seed=5, out=str(tmp_path / f"r{k}"), iterations=2000,
                            pilot_iterations=500)
        run_experiment(cfg)
        outs.append(tmp_path / f"r{k}" / "sample")
    for name in ("samples_posterior.csv", "summary.json", "meta.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    meta = json.loads((outs[0] / "meta.json").read_text())
    assert meta["config"]["seed"] == 5 and meta["version"].startswith("v0.1.0")


def test_small_coverage_table(tmp_path):
    cfg = preset_config("ma2-coverage", seed=2, out=str(tmp_path), n=200, m=60, replicates=30,
                        importance_draws=600, pilot_iterations=400, pilot_scale=(0.06,), threads=2)
    s = run_experiment(cfg)
    t = s["coverage_table"]
    assert t["R"] + t["excluded"] == 30
    cov = np.array(t["coverage"])
    counts = np.array(t["covered"])
    assert np.all((cov >= 0) & (cov <= 1))
    assert np.allclose(cov, counts / max(t["R"], 1))
    # a wider interval covers at least as often as a narrower one
    assert np.all(counts[0] >= counts[1]) and np.all(counts[1] >= counts[2])
    header, ind = read_csv(tmp_path / "ma2-coverage" / "coverage_indicators.csv")
    assert len(ind) == t["R"] and set(np.unique(ind[:, 1:])) <= {0.0, 1.0}


def test_threads_do_not_change_results():
    a = run_experiment(preset_config("m-convergence", seed=3, replicates=4, threads=1))
    b = run_experiment(preset_config("m-convergence", seed=3, replicates=4, threads=3))
    assert a == b


def test_toy_figure1_outputs(tmp_path):
    cfg = preset_config("toy-figure1", seed=7, out=str(tmp_path), iterations=5000, B=40, J=40,
                        emulator_m=200)
    s = run_experiment(cfg)
    d = tmp_path / "toy-figure1"
    for name in ("samples_bsl.csv", "samples_adjusted.csv", "samples_bootstrap.csv", "density.csv",
                 "figure1.svg", "summary.json", "meta.json"):
        assert (d / name).exists()
    header, dens = read_csv(d / "density.csv")
    assert header == ["theta", "exact", "bsl", "adjusted", "bootstrap"] and dens.shape == (512, 5)
    area = np.trapezoid(dens[:, 1], dens[:, 0])
    assert abs(area - 1) < 1e-3
    assert s["bslm"]["sd"] < s["adjusted"]["sd"]
