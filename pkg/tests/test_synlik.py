import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bslkit.core import DegenerateSummaryError, RngStream, SupportError
from bslkit.models import MA2Model, ToyModel
from bslkit.synlik import (
    CovarianceSpec,
    analytic_log_synlik,
    build_covariance,
    diagnostics,
    estimated_log_synlik,
    log_synlik,
    loglik_variance_diagnostic,
    sample_mean_cov,
    shrink_covariance,
    simulate_batch,
)


def test_simulate_batch_toy(rng):
    S = simulate_batch(ToyModel(20), [5.0], 100, rng)
    assert S.shape == (100, 1)
    assert abs(S.mean() - 5.0) < 3 * np.sqrt(5 / (20 * 100))


def test_simulate_batch_errors(rng):
    with pytest.raises(ValueError):
        simulate_batch(ToyModel(), [5.0], 1, rng)
    with pytest.raises(SupportError):
        simulate_batch(ToyModel(), [-1.0], 10, rng)


def test_sample_mean_cov_examples(rng):
    mean, cov = sample_mean_cov([[0, 0], [2, 2]])
    assert np.allclose(mean, [1, 1]) and np.allclose(cov, [[2, 2], [2, 2]])
    _, cov = sample_mean_cov(np.ones((5, 3)))
    assert np.all(cov == 0)
    _, cov = sample_mean_cov(rng.standard_normal((1000, 3)))
    assert np.all(np.abs(cov - np.eye(3)) < 0.15)
    assert np.array_equal(cov, cov.T)


def test_spec_validation():
    with pytest.raises(ValueError, match=r"shrinkage gamma must lie in \[0,1\]"):
        CovarianceSpec.shrinkage(1.5)
    with pytest.raises(ValueError):
        CovarianceSpec("bogus")
    assert str(CovarianceSpec.shrinkage(0.1)) == "shrinkage(0.1)"


def test_shrinkage_endpoints(rng):
    batch = rng.standard_normal((50, 4)) @ rng.standard_normal((4, 4))
    _, cov = sample_mean_cov(batch)
    assert np.array_equal(build_covariance(batch, CovarianceSpec.shrinkage(1.0)), cov)
    assert np.allclose(build_covariance(batch, CovarianceSpec.shrinkage(0.0)), np.diag(np.diag(cov)),
                       rtol=1e-14, atol=0)
    assert np.array_equal(build_covariance(batch, CovarianceSpec.diagonal()), np.diag(np.diag(cov)))


def test_analytic_covariance():
    cov = build_covariance(None, CovarianceSpec.analytic(0.5), ToyModel(20), [5.0])
    assert np.allclose(cov, [[0.125]])
    with pytest.raises(ValueError):
        build_covariance(np.zeros((3, 20)), CovarianceSpec.analytic(), MA2Model(), [0.6, 0.2])


def test_degenerate_coordinate():
    batch = np.column_stack([np.arange(5.0), np.ones(5)])
    with pytest.raises(DegenerateSummaryError, match="degenerate summary coordinate"):
        build_covariance(batch, CovarianceSpec.shrinkage(0.5))


@given(st.integers(0, 10_000), st.integers(2, 6), st.floats(0.0, 1.0))
@settings(max_examples=80, deadline=None)
def test_shrinkage_preserves_diagonal_and_psd(seed, d, gamma):
    g = np.random.default_rng(seed)
    batch = g.standard_normal((d + 5, d)) @ g.standard_normal((d, d))
    _, cov = sample_mean_cov(batch)
    shrunk = shrink_covariance(cov, gamma)
    assert np.allclose(np.diag(shrunk), np.diag(cov), rtol=1e-12, atol=0)
    assert np.array_equal(shrunk, shrunk.T)
    assert np.linalg.eigvalsh(shrunk).min() >= -1e-10 * np.abs(shrunk).max()


def test_log_synlik_examples():
    assert np.isclose(log_synlik([0.0], [0.0], [[1.0]]), -0.918938, atol=1e-6)
    assert np.isclose(log_synlik([1.0], [0.0], [[2.0]]), -1.515512, atol=1e-6)
    assert np.isclose(log_synlik([0.0, 0.0], [0.0, 0.0], np.eye(2)), -np.log(2 * np.pi))


def test_log_synlik_matches_scipy(rng):
    A = rng.standard_normal((5, 5))
    cov = A @ A.T + np.eye(5)
    x, mu = rng.standard_normal(5), rng.standard_normal(5)
    assert np.isclose(log_synlik(x, mu, cov), stats.multivariate_normal(mu, cov).logpdf(x), rtol=1e-12)


@given(st.integers(0, 10_000), st.permutations(range(4)))
@settings(max_examples=40, deadline=None)
def test_log_synlik_permutation_invariant(seed, perm):
    g = np.random.default_rng(seed)
    A = g.standard_normal((4, 4))
    cov = A @ A.T + 0.1 * np.eye(4)
    x, mu = g.standard_normal(4), g.standard_normal(4)
    p = np.array(perm)
    a = log_synlik(x, mu, cov)
    b = log_synlik(x[p], mu[p], cov[np.ix_(p, p)])
    assert np.isclose(a, b, rtol=1e-10)


def test_degenerate_policy():
    diagnostics.reset()
    # rank-deficient but PSD: rescued by the nugget
    v = np.array([1.0, 1.0])
    assert np.isfinite(log_synlik([0.0, 0.0], [0.0, 0.0], np.outer(v, v)))
    assert diagnostics.nugget_used == 1
    # clearly indefinite: -inf and counted
    assert log_synlik([0.0, 0.0], [0.0, 0.0], np.diag([1.0, -1.0])) == -np.inf
    assert diagnostics.degenerate == 1
    with pytest.raises(ValueError):
        log_synlik([0.0], [0.0, 0.0], np.eye(2))


def test_analytic_log_synlik_examples():
    m = ToyModel(20)
    assert np.isclose(analytic_log_synlik(m, [5.0], [5.0]), -0.5 * np.log(2 * np.pi * 0.25))
    assert np.isclose(analytic_log_synlik(m, [5.0], [5.0], 0.5), -0.5 * np.log(2 * np.pi * 0.125))
    s = np.linspace(0, 15, 30001)
    dens = np.exp([analytic_log_synlik(m, [5.0], [x]) for x in s])
    assert abs(integrate.trapezoid(dens, s) - 1.0) < 1e-6
    with pytest.raises(ValueError):
        analytic_log_synlik(MA2Model(), [0.6, 0.2], np.zeros(20))


def test_estimated_matches_closed_form_with_simulated_mean():
    model = ToyModel(20)
    spec = CovarianceSpec.analytic(0.5)
    ll, est = estimated_log_synlik(model, [5.0], 50, spec, [4.3], RngStream(4))
    batch = simulate_batch(model, [5.0], 50, RngStream(4))
    var = 0.5 * 5.0 / 20
    expected = -0.5 * np.log(2 * np.pi * var) - (4.3 - batch.mean()) ** 2 / (2 * var)
    assert np.isclose(ll, expected, rtol=1e-12)
    assert est.m_used == 50


def test_estimated_is_deterministic_and_row_symmetric():
    model = MA2Model(200)
    s = model.simulate_summary([0.6, 0.2], RngStream(1))
    a = estimated_log_synlik(model, [0.5, 0.1], 40, CovarianceSpec.full(), s, RngStream(2))[0]
    b = estimated_log_synlik(model, [0.5, 0.1], 40, CovarianceSpec.full(), s, RngStream(2))[0]
    assert a == b


def _ll_var(model, m, spec, R, seed):
    g = np.random.default_rng(seed)
    s = model.simulate_summary([5.0], g)
    return np.var([estimated_log_synlik(model, [5.0], m, spec, s, g)[0] for _ in range(R)], ddof=1)


def test_variance_shrinks_with_m():
    model = ToyModel(20)
    v = [_ll_var(model, m, CovarianceSpec.full(), 200, 11) for m in (10, 40, 160, 640)]
    for a, b in zip(v, v[1:]):
        assert b <= 1.1 * a
    w = [_ll_var(model, m, CovarianceSpec.full(), 200, 12) for m in (100, 1000, 10_000)]
    assert w[0] > w[1] > w[2]


def test_sigma2_diagnostic():
    model = ToyModel(20)
    s = np.array([5.0])
    tiny = loglik_variance_diagnostic(model, [5.0], 100_000, 20, CovarianceSpec.analytic(), s, RngStream(1))
    assert tiny < 1e-3
    v5 = loglik_variance_diagnostic(model, [5.0], 5, 200, CovarianceSpec.full(), s, RngStream(2))
    v500 = loglik_variance_diagnostic(model, [5.0], 500, 200, CovarianceSpec.full(), s, RngStream(3))
    assert v5 > v500
    with pytest.raises(ValueError):
        loglik_variance_diagnostic(model, [5.0], 5, 10, CovarianceSpec.full(), s, RngStream(2))


def test_sigma2_ma2_below_three():
    model = MA2Model(1000)
    s = model.simulate_summary([0.6, 0.2], RngStream(5))
    v = loglik_variance_diagnostic(model, [0.6, 0.2], 200, 50, CovarianceSpec.full(), s, RngStream(6))
    assert np.isfinite(v) and v < 3.0


def test_sigma2_reports_failures():
    class Flat(ToyModel):
        def simulate_batch(self, theta, m, rng):
            return np.ones((m, 1))

    with pytest.raises(DegenerateSummaryError, match="20 of 20"):
        loglik_variance_diagnostic(Flat(), [5.0], 10, 20, CovarianceSpec.full(), [5.0], RngStream(1))
