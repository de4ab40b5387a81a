import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bslkit.adjust import (
    AdjustmentResult,
    GaussianProcess,
    OmegaEstimate,
    PosteriorMoments,
    _omega_from,
    adjust_samples,
    build_gp_emulator,
    estimate_omega_bootstrap,
    estimate_omega_model_correct,
    gp_fit_and_gradient,
    latin_hypercube,
    posterior_moments,
)
from bslkit.core import RngStream, SingularCovarianceError
from bslkit.models import MA2Model, ToyModel
from bslkit.synlik import CovarianceSpec


def random_pd(g, d):
    A = g.standard_normal((d, d))
    return A @ A.T + 0.1 * np.eye(d)


def test_posterior_moments_examples(rng):
    mom = posterior_moments(np.array([[4.0], [6.0]]))
    assert np.allclose(mom.mean, [5.0]) and np.allclose(mom.cov, [[2.0]])
    mom = posterior_moments(rng.standard_normal((100_000, 2)))
    assert np.all(np.abs(mom.mean) < 0.02) and np.all(np.abs(mom.cov - np.eye(2)) < 0.02)
    with pytest.raises(SingularCovarianceError):
        posterior_moments(np.ones((10, 1)))
    with pytest.raises(ValueError):
        posterior_moments(np.ones((2, 2)))


def test_identity_case(rng):
    x = rng.standard_normal((500, 3)) @ random_pd(rng, 3)
    mom = posterior_moments(x)
    res = adjust_samples(x, mom, np.linalg.inv(mom.cov))
    assert np.allclose(res.transform, np.eye(3), atol=1e-10)
    assert np.allclose(res.adjusted, x, atol=1e-10)


def test_scalar_example(rng):
    x = 3.0 + np.sqrt(0.125) * rng.standard_normal(1000)
    mom = PosteriorMoments(np.array([3.0]), np.array([[0.125]]))
    res = adjust_samples(x, mom, [[32.0]])
    assert np.isclose(res.transform[0, 0], 2.0)
    assert np.allclose(res.adjusted[:, 0] - 3.0, 2.0 * (x - 3.0))


@given(st.integers(0, 10_000), st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_adjustment_exactness(seed, d):
    g = np.random.default_rng(seed)
    x = g.standard_normal((200, d)) @ random_pd(g, d) + g.standard_normal(d)
    mom = posterior_moments(x)
    omega = random_pd(g, d)
    res = adjust_samples(x, mom, omega)
    assert np.allclose(res.adjusted.mean(axis=0), mom.mean, rtol=0, atol=1e-10)
    target = mom.cov @ omega @ mom.cov
    got = np.cov(res.adjusted.T, ddof=1).reshape(d, d)
    assert np.linalg.norm(got - target) <= 1e-8 * np.linalg.norm(target)


def test_adjust_dimension_mismatch(rng):
    x = rng.standard_normal((50, 2))
    mom = posterior_moments(x)
    with pytest.raises(ValueError, match="dimension mismatch"):
        adjust_samples(x, mom, np.eye(3))


def test_omega_from_gradients():
    est = _omega_from(np.array([[1.0], [4.0]]))
    assert np.isclose(est.omega[0, 0], 0.5 * 9.0)
    g = np.random.default_rng(1).standard_normal((40, 3))
    est = _omega_from(g)
    c = g - g.mean(axis=0)
    assert np.array_equal(est.omega, 0.5 * ((c.T @ c) / 39 + ((c.T @ c) / 39).T))
    assert np.array_equal(_omega_from(est.gradients).omega, est.omega)


def test_latin_hypercube_cells(rng):
    B = 50
    X = latin_hypercube([1.0, -2.0], [0.5, 2.0], B, rng)
    for k, (c, h) in enumerate(((1.0, 0.5), (-2.0, 2.0))):
        cells = np.floor((X[:, k] - (c - h)) / (2 * h) * B).astype(int)
        assert sorted(cells) == list(range(B))


def test_latin_hypercube_centred():
    means = [latin_hypercube([0.0, 5.0], [1.0, 1.0], 200, RngStream(i)).mean(axis=0) for i in range(20)]
    assert np.all(np.abs(np.mean(means, axis=0) - [0.0, 5.0]) < 0.1)


def test_latin_hypercube_respects_support(rng):
    X = latin_hypercube([0.1], [0.5], 100, rng, support=lambda t: t[0] > 0)
    assert np.all(X > 0)


def test_gp_interpolates(rng):
    X = rng.uniform(-1, 1, (30, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    gp = GaussianProcess(length_scales=[0.5, 0.5], signal_var=1.0, nugget=1e-10)
    gp.fit(X, y, optimize_hyper=False)
    assert np.allclose(gp.predict(X), y, rtol=1e-6, atol=1e-6 * np.abs(y).max())


def test_gp_linear_gradient(rng):
    X = rng.uniform(-1, 1, (40, 2))
    a = np.array([2.0, -3.0])
    gp = GaussianProcess().fit(X, X @ a + 7.0)
    g = gp.gradient_fd(np.zeros(2), 1e-4)
    assert np.allclose(g, a, rtol=0.01)


class _ToyEmulatorCase:
    model = ToyModel(20)
    spec = CovarianceSpec.analytic(0.5)
    center = np.array([4.65])
    delta = np.array([0.34])


def test_emulator_shapes_and_errors():
    c = _ToyEmulatorCase
    em = build_gp_emulator(c.model, c.center, c.delta, 20, 50, c.spec, RngStream(1))
    assert em.inputs.shape == (20, 1) and em.means.shape == (20, 1) and em.covs.shape == (20, 1, 1)
    with pytest.raises(ValueError):
        build_gp_emulator(c.model, c.center, c.delta, 5, 50, c.spec, RngStream(1))


def test_constant_responses_zero_gradient():
    c = _ToyEmulatorCase
    em = build_gp_emulator(c.model, c.center, c.delta, 20, 50, c.spec, RngStream(1))
    em.means[:] = 0.0
    em.covs[:] = 1.0
    g = gp_fit_and_gradient(em, np.array([0.0]))
    assert np.all(np.abs(g) <= 1e-6 * 0.92)


def test_gp_gradient_matches_closed_form():
    c = _ToyEmulatorCase
    em = build_gp_emulator(c.model, c.center, c.delta, 200, 1000, c.spec, RngStream(2))
    n, t = 20, c.center[0]
    for s in (4.0, 5.3, 6.0):
        g = gp_fit_and_gradient(em, np.array([s]))[0]
        # d/dtheta of -0.5 log(2 pi theta / (2n)) - (s - theta)^2 n / theta
        exact = -0.5 / t + 2 * n * (s - t) / t + n * (s - t) ** 2 / t**2
        assert abs(g - exact) < 0.05 * abs(exact)


def test_omega_two_point_variance():
    c = _ToyEmulatorCase
    em = build_gp_emulator(c.model, c.center, c.delta, 20, 100, c.spec, RngStream(3))
    est = estimate_omega_model_correct(c.model, c.center, 2, em, RngStream(4))
    g = est.gradients[:, 0]
    assert est.J == 2
    assert np.isclose(est.omega[0, 0], 0.5 * (g[0] - g[1]) ** 2)
    with pytest.raises(ValueError):
        estimate_omega_model_correct(c.model, c.center, 1, em, RngStream(4))


def test_bootstrap_constant_data():
    c = _ToyEmulatorCase
    em = build_gp_emulator(c.model, c.center, c.delta, 20, 100, c.spec, RngStream(3))
    est = estimate_omega_bootstrap(np.full(20, 5), ToyModel.summary, c.center, 10, em, RngStream(1))
    assert np.all(est.omega == 0)


def test_emulator_multivariate_smoke():
    model = MA2Model(200)
    em = build_gp_emulator(model, [0.6, 0.2], [0.05, 0.05], 20, 30, CovarianceSpec.shrinkage(0.5),
                           RngStream(1))
    s = model.simulate_summary([0.6, 0.2], RngStream(2))
    g = gp_fit_and_gradient(em, s)
    assert g.shape == (2,) and np.all(np.isfinite(g))
    assert isinstance(estimate_omega_model_correct(model, [0.6, 0.2], 3, em, RngStream(3)), OmegaEstimate)


def test_result_serialization(tmp_path, rng):
    x = rng.standard_normal((30, 2))
    mom = posterior_moments(x)
    res = adjust_samples(x, mom, _omega_from(rng.standard_normal((10, 2))))
    res.to_csv(tmp_path / "adj.csv")
    data = np.loadtxt(tmp_path / "adj.csv", delimiter=",", skiprows=1)
    assert np.array_equal(data, np.hstack([x, res.adjusted]))
    back = AdjustmentResult.from_json(res.to_json())
    assert np.array_equal(back["mean"], mom.mean) and np.array_equal(back["omega"], res.omega.omega)
