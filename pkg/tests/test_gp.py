import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from gpteb.gp import (
    BoxUncertainty,
    GpModel,
    KernelParams,
    Observation,
    UncertaintyModel,
    chance_halfwidth,
    evaluate_uncertainty,
    fit,
    kernel,
    kernel_matrix,
    log_marginal_likelihood,
    posterior,
    posterior_many,
    uncertainty_from_json,
)


def dense_posterior(X, y, params, Q):
    """Textbook GP regression with explicit inverses."""
    ell = np.asarray(params.lengthscales)

    def k(a, b):
        d = (a[:, None, :] - b[None, :, :]) / ell
        return params.signal_var * np.exp(-0.5 * (d ** 2).sum(-1))

    K = k(X, X) + params.noise_std ** 2 * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    Ks = k(Q, X)
    mean = params.prior_mean + Ks @ Kinv @ (y - params.prior_mean)
    var = params.signal_var - np.einsum("ij,jk,ik->i", Ks, Kinv, Ks)
    return mean, np.sqrt(np.maximum(var, 0.0))


def random_problem(rng, n, d):
    X = rng.uniform(-2, 2, size=(n, d))
    y = np.sin(X).sum(1) + 0.1 * rng.normal(size=n)
    p = KernelParams(rng.uniform(0.3, 2.0), tuple(rng.uniform(0.5, 2.0, d)), rng.uniform(0.05, 0.5), rng.normal())
    return X, y, p


def test_kernel_formula_and_symmetry():
    p = KernelParams(2.0, (0.5, 2.0), 0.1)
    a, b = np.array([0.1, -0.3]), np.array([0.4, 1.0])
    ref = 2.0 * math.exp(-0.5 * ((0.3 / 0.5) ** 2 + (1.3 / 2.0) ** 2))
    assert kernel(a, b, p) == pytest.approx(ref)
    assert kernel(b, a, p) == pytest.approx(ref)
    assert kernel(a, a, p) == pytest.approx(2.0)
    K = kernel_matrix(np.stack([a, b]), np.stack([a, b]), p)
    assert K[0, 1] == pytest.approx(ref)


def test_kernel_params_validation():
    with pytest.raises(ValueError):
        KernelParams(0.0, (1.0,), 0.1)
    with pytest.raises(ValueError):
        KernelParams(1.0, (0.0,), 0.1)
    with pytest.raises(ValueError):
        KernelParams(1.0, (1.0,), -0.1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30), d=st.integers(1, 4))
def test_posterior_matches_dense(seed, n, d):
    rng = np.random.default_rng(seed)
    X, y, p = random_problem(rng, n, d)
    m = GpModel(X, y, p)
    Q = rng.uniform(-3, 3, size=(7, d))
    mean, std = posterior_many(m, Q)
    rm, rs = dense_posterior(X, y, p, Q)
    assert np.allclose(mean, rm, atol=1e-8)
    assert np.allclose(std, rs, atol=1e-8)


def test_prior_only_model():
    p = KernelParams(0.49, (1.0,), 0.1, prior_mean=0.3)
    m = GpModel(np.zeros((0, 1)), [], p)
    assert posterior(m, [1.0]) == pytest.approx((0.3, 0.7))
    assert log_marginal_likelihood(m) == 0.0


def test_noise_free_interpolates_training_points():
    X = np.linspace(-1, 1, 5)[:, None]
    y = X[:, 0] ** 2
    m = GpModel(X, y, KernelParams(1.0, (0.5,), 0.0))
    mean, std = posterior_many(m, X)
    assert np.allclose(mean, y, atol=1e-6)
    assert np.all(std < 1e-3)


def test_std_shrinks_near_data():
    X = np.array([[0.0]])
    m = GpModel(X, [1.0], KernelParams(1.0, (1.0,), 0.1))
    assert posterior(m, [0.0])[1] < posterior(m, [3.0])[1] <= 1.0 + 1e-12


def test_log_marginal_likelihood_matches_mvn():
    rng = np.random.default_rng(5)
    X, y, p = random_problem(rng, 12, 2)
    K = kernel_matrix(X, X, p) + p.noise_std ** 2 * np.eye(12)
    ref = stats.multivariate_normal(mean=np.full(12, p.prior_mean), cov=K).logpdf(y)
    assert log_marginal_likelihood(GpModel(X, y, p)) == pytest.approx(ref, rel=1e-10)


def test_fit_never_worse_than_init():
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, size=(30, 2))
    y = 0.5 * X[:, 0] ** 2 - X[:, 1] + 0.01 * rng.normal(size=30)
    obs = [Observation(x, t) for x, t in zip(X, y)]
    init = KernelParams(1.0, (1.0, 1.0), 0.1)
    m = fit(obs, init, n_starts=3, seed=0)
    before = log_marginal_likelihood(GpModel(X, y, init))
    assert log_marginal_likelihood(m) >= before - 1e-9
    assert m.warning is None
    # bounded search keeps the constant mean inside the target range
    assert y.min() - 1e-9 <= m.params.prior_mean <= y.max() + 1e-9


def test_fit_axes_selection():
    obs = [Observation((x, 7.0, -x), math.sin(x)) for x in np.linspace(-1, 1, 15)]
    m = fit(obs, KernelParams(1.0, (1.0,), 0.1), axes=[0], n_starts=2)
    assert m.dim == 1
    assert posterior(m, [0.5])[0] == pytest.approx(math.sin(0.5), abs=0.05)


@pytest.mark.parametrize("p, ref", [(0.6827, 1.0), (0.9545, 2.0), (0.9973, 3.0)])
def test_chance_halfwidth_sigma_levels(p, ref):
    assert chance_halfwidth(p) == pytest.approx(ref, abs=1e-3)


@settings(max_examples=50, deadline=None)
@given(p=st.floats(1e-6, 0.999999))
def test_chance_halfwidth_matches_erfinv(p):
    assert chance_halfwidth(p) == pytest.approx(math.sqrt(2) * special.erfinv(p), rel=1e-9, abs=1e-12)


def test_chance_halfwidth_domain():
    assert chance_halfwidth(0.0) == 0.0
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            chance_halfwidth(bad)


def test_box_uncertainty_from_observations():
    obs = [Observation((0.0, y), t) for y, t in [(0, -0.5), (1, 0.25), (2, 0.1)]]
    box = BoxUncertainty.from_observations(obs, [0], 3)
    assert box.lo == {0: -0.5} and box.hi == {0: 0.25}
    # e = +-1 reaches the two box ends
    assert evaluate_uncertainty(box, np.zeros(3), [1.0, 0, 0])[0] == pytest.approx(0.25)
    assert evaluate_uncertainty(box, np.zeros(3), [-1.0, 0, 0])[0] == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        evaluate_uncertainty(box, np.zeros(3), [1.5, 0, 0])


def test_uncertainty_model_band_and_json():
    X = np.linspace(-1, 1, 6)[:, None]
    gpm = GpModel(X, X[:, 0] ** 2, KernelParams(1.0, (0.7,), 0.05))
    u = UncertaintyModel({0: gpm}, (1,), 3, p=0.9545)
    assert u.halfwidth == pytest.approx(2.0, abs=1e-3)
    s = np.array([5.0, 0.3, -1.0])
    m, sd = posterior(gpm, [0.3])
    assert evaluate_uncertainty(u, s, [1.0, 0, 0]) == pytest.approx([m + sd, 0.0, 0.0])
    back = uncertainty_from_json(json.loads(json.dumps(u.to_json())))
    assert np.allclose(back.mean_std(s[None])[1], u.mean_std(s[None])[1])
    with pytest.raises(ValueError):
        UncertaintyModel({0: gpm}, (1,), 3)
