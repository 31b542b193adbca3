import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, optimize, stats

from src.errors import ConvergenceError, DomainError
from src.families import ParamVector, get_family, make_link
from src.numerics import central_jacobian
from src.swle import (FitOptions, GlmData, fit, information_matrices, initial_estimate, score, score_contributions,
                      weighted_loglik)
from src.weighting import WeightSpec, weight_eval
from tests.conftest import simulate_glm, stationary_point

# theta_tilde, phi_tilde of a fixed weight per family, reached through the model link
WEIGHTS = {
    "gamma": (-0.3, 1.0),
    "normal": (1.0, 4.0),
    "invgauss": (-0.07, 5.0),
}


def weighted_spec(family, link):
    theta_tilde, phi_tilde = WEIGHTS[family.family_id.value]
    return WeightSpec.constant(link, theta_tilde, phi_tilde, 2)


def neg_loglik(family, link, data):
    def fn(psi):
        theta = link.xi(data.X @ psi[:-1])
        return -np.sum(family.log_density(theta, np.exp(psi[-1]), data.y))
    return fn


def test_mle_spec_maximizes_the_likelihood(model):
    family, link, params, data = model
    result = fit(family, link, WeightSpec.mle(), data)
    assert result.converged
    start = np.append(params.beta, np.log(params.phi))
    oracle = optimize.minimize(neg_loglik(family, link, data), start, method="BFGS", options={"gtol": 1e-9})
    assert_allclose(result.params.beta, oracle.x[:-1], rtol=1e-5, atol=1e-6)
    assert_allclose(result.params.phi, np.exp(oracle.x[-1]), rtol=1e-5)


def test_mle_coefficients_agree_with_irls(model):
    family, link, _, data = model
    result = fit(family, link, WeightSpec.mle(), data, FitOptions(compute_covariance=False))
    assert_allclose(result.params.beta, initial_estimate(family, link, data).beta, rtol=1e-7, atol=1e-9)


def test_weighted_fit_solves_the_score_equations(model):
    family, link, _, data = model
    spec = weighted_spec(family, link)
    result = fit(family, link, spec, data)
    assert result.converged
    assert result.final_score_norm < 1e-8
    total_weight = np.sum(weight_eval(family, spec, data.y, data.X, link))
    assert np.max(np.abs(score(family, link, result.params, spec, data))) / total_weight < 1e-7
    assert result.covariance.shape == (3, 3)
    assert np.all(result.standard_errors > 0)


def test_score_is_the_gradient_of_the_weighted_loglik(model):
    family, link, params, data = model
    spec = weighted_spec(family, link)
    numeric = central_jacobian(
        lambda p: np.atleast_1d(weighted_loglik(family, link, ParamVector.from_array(p), spec, data)),
        params.as_array())[0]
    assert_allclose(score(family, link, params, spec, data), numeric, rtol=1e-5, atol=1e-6)


def test_weight_scale_does_not_move_the_fit(model):
    family, link, _, data = model
    spec = weighted_spec(family, link)
    base = fit(family, link, spec, data)
    scaled = fit(family, link, spec.scaled(5.0), data)
    assert_allclose(scaled.params.as_array(), base.params.as_array(), rtol=1e-7, atol=1e-9)
    assert_allclose(scaled.covariance, base.covariance, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("name", ["gamma", "normal", "invgauss"])
def test_model_information_matches_empirical(name):
    family, link, params, data = simulate_glm(name, 20_000, seed=23)
    spec = weighted_spec(family, link)
    gamma_m, lam_m = information_matrices(family, link, params, spec, data, "model")
    gamma_e, lam_e = information_matrices(family, link, params, spec, data, "empirical")
    assert_allclose(gamma_e, gamma_m, atol=0.05 * np.abs(gamma_m).max())
    assert_allclose(lam_e, lam_m, atol=0.08 * np.abs(lam_m).max())


def test_normal_mle_covariance_is_the_textbook_one():
    family, link, _, data = simulate_glm("normal", 500, seed=4)
    result = fit(family, link, WeightSpec.mle(), data)
    phi = result.params.phi
    assert_allclose(result.covariance[:2, :2], phi * np.linalg.inv(data.X.T @ data.X), rtol=1e-8)
    assert_allclose(result.covariance[2, 2], 2.0 * phi ** 2 / data.n, rtol=1e-8)
    assert_allclose(result.covariance[:2, 2], 0.0, atol=1e-12)


def test_empirical_covariance_option(model):
    family, link, _, data = model
    spec = weighted_spec(family, link)
    model_cov = fit(family, link, spec, data).covariance
    empirical = fit(family, link, spec, data, FitOptions(covariance_estimator="empirical")).covariance
    assert_allclose(np.sqrt(np.diag(empirical)), np.sqrt(np.diag(model_cov)), rtol=0.35)


def test_iteration_cap():
    family, link, _, data = simulate_glm("gamma", 300, seed=8)
    spec = weighted_spec(family, link)
    with pytest.raises(ConvergenceError) as info:
        fit(family, link, spec, data, FitOptions(max_iter=1))
    assert len(info.value.trace) == 1
    result = fit(family, link, spec, data, FitOptions(max_iter=1, raise_on_failure=False))
    assert not result.converged
    assert result.covariance is None


def test_invalid_data():
    family = get_family("gamma")
    link = make_link(family, "log")
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    with pytest.raises(DomainError) as info:
        fit(family, link, WeightSpec.mle(), GlmData(np.array([1.0, 2.0, -1.0, 3.0, 1.0, 2.0]), X))
    assert info.value.parameter == "y"
    with pytest.raises(DomainError) as info:
        fit(family, link, WeightSpec.mle(), GlmData(np.ones(3), X[:3]))
    assert info.value.parameter == "n"
    with pytest.raises(DomainError) as info:
        fit(family, link, WeightSpec.mle(), GlmData(np.arange(1.0, 7.0), np.column_stack([X, 2 * X[:, 1]])))
    assert info.value.parameter == "X"
    with pytest.raises(DomainError):
        GlmData(np.ones(4), np.ones((3, 2)))


def test_result_dict():
    family, link, _, data = simulate_glm("gamma", 200, seed=2)
    out = fit(family, link, WeightSpec.mle(), data).to_dict()
    assert out["family"] == "gamma" and out["link"] == "log"
    assert out["spec"] == {"mode": "mle"}
    assert out["method"] == "alternating"
    assert len(out["standard_errors"]) == 3
    assert out["n_obs"] == 200


ROWS = np.array([[1.0, -0.8], [1.0, 0.1], [1.0, 0.9]])


def expected_score(family, link, truth, params, spec, x):
    """E[S(params) | x] under the model at ``truth``, by adaptive quadrature over the central mass"""
    theta = float(truth.theta(link, x[None, :])[0])
    dist = family.scipy_dist(theta, truth.phi)

    def integrand(y):
        data = GlmData(np.array([y]), x[None, :])
        density = float(np.exp(family.log_density(theta, truth.phi, y)))
        return density * score_contributions(family, link, params, spec, data)[0]

    value, _ = integrate.quad_vec(integrand, dist.ppf(1e-15), dist.isf(1e-15), epsabs=1e-12, epsrel=1e-11)
    return value


@pytest.mark.parametrize("name", ["gamma", "normal", "invgauss"])
def test_model_gamma_is_the_jacobian_of_the_expected_score(name):
    family, link, params, _ = simulate_glm(name, 10, seed=0)
    spec = weighted_spec(family, link)
    means = family.dcumulant(params.theta(link, ROWS))
    gamma_m, _ = information_matrices(family, link, params, spec, GlmData(means, ROWS), "model")

    def mean_expected(p):
        moved = ParamVector.from_array(p)
        return np.mean([expected_score(family, link, params, moved, spec, x) for x in ROWS], axis=0)

    assert_allclose(mean_expected(params.as_array()), 0.0, atol=1e-8)
    jacobian = central_jacobian(mean_expected, params.as_array())
    assert_allclose(gamma_m, jacobian, rtol=1e-4, atol=1e-4 * np.abs(gamma_m).max())


def test_empirical_lambda_is_the_score_outer_product_average(model):
    family, link, params, data = model
    spec = weighted_spec(family, link)
    _, lam = information_matrices(family, link, params, spec, data, "empirical")
    contrib = score_contributions(family, link, params, spec, data)
    assert_allclose(lam, np.einsum("np,nq->pq", contrib, contrib) / data.n, rtol=1e-10, atol=1e-14)


SCIPY_LOGPDF = {
    "gamma": lambda y, mu, phi: stats.gamma.logpdf(y, a=1.0 / phi, scale=mu * phi),
    "normal": lambda y, mu, phi: stats.norm.logpdf(y, loc=mu, scale=np.sqrt(phi)),
    "invgauss": lambda y, mu, phi: stats.invgauss.logpdf(y, mu=mu * phi, scale=1.0 / phi),
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(SCIPY_LOGPDF))
def test_mle_spec_is_the_likelihood_maximizer(name, seed):
    family, link, params, data = simulate_glm(name, 300, seed=200 + seed)
    result = fit(family, link, WeightSpec.mle(), data, FitOptions(compute_covariance=False))

    def objective(psi):
        eta = data.X @ psi[:-1]
        mu = eta if name == "normal" else np.exp(eta)
        return -np.sum(SCIPY_LOGPDF[name](data.y, mu, np.exp(psi[-1])))

    oracle = stationary_point(objective, np.append(params.beta, np.log(params.phi)))
    assert_allclose(result.params.beta, oracle[:-1], rtol=1e-8, atol=1e-8)
    assert_allclose(result.params.phi, np.exp(oracle[-1]), rtol=1e-8, atol=1e-8)
