import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, stats

from src.errors import CalibrationError, DomainError, OverflowExponentError
from src.families import ParamVector, get_family, make_link
from src.weighting import (Tilt, WeightSpec, bias_adjustment, calibrate_complete, transform, weight_eval)
from tests.conftest import simulate_glm

# theta, phi, theta_tilde, phi_tilde
TILTS = {
    "gamma": (-1.0, 0.5, -0.5, 2.0),
    "normal": (0.5, 1.0, 1.0, 2.0),
    "invgauss": (-0.5, 0.5, -0.5, 4.0),
}


def constant_spec(name):
    family = get_family(name)
    _, _, theta_tilde, phi_tilde = TILTS[name]
    return family, WeightSpec.constant(family.canonical_link(), theta_tilde, phi_tilde, 1)


@pytest.mark.parametrize("name", sorted(TILTS))
def test_transformed_parameters(name):
    family, spec = constant_spec(name)
    theta, phi, theta_tilde, phi_tilde = TILTS[name]
    out = transform(family, theta, phi, spec, [1.0])
    phi_s = 1.0 / (1.0 / phi + 1.0 / phi_tilde - family.c)
    phi_ss = 1.0 / (1.0 / phi + 2.0 * (1.0 / phi_tilde - family.c))
    assert_allclose(out.phi_star, phi_s, rtol=1e-14)
    assert_allclose(out.theta_star, (theta / phi + theta_tilde / phi_tilde) * phi_s, rtol=1e-14)
    assert_allclose(out.phi_2star, phi_ss, rtol=1e-14)
    assert_allclose(out.theta_2star, (theta / phi + 2.0 * theta_tilde / phi_tilde) * phi_ss, rtol=1e-14)


def test_gamma_transform_by_hand():
    family, spec = constant_spec("gamma")
    out = transform(family, -1.0, 0.5, spec, [1.0])
    assert_allclose([out.theta_star, out.phi_star], [-1.5, 2.0 / 3.0])
    assert_allclose([out.theta_2star, out.phi_2star], [-2.5, 1.0])


@pytest.mark.parametrize("name", sorted(TILTS))
def test_bias_adjustment_normalizes_the_tilted_density(name):
    family, spec = constant_spec(name)
    theta, phi, _, _ = TILTS[name]
    lam = bias_adjustment(family, theta, phi, spec, [1.0])

    def integrand(y):
        if not family.in_support(y):
            return 0.0
        return family.density(theta, phi, y) * weight_eval(family, spec, y, [1.0])

    value, _ = integrate.quad(integrand, family.support.lo, np.inf, epsabs=1e-13, epsrel=1e-11, limit=200)
    assert_allclose(lam, value, rtol=1e-8)

    # f * W / lambda* is the family density at the transformed parameters
    out = transform(family, theta, phi, spec, [1.0])
    y = family.scipy_dist(out.theta_star, out.phi_star).ppf([0.1, 0.5, 0.9])
    tilted = family.density(theta, phi, y) * weight_eval(family, spec, y, np.ones((3, 1))) / lam
    assert_allclose(tilted, family.density(out.theta_star, out.phi_star, y), rtol=1e-10)


def test_mle_spec_is_flat():
    family = get_family("gamma")
    out = transform(family, -1.0, 0.5, WeightSpec.mle(), [1.0])
    assert_allclose([out.theta_star, out.phi_star], [-1.0, 0.5])
    assert bias_adjustment(family, -1.0, 0.5, WeightSpec.mle(), [1.0]) == pytest.approx(1.0)
    assert weight_eval(family, WeightSpec.mle(), 3.0, [1.0]) == 1.0


def test_large_scale_overflows():
    family = get_family("gamma")
    with pytest.raises(OverflowExponentError) as info:
        bias_adjustment(family, -1.0, 0.5, WeightSpec.mle().scaled(800.0), [1.0])
    assert info.value.exponent == pytest.approx(800.0)


def test_tilt_leaving_the_parameter_region():
    family = get_family("gamma")
    link = family.canonical_link()
    with pytest.raises(CalibrationError) as info:
        transform(family, -1.0, 0.5, WeightSpec.constant(link, 3.0, 1.0, 1), [1.0])
    assert "theta*" in info.value.constraint
    with pytest.raises(CalibrationError) as info:
        transform(family, -1.0, 2.0, WeightSpec.constant(link, -1.0, 10.0, 1), [1.0])
    assert info.value.constraint.startswith("phi")


def test_weight_outside_support():
    family, spec = constant_spec("gamma")
    with pytest.raises(DomainError) as info:
        weight_eval(family, spec, -1.0, [1.0])
    assert info.value.parameter == "y"


def test_tilts_add():
    total = Tilt(np.array([0.5, 1.0]), 0.25, 1.0) + Tilt(np.array([0.5, -1.0]), 0.5, 2.0)
    assert_allclose(total.a1, [1.0, 0.0])
    assert total.a2 == 0.75
    assert total.log_scale == 3.0


def test_spec_validation_and_dict_form():
    spec = WeightSpec.weighted([0.2, -0.1], 3.0, log_scale=1.5)
    assert WeightSpec.from_dict(spec.to_dict()) == spec
    assert WeightSpec.from_dict({"mode": "MLE"}).is_mle
    assert WeightSpec.mle().to_dict() == {"mode": "mle"}
    with pytest.raises(CalibrationError):
        WeightSpec.weighted([], 1.0)
    with pytest.raises(CalibrationError):
        WeightSpec.weighted([0.1], 0.0)
    with pytest.raises(CalibrationError):
        spec.theta_tilde(make_link(get_family("gamma"), "log"), np.ones((4, 3)))


def test_calibration_levels_and_design_checks():
    family = get_family("gamma")
    link = make_link(family, "log")
    params = ParamVector((1.0, 0.5), 0.5)
    X = np.column_stack([np.ones(10), np.linspace(-1, 1, 10)])
    assert calibrate_complete(family, link, params, X, 0.99, 1.0).is_mle
    with pytest.raises(CalibrationError):
        calibrate_complete(family, link, params, X, 1.0, 0.5)
    with pytest.raises(CalibrationError):
        calibrate_complete(family, link, params, X, 0.9, 0.0)
    with pytest.raises(CalibrationError) as info:
        calibrate_complete(family, link, params, X[:, 1:] + 2.0, 0.9, 0.5, n_draws=1000)
    assert info.value.constraint == "intercept column"


@pytest.mark.parametrize("name", ["gamma", "normal", "invgauss"])
def test_calibrated_tail_ratio(name):
    """Fresh draws reproduce the requested tail-weight ratio"""
    family, link, params, data = simulate_glm(name, 500, seed=5)
    delta, alpha = 0.5, 0.9
    spec = calibrate_complete(family, link, params, data.X, alpha, delta, seed=1, n_draws=200_000)
    assert not spec.is_mle

    rng = np.random.default_rng(99)
    rows = rng.integers(0, data.n, 400_000)
    X = data.X[rows]
    y = family.sample(rng, params.theta(link, X), np.full(rows.size, params.phi))
    w = weight_eval(family, spec, y, X, link)
    tail = y > np.quantile(y, alpha)
    assert_allclose(np.mean(w[tail]) / np.mean(w), delta, rtol=0.05)

    stronger = calibrate_complete(family, link, params, data.X, alpha, 0.1, seed=1, n_draws=200_000)
    w2 = weight_eval(family, stronger, y, X, link)
    assert np.mean(w2[tail]) / np.mean(w2) < np.mean(w[tail]) / np.mean(w)


# tail grids where W*|y| and W*|g(y)| must vanish
TAIL_GRIDS = {
    "gamma": [np.geomspace(1e3, 1e5, 50)],
    "normal": [np.geomspace(1e3, 1e5, 50), -np.geomspace(1e3, 1e5, 50)],
    "invgauss": [np.geomspace(1e3, 1e5, 50), np.geomspace(1e-6, 1e-4, 50)],
}


@pytest.mark.parametrize("name", sorted(TAIL_GRIDS))
def test_influence_vanishes_in_the_tails(name):
    family, spec = constant_spec(name)
    for y in TAIL_GRIDS[name]:
        w = weight_eval(family, spec, y, [[1.0]])
        assert np.all(w * np.abs(y) < 1e-12)
        assert np.all(w * np.abs(family.g(y)) < 1e-12)


def test_constant_spec_outside_the_link_range():
    log = make_link(get_family("gamma"), "log")
    with pytest.raises(CalibrationError) as info:
        WeightSpec.constant(log, 0.5, 1.0, 2)
    assert info.value.constraint == "theta_tilde in link range"
    assert WeightSpec.constant(log, -0.5, 1.0, 2).beta_tilde == pytest.approx((np.log(2.0), 0.0))


def stratified_design(m=100_000):
    """Intercept plus covariates at the N(0, 1) quantiles (i + 0.5) / m"""
    return np.column_stack([np.ones(m), stats.norm.ppf((np.arange(m) + 0.5) / m)])


def test_gamma_tail_calibration_reproduces_the_reference_weight():
    # printed reference (6.53, 1) is on the mean scale: -1/theta_tilde = 6.53
    family = get_family("gamma")
    link = make_link(family, "log")
    spec = calibrate_complete(family, link, ParamVector((1.0, 0.5), 0.5), stratified_design(), 0.99, 0.1, seed=2024)
    theta_tilde = float(spec.theta_tilde(link, [[1.0, 0.0]])[0])
    assert spec.phi_tilde == 1.0
    assert theta_tilde < 0
    assert -1.0 / theta_tilde == pytest.approx(6.53, abs=0.15)
    assert spec.beta_tilde[0] == pytest.approx(np.log(6.53), abs=0.025)
    assert spec.beta_tilde[1] == 0.0


def test_normal_tail_calibration_matches_the_closed_form():
    # Y ~ N(1, 0.5); tilting by a N(1, phi~) kernel gives ratio = P(Z > z_a / r) / (1 - alpha)
    # with r^2 = (1/0.5 + 1/phi~)^-1 / 0.5, so delta = 0.5 at alpha = 0.99 pins phi~
    family = get_family("normal")
    link = make_link(family, "canonical")
    alpha, delta, variance = 0.99, 0.5, 0.5
    r = stats.norm.ppf(alpha) / stats.norm.isf(delta * (1.0 - alpha))
    expected = 1.0 / ((1.0 / r ** 2 - 1.0) / variance)
    assert expected == pytest.approx(2.2126, abs=1e-3)

    spec = calibrate_complete(family, link, ParamVector((1.0, 0.5), 0.25), stratified_design(), alpha, delta,
                              seed=2024)
    assert spec.phi_tilde == pytest.approx(expected, rel=0.03)
    assert spec.beta_tilde[0] == pytest.approx(1.0, abs=5e-3)
