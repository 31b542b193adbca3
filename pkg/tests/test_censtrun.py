import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, optimize, special, stats

from src.censtrun import (CensoredIn, CensoringScheme, ExactValue, ObservationRecord, RecordSet, censtrun_information,
                          d_terms, extended_score, extended_score_contributions, fit_censtrun, observed_loglik,
                          pair_moment_rows)
from src.errors import DomainError
from src.families import Interval, ParamVector, get_family, make_link
from src.numerics import central_jacobian
from src.simlab import censored_gamma_design, generate
from src.swle import FitOptions, cross_moment_rows, score
from src.weighting import WeightSpec, bias_adjustment, calibrate_censored, transform
from tests.conftest import simulate_glm, stationary_point

GAMMA = get_family("gamma")
LOG = make_link(GAMMA, "log")
TRUTH = ParamVector((1.0, 0.5), 0.5)


@pytest.fixture(scope="module")
def censored():
    return generate(censored_gamma_design("I", n=800, seed=3))


def spec_a():
    return WeightSpec.constant(LOG, -0.3, 1.0, 2)


def test_scheme_must_partition_the_truncation_region():
    with pytest.raises(DomainError):
        CensoringScheme(Interval(0.0, np.inf), Interval(0.0, 5.0))
    with pytest.raises(DomainError):
        CensoringScheme(Interval(0.0, np.inf), Interval(0.0, 5.0), (Interval(4.0, np.inf),))
    with pytest.raises(DomainError):
        CensoringScheme.from_limits(Interval(0.0, np.inf), Interval(2.0, 3.0))
    scheme = CensoringScheme.from_limits(Interval(0.5, np.inf), Interval(10.0, np.inf))
    assert scheme.uncensored == Interval(0.5, 10.0)
    assert scheme.censor_intervals == (Interval(10.0, np.inf),)
    left = CensoringScheme.from_limits(Interval(0.0, np.inf), Interval(-np.inf, 1.0))
    assert left.uncensored == Interval(1.0, np.inf)
    assert CensoringScheme.from_limits(Interval(0.0, 5.0), None).n_intervals == 0


def test_record_outcomes_are_checked():
    scheme = CensoringScheme.from_limits(Interval(0.5, np.inf), Interval(10.0, np.inf))
    with pytest.raises(DomainError) as info:
        ObservationRecord((1.0, 0.0), scheme, ExactValue(12.0))
    assert info.value.parameter == "y"
    with pytest.raises(DomainError):
        ObservationRecord((1.0, 0.0), scheme, CensoredIn(1))


def test_records_round_trip_through_columns():
    scheme = CensoringScheme.from_limits(Interval(0.5, np.inf), Interval(10.0, np.inf))
    two_sided = CensoringScheme(Interval(0.0, np.inf), Interval(1.0, 5.0),
                                (Interval(0.0, 1.0), Interval(5.0, np.inf)))
    records = [
        ObservationRecord((1.0, 0.3), scheme, ExactValue(2.5)),
        ObservationRecord((1.0, -1.2), scheme, CensoredIn(0)),
        ObservationRecord((1.0, 0.7), two_sided, CensoredIn(1)),
        ObservationRecord((1.0, 0.1), CensoringScheme.complete(Interval(0.0, np.inf)), ExactValue(0.2)),
    ]
    columns = RecordSet.from_records(records)
    assert columns.int_record.tolist() == [0, 1, 2, 2]
    assert columns.observed.tolist() == [-1, 1, 3, -1]
    assert columns.to_records() == records


def test_extended_score_reduces_to_the_complete_score():
    family, link, params, data = simulate_glm("gamma", 300, seed=12)
    records = RecordSet.from_complete(data, family)
    assert records.is_complete(family)
    spec = WeightSpec.constant(link, -0.3, 1.0, 2)
    assert_allclose(extended_score(family, link, params, spec, records), score(family, link, params, spec, data),
                    rtol=1e-10)
    result = fit_censtrun(family, link, spec, records)
    assert result.method == "complete/alternating"


def test_pair_moments_reduce_to_cross_moments():
    family, link, params, data = simulate_glm("gamma", 50, seed=13)
    records = RecordSet.from_complete(data, family)
    a, b = spec_a(), WeightSpec.constant(link, -0.6, 0.8, 2)
    assert_allclose(pair_moment_rows(family, link, params, a, b, records),
                    cross_moment_rows(family, link, params, a, b, data.X), rtol=1e-10, atol=1e-14)


def test_censored_layout(censored):
    assert censored.n == 800
    exact = censored.is_exact
    assert np.all(censored.y[exact] > censored.trunc_lo[exact])
    assert np.all(censored.y[exact] <= censored.unc_hi[exact])
    assert np.all(np.isnan(censored.y[~exact]))
    assert set(np.unique(censored.trunc_lo)) <= {0.0, 0.5}
    assert set(np.unique(censored.int_lo)) <= {10.0, 20.0}
    assert 0 < (~exact).sum() < 200


def test_censored_mle_maximizes_the_observed_likelihood(censored):
    result = fit_censtrun(GAMMA, LOG, WeightSpec.mle(), censored)
    assert result.converged
    assert result.method == "censored-newton"

    def objective(psi):
        return -observed_loglik(GAMMA, LOG, ParamVector(psi[:-1], np.exp(psi[-1])), censored)

    start = np.append(TRUTH.beta, np.log(TRUTH.phi))
    oracle = optimize.minimize(objective, start, method="Nelder-Mead",
                               options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 8000, "maxfev": 8000})
    assert_allclose(result.params.beta, oracle.x[:-1], rtol=1e-4, atol=1e-5)
    assert_allclose(result.params.phi, np.exp(oracle.x[-1]), rtol=1e-4)


def test_weighted_censored_fit(censored):
    result = fit_censtrun(GAMMA, LOG, spec_a(), censored)
    assert result.converged
    assert np.max(np.abs(extended_score(GAMMA, LOG, result.params, spec_a(), censored))) < 1e-6 * censored.n
    assert np.all(result.standard_errors > 0)
    # consistent for the truth: within a generous 5 standard errors
    assert np.all(np.abs(result.params.as_array() - TRUTH.as_array()) < 5 * result.standard_errors)


def test_censored_information_identity():
    records = generate(censored_gamma_design("I", n=4000, seed=21))
    gamma_m, lam_m = censtrun_information(GAMMA, LOG, TRUTH, spec_a(), records, "model")
    gamma_e, lam_e = censtrun_information(GAMMA, LOG, TRUTH, spec_a(), records, "empirical")
    assert_allclose(gamma_e, gamma_m, atol=0.06 * np.abs(gamma_m).max())
    assert_allclose(lam_e, lam_m, atol=0.1 * np.abs(lam_m).max())


def test_observed_loglik_of_complete_records_is_the_plain_loglik():
    family, link, params, data = simulate_glm("gamma", 100, seed=14)
    records = RecordSet.from_complete(data, family)
    plain = np.sum(family.log_density(params.theta(link, data.X), params.phi, data.y))
    assert_allclose(observed_loglik(family, link, params, records), plain, rtol=1e-12)


def test_d_terms_add_over_a_partition():
    theta, phi = -1.0, 0.5
    q = 0.8
    left = d_terms(GAMMA, theta, phi, Interval(0.0, q))
    right = d_terms(GAMMA, theta, phi, Interval(q, np.inf))
    whole = d_terms(GAMMA, theta, phi, Interval(0.0, np.inf))
    for key in ("mass", "D_theta", "D_phi", "D_theta_theta", "D_theta_phi", "D_phi_phi"):
        assert_allclose(left.to_dict()[key] + right.to_dict()[key], whole.to_dict()[key], rtol=1e-7, atol=1e-9)
    assert d_terms(GAMMA, theta, phi, Interval(-5.0, -1.0)).mass == 0.0


def test_censored_calibration_hits_the_ratio(censored):
    mle = fit_censtrun(GAMMA, LOG, WeightSpec.mle(), censored).params
    assert calibrate_censored(GAMMA, LOG, mle, censored, 0.9, 1.0).is_mle
    spec = calibrate_censored(GAMMA, LOG, mle, censored, 0.9, 0.5)

    X, T = censored.X, censored.trunc_lo
    theta = mle.theta(LOG, X)
    q = np.quantile(censored.y[censored.is_exact], 0.9)
    q_lo = np.maximum(q, T)
    tilted = transform(GAMMA, theta, mle.phi, spec, X, LOG)
    lam = bias_adjustment(GAMMA, theta, mle.phi, spec, X, LOG)
    tail = lam * GAMMA.cdf(tilted.theta_star, tilted.phi_star, q_lo, np.inf) / GAMMA.cdf(theta, mle.phi, q_lo, np.inf)
    whole = lam * GAMMA.cdf(tilted.theta_star, tilted.phi_star, T, np.inf) / GAMMA.cdf(theta, mle.phi, T, np.inf)
    assert_allclose(np.mean(tail) / np.mean(whole), 0.5, rtol=1e-6)


def test_all_censored_records_need_a_start():
    scheme = CensoringScheme.from_limits(Interval(0.0, np.inf), Interval(1.0, np.inf))
    records = RecordSet.from_records([ObservationRecord((1.0, x), scheme, CensoredIn(0))
                                      for x in np.linspace(-1, 1, 10)])
    with pytest.raises(DomainError) as info:
        fit_censtrun(GAMMA, LOG, WeightSpec.mle(), records)
    assert info.value.parameter == "init"


NORMAL = get_family("normal")
IDENTITY = make_link(NORMAL, "canonical")
# exact on (0.5, 4], censored above 4
TAIL_SCHEME = CensoringScheme.from_limits(Interval(0.5, np.inf), Interval(4.0, np.inf))
ROWS = ((1.0, -0.6), (1.0, 0.4), (1.0, 1.2))


def single(x, scheme, outcome):
    return RecordSet.from_records([ObservationRecord(x, scheme, outcome)])


def test_fully_censored_normal_record():
    scheme = CensoringScheme.from_limits(Interval(), Interval(0.0, np.inf))
    records = single((1.0,), scheme, CensoredIn(0))
    params = ParamVector((0.0,), 1.0)
    got = extended_score(NORMAL, IDENTITY, params, WeightSpec.mle(), records)
    # d/dtheta log P(Y > 0) = f(0) / P(Y > 0)
    assert got[0] == pytest.approx(stats.norm.pdf(0.0) / 0.5, rel=1e-7)

    def loglik(p):
        return np.atleast_1d(observed_loglik(NORMAL, IDENTITY, ParamVector.from_array(p), records))

    assert_allclose(got, central_jacobian(loglik, params.as_array())[0], rtol=1e-7, atol=1e-9)

    truncated = single((1.0, 0.3), CensoringScheme.from_limits(Interval(-0.5, np.inf), Interval(1.0, np.inf)),
                       CensoredIn(0))
    moved = ParamVector((0.2, -0.4), 0.7)
    got = extended_score(NORMAL, IDENTITY, moved, WeightSpec.mle(), truncated)
    numeric = central_jacobian(
        lambda p: np.atleast_1d(observed_loglik(NORMAL, IDENTITY, ParamVector.from_array(p), truncated)),
        moved.as_array())[0]
    assert_allclose(got, numeric, rtol=1e-7, atol=1e-9)


def expected_extended_score(params, x, spec, nodes=200):
    """E[S(params)] for one record of TAIL_SCHEME when the data follow TRUTH"""
    theta = float(TRUTH.theta(LOG, np.atleast_2d(x))[0])
    phi = TRUTH.phi
    t_mass = GAMMA.cdf(theta, phi, 0.5, np.inf)

    u, w = np.polynomial.legendre.leggauss(nodes)
    y, w = 2.25 + 1.75 * u, 1.75 * w
    exact = RecordSet.from_records([ObservationRecord(x, TAIL_SCHEME, ExactValue(v)) for v in y])
    density = np.exp(GAMMA.log_density(theta, phi, y)) / t_mass
    inside = (w * density) @ extended_score_contributions(GAMMA, LOG, params, spec, exact)

    p_tail = GAMMA.cdf(theta, phi, 4.0, np.inf) / t_mass
    tail = single(x, TAIL_SCHEME, CensoredIn(0))
    return inside + p_tail * extended_score_contributions(GAMMA, LOG, params, spec, tail)[0]


@pytest.mark.parametrize("spec", [WeightSpec.mle(), spec_a()], ids=["mle", "weighted"])
def test_extended_score_has_zero_mean_at_the_truth(spec):
    for x in ROWS:
        assert_allclose(expected_extended_score(TRUTH, x, spec), 0.0, atol=1e-7)
    # away from the truth the mean score no longer vanishes
    off = ParamVector((1.2, 0.5), 0.5)
    assert np.max(np.abs(expected_extended_score(off, ROWS[0], spec))) > 1e-2


def test_censored_gamma_matrix_is_the_expected_score_jacobian():
    records = RecordSet.from_records([ObservationRecord(x, TAIL_SCHEME, CensoredIn(0)) for x in ROWS])
    gamma_m, _ = censtrun_information(GAMMA, LOG, TRUTH, spec_a(), records, "model")

    def mean_expected(p):
        params = ParamVector.from_array(p)
        return np.mean([expected_extended_score(params, x, spec_a()) for x in ROWS], axis=0)

    jacobian = central_jacobian(mean_expected, TRUTH.as_array())
    assert_allclose(gamma_m, jacobian, rtol=1e-4, atol=1e-4 * np.abs(gamma_m).max())


def test_empirical_censored_lambda_is_the_outer_product_average(censored):
    _, lam = censtrun_information(GAMMA, LOG, TRUTH, spec_a(), censored, "empirical")
    contrib = extended_score_contributions(GAMMA, LOG, TRUTH, spec_a(), censored)
    assert_allclose(lam, np.einsum("np,nq->pq", contrib, contrib) / censored.n, rtol=1e-10, atol=1e-14)


PARTITIONS = [
    (GAMMA, -1.0, 0.5, CensoringScheme(Interval(0.2, np.inf), Interval(1.0, 5.0),
                                       (Interval(0.2, 1.0), Interval(5.0, np.inf)))),
    (GAMMA, -0.3, 0.2, TAIL_SCHEME),
    (GAMMA, -2.0, 1.5, CensoringScheme(Interval(0.0, 3.0), Interval(0.1, 2.0),
                                       (Interval(0.0, 0.1), Interval(2.0, 3.0)))),
    (NORMAL, 0.3, 0.7, CensoringScheme(Interval(-1.0, np.inf), Interval(-0.5, 2.0),
                                       (Interval(-1.0, -0.5), Interval(2.0, np.inf)))),
]


@pytest.mark.parametrize("family, theta, phi, scheme", PARTITIONS)
def test_partition_probabilities_and_truncated_density(family, theta, phi, scheme):
    t = scheme.truncation
    t_mass = family.cdf(theta, phi, t.lo, t.hi)
    pieces = [family.cdf(theta, phi, p.lo, p.hi) for p in (scheme.uncensored,) + scheme.censor_intervals]
    assert sum(pieces) / t_mass == pytest.approx(1.0, abs=1e-8)

    lo = max(t.lo, family.support.lo)
    total, _ = integrate.quad(lambda y: float(np.exp(family.log_density(theta, phi, y))) / t_mass, lo, t.hi,
                              epsabs=1e-12, epsrel=1e-11, limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_normal_half_line_d_terms():
    terms = d_terms(NORMAL, 0.0, 1.0, Interval(-np.inf, 0.0))
    assert terms.mass == pytest.approx(0.5, rel=1e-10)
    assert terms.theta == pytest.approx(-1.0 / np.sqrt(2.0 * np.pi), rel=1e-9)
    assert terms.theta_theta == pytest.approx(0.5, rel=1e-9)


def gamma_lower_moments(theta, phi, x):
    """E[g(Y) ; Y <= x] for g in 1, y, y^2, log y, y log y, (log y)^2 from incomplete gamma functions"""
    k, rate = 1.0 / phi, -theta / phi
    z = rate * x

    def lower(a):
        return special.gammainc(a, z)

    def log_moments(a, h1=1e-5, h2=1e-3):
        # d/da and d2/da2 of the regularized incomplete gamma give the incomplete digamma/trigamma integrals
        d1 = (lower(a + h1) - lower(a - h1)) / (2.0 * h1)
        d2 = (lower(a + h2) - 2.0 * lower(a) + lower(a - h2)) / h2 ** 2
        psi, tri = special.digamma(a), special.polygamma(1, a)
        return d1 + psi * lower(a), d2 + 2.0 * psi * d1 + (psi ** 2 + tri) * lower(a)

    log_rate = np.log(rate)
    mean = k / rate
    first, second = log_moments(k)
    shifted, _ = log_moments(k + 1.0)
    return {
        "1": lower(k),
        "y": mean * lower(k + 1.0),
        "yy": k * (k + 1.0) / rate ** 2 * lower(k + 2.0),
        "log": first - log_rate * lower(k),
        "loglog": second - 2.0 * log_rate * first + log_rate ** 2 * lower(k),
        "ylog": mean * (shifted - log_rate * lower(k + 1.0)),
    }


GAMMA_SPOTS = [
    (-1.0, 0.5, Interval(0.0, 0.8)),
    (-1.0, 0.5, Interval(0.8, np.inf)),
    (-0.3, 0.2, Interval(2.0, 5.0)),
    (-2.0, 1.5, Interval(0.1, 1.0)),
    (-0.5, 0.8, Interval(0.5, 10.0)),
]


@pytest.mark.parametrize("theta, phi, region", GAMMA_SPOTS)
def test_gamma_d_terms_match_incomplete_gamma_functions(theta, phi, region):
    hi, lo = gamma_lower_moments(theta, phi, region.hi), gamma_lower_moments(theta, phi, region.lo)
    m = {key: hi[key] - lo[key] for key in hi}
    mu = -1.0 / theta
    c = np.log(-theta) - (np.log(phi) - 1.0 + special.digamma(1.0 / phi))
    expected = [
        m["1"],
        m["y"] - mu * m["1"],
        theta * m["y"] + c * m["1"] + m["log"],
        m["yy"] - 2.0 * mu * m["y"] + mu ** 2 * m["1"],
        (theta * m["yy"] + c * m["y"] + m["ylog"] - mu * theta * m["y"] - mu * c * m["1"] - mu * m["log"]),
        (theta ** 2 * m["yy"] + c ** 2 * m["1"] + m["loglog"] + 2.0 * theta * c * m["y"]
         + 2.0 * theta * m["ylog"] + 2.0 * c * m["log"]),
    ]
    terms = d_terms(GAMMA, theta, phi, region)
    got = [terms.mass, terms.theta, terms.phi, terms.theta_theta, terms.theta_phi, terms.phi_phi]
    assert_allclose(got, expected, rtol=1e-6, atol=1e-7)


def censor_glm(name, n, seed):
    """Left-truncated, right-censored records built from a simulated GLM sample"""
    family, link, params, data = simulate_glm(name, n, seed)
    lo, hi = np.quantile(data.y, [0.05, 0.85])
    scheme = CensoringScheme.from_limits(Interval(lo, np.inf), Interval(hi, np.inf))
    records = [ObservationRecord(x, scheme, ExactValue(y) if y <= hi else CensoredIn(0))
               for x, y in zip(data.X, data.y) if y > lo]
    return family, link, params, RecordSet.from_records(records)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", ["gamma", "normal", "invgauss"])
def test_censored_mle_spec_is_the_observed_likelihood_maximizer(name, seed):
    family, link, params, records = censor_glm(name, 150, seed=100 + seed)
    result = fit_censtrun(family, link, WeightSpec.mle(), records,
                          FitOptions(tol=1e-11, param_tol=1e-9, compute_covariance=False))
    assert result.method == "censored-newton"

    def objective(psi):
        return -observed_loglik(family, link, ParamVector(psi[:-1], np.exp(psi[-1])), records)

    oracle = stationary_point(objective, np.append(params.beta, np.log(params.phi)))
    assert_allclose(result.params.beta, oracle[:-1], rtol=1e-8, atol=1e-8)
    assert_allclose(result.params.phi, np.exp(oracle[-1]), rtol=1e-8, atol=1e-8)
