"""
Score-based weighted likelihood estimation on complete data.

The weighted score of one observation is W(y, x) times the gradient of the
log transformed density log f*(y; theta*, phi*) with respect to (beta, phi).
Canonical links are fitted in one shot (weighted GLM for the transformed
coefficients, scalar root for the transformed dispersion, then reverted);
other links alternate an IRLS coefficient step with a dispersion root.
"""
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import BracketError, CalibrationError, ConvergenceError, DomainError, SingularMatrixError
from .families import EdmFamily, LinkSpec, ParamVector
from .logger import get_module_logger
from .numerics import central_jacobian, find_root, scan_bracket, solve_linear, solve_spd
from .weighting import Tilt, WeightSpec, apply_tilt, checked_exp, log_bias_adjustment, log_weight, tilt_of

logger = get_module_logger("fit")

COVARIANCE_ESTIMATORS = ("model", "empirical")


@dataclass(frozen=True)
class GlmData:
    """Responses y (n,) and design matrix X (n, P)"""
    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.shape[0]:
            raise DomainError(f"design has {X.shape[0]} rows but y has {y.shape[0]} entries", "X")
        if y.size == 0:
            raise DomainError("empty dataset", "y")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class FitOptions:
    init: Optional[ParamVector] = None
    tol: float = 1e-8
    param_tol: float = 1e-6
    max_iter: int = 500
    compute_covariance: bool = True
    covariance_estimator: str = "model"
    raise_on_failure: bool = True


@dataclass(frozen=True)
class FitResult:
    params: ParamVector
    covariance: Optional[np.ndarray]
    iterations: int
    final_score_norm: float
    converged: bool
    spec: WeightSpec
    n_obs: int
    method: str
    family: str = ""
    link: str = ""
    trace: Tuple[Dict[str, float], ...] = field(default=(), repr=False)

    @property
    def standard_errors(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def to_dict(self):
        se = self.standard_errors
        return {
            "family": self.family,
            "link": self.link,
            "spec": self.spec.to_dict(),
            "params": self.params.to_dict(),
            "standard_errors": None if se is None else se.tolist(),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "iterations": self.iterations,
            "final_score_norm": self.final_score_norm,
            "converged": self.converged,
            "n_obs": self.n_obs,
            "method": self.method,
        }


# ---------------------------------------------------------------------------
# Per-row quantities
# ---------------------------------------------------------------------------

@dataclass
class RowState:
    """Model and transformed parameters of every row for one weight spec"""
    theta: np.ndarray
    phi: np.ndarray
    dxi: np.ndarray
    tilt: Tilt
    theta_s: np.ndarray
    phi_s: np.ndarray
    kappa: np.ndarray
    log_lam: np.ndarray

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        """d(theta*, phi*)/d(beta, phi), shape (n, 2, P+1)"""
        n, p = X.shape
        ratio = self.phi_s / self.phi
        out = np.zeros((n, 2, p + 1))
        out[:, 0, :p] = (ratio * self.dxi)[:, None] * X
        out[:, 0, p] = ratio ** 2 * self.kappa
        out[:, 1, p] = ratio ** 2
        return out

    def dlogf(self) -> np.ndarray:
        """d log f*/d(theta*, phi*) per unit of the score terms, shape (n, 2)"""
        return np.column_stack([1.0 / self.phi_s, -1.0 / self.phi_s ** 2])


def row_state(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec, X) -> RowState:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    eta = params.eta(X)
    theta = link.xi(eta)
    phi = np.full_like(theta, params.phi)
    family.check_params(theta, phi)
    tilt = tilt_of(family, link, spec, X)
    theta_s, phi_s = apply_tilt(family, theta, phi, tilt)
    kappa = tilt.a1 - tilt.a2 * theta
    log_lam = log_bias_adjustment(family, theta, phi, theta_s, phi_s, tilt.log_scale)
    return RowState(theta, phi, link.dxi(eta), tilt, theta_s, phi_s, kappa, log_lam)


def score_shift(family: EdmFamily, theta_ab, phi_ab, theta_s, phi_s) -> np.ndarray:
    """Offsets c with s(theta_s, phi_s) = L (u, v) + c, u and v the score terms at (theta_ab, phi_ab)"""
    delta = family.dcumulant(theta_ab) - family.dcumulant(theta_s)
    d = ((theta_s - theta_ab) * family.dcumulant(theta_ab)
         - (family.cumulant(theta_s) - family.cumulant(theta_ab))
         - (phi_s ** 2 * family.db(phi_s) - phi_ab ** 2 * family.db(phi_ab)))
    return np.stack([delta, d], axis=-1)


def lag_matrix(theta_s, theta_ab) -> np.ndarray:
    out = np.zeros(np.shape(theta_s) + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    out[..., 1, 0] = theta_s - theta_ab
    return out


# ---------------------------------------------------------------------------
# Score and weighted likelihood
# ---------------------------------------------------------------------------

def _contributions(family: EdmFamily, state: RowState, y: np.ndarray, X: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    s_theta, s_phi = family.score_terms(state.theta_s, state.phi_s, y)
    terms = state.dlogf() * np.column_stack([s_theta, s_phi])
    w = np.exp(log_w)
    return w[:, None] * np.einsum("nip,ni->np", state.jacobian(X), terms)


def score_contributions(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec,
                        data: GlmData) -> np.ndarray:
    """Per-observation weighted scores, shape (n, P+1)"""
    state = row_state(family, link, params, spec, data.X)
    return _contributions(family, state, data.y, data.X, log_weight(family, state.tilt, data.y))


def score(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec, data: GlmData) -> np.ndarray:
    """(S_beta, S_phi) summed over observations"""
    return score_contributions(family, link, params, spec, data).sum(axis=0)


def weighted_loglik(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec,
                    data: GlmData) -> float:
    """sum_i W(y_i, x_i) log f*(y_i); its gradient is the weighted score"""
    state = row_state(family, link, params, spec, data.X)
    w = np.exp(log_weight(family, state.tilt, data.y))
    return float(np.sum(w * family.log_density(state.theta_s, state.phi_s, data.y)))


def _relative_norm(family, link, params, spec, data) -> float:
    state = row_state(family, link, params, spec, data.X)
    log_w = log_weight(family, state.tilt, data.y)
    log_w = log_w - np.max(log_w)
    contrib = _contributions(family, state, data.y, data.X, log_w)
    return float(np.max(np.abs(contrib.sum(axis=0))) / np.sum(np.exp(log_w)))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _validate(family: EdmFamily, data: GlmData) -> None:
    if data.n <= data.n_coef + 1:
        raise DomainError(f"need more than P+1={data.n_coef + 1} observations, got {data.n}", "n", data.n)
    outside = ~family.in_support(data.y)
    if np.any(outside):
        first = int(np.flatnonzero(outside)[0])
        raise DomainError(f"response y[{first}]={data.y[first]:g} is outside the support of the "
                          f"{family.family_id.value} family", "y", float(data.y[first]))
    rank = np.linalg.matrix_rank(data.X)
    if rank < data.n_coef:
        raise DomainError(f"design matrix is rank deficient (rank {rank} < {data.n_coef} columns)", "X", rank)


def _irls(family: EdmFamily, X: np.ndarray, y: np.ndarray, w: np.ndarray, beta0: np.ndarray,
          theta_map: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
          max_iter: int = 100, tol: float = 1e-12, max_halvings: int = 20) -> Tuple[np.ndarray, int]:
    """Fisher scoring for sum_i w_i (y_i - A'(theta_i)) dtheta_i/deta_i x_i = 0.

    ``theta_map(beta)`` returns theta and dtheta/deta for every row. Steps
    are halved while they leave the valid region or raise the score norm.
    """
    beta = np.asarray(beta0, dtype=float)
    theta, d = theta_map(beta)
    if not np.all(family.valid_theta(theta)):
        raise DomainError("IRLS start leaves the valid parameter region", "beta")

    def gradient(theta_, d_):
        return X.T @ (w * (y - family.dcumulant(theta_)) * d_)

    grad = gradient(theta, d)
    iteration = 0
    for iteration in range(1, max_iter + 1):
        info = (X * (w * family.d2cumulant(theta) * d ** 2)[:, None]).T @ X
        step = solve_spd(info, grad, label="IRLS information")
        norm = np.max(np.abs(grad))
        t = 1.0
        for halving in range(max_halvings + 1):
            candidate = beta + t * step
            theta_c, d_c = theta_map(candidate)
            if np.all(family.valid_theta(theta_c)):
                grad_c = gradient(theta_c, d_c)
                if np.max(np.abs(grad_c)) <= norm * (1.0 + 1e-10) or halving == max_halvings:
                    break
            t *= 0.5
        else:
            raise ConvergenceError("IRLS step stayed outside the valid region after "
                                   f"{max_halvings} halvings", [{"iteration": iteration}])
        change = np.max(np.abs(candidate - beta))
        beta, theta, d, grad = candidate, theta_c, d_c, grad_c
        if change <= tol * (1.0 + np.max(np.abs(beta))) or np.max(np.abs(grad)) == 0.0:
            break
    return beta, iteration


def _solve_log_dispersion(fn: Callable[[float], float], centre: float, what: str,
                          half_width: float = 6.0) -> float:
    """Root in phi of fn(log phi), bracketed within centre +- half_width on the log scale"""
    def safe(lp):
        try:
            value = fn(lp)
        except (CalibrationError, DomainError, FloatingPointError):
            return np.nan
        return value if np.isfinite(value) else np.nan

    points = list(centre + np.linspace(-half_width, half_width, 49))
    try:
        bracket = scan_bracket(safe, points)
        root = find_root(safe, bracket, tol=1e-13)
    except BracketError as e:
        lo, hi = np.exp(points[0]), np.exp(points[-1])
        raise BracketError(f"{what}: dispersion root not bracketed in phi on [{lo:.6g}, {hi:.6g}]",
                           interval=(lo, hi), values=e.values)
    return float(np.exp(root))


def _start_beta(family: EdmFamily, link: LinkSpec, data: GlmData) -> np.ndarray:
    ybar = float(np.mean(data.y))
    mix = (data.y + ybar) / 2.0
    if not link.is_canonical or family.support.lo >= 0:
        floor = 1e-3 * max(float(np.mean(np.abs(data.y))), 1e-12)
        mix = np.maximum(mix, floor)
    beta, *_ = np.linalg.lstsq(data.X, link.eta_from_mean(mix), rcond=None)
    if np.all(family.valid_theta(link.xi(data.X @ beta))):
        return beta
    ones = np.flatnonzero(np.all(data.X == 1.0, axis=0))
    if ones.size == 0:
        raise DomainError("no valid starting coefficients and no intercept column to fall back on", "beta")
    beta = np.zeros(data.n_coef)
    beta[ones[0]] = float(link.eta_from_mean(max(ybar, 1e-12) if family.support.lo >= 0 else ybar))
    return beta


def initial_estimate(family: EdmFamily, link: LinkSpec, data: GlmData) -> ParamVector:
    """Unweighted IRLS maximum likelihood coefficients and the Pearson dispersion"""
    _validate(family, data)

    def theta_map(beta):
        eta = data.X @ beta
        return link.xi(eta), link.dxi(eta)

    beta, _ = _irls(family, data.X, data.y, np.ones(data.n), _start_beta(family, link, data), theta_map)
    theta = link.xi(data.X @ beta)
    pearson = np.sum((data.y - family.dcumulant(theta)) ** 2 / family.d2cumulant(theta))
    phi = float(pearson / max(data.n - data.n_coef, 1))
    return ParamVector(beta, phi)


def _fit_canonical(family, link, spec, data, init, log_w, options):
    """One-shot fit: weighted GLM for beta*, dispersion root for phi*, then revert"""
    X, y = data.X, data.y
    w = np.exp(log_w)
    tilt = tilt_of(family, link, spec, X)
    try:
        theta_s0, _ = apply_tilt(family, init.theta(link, X), init.phi, tilt)
        beta_s0, *_ = np.linalg.lstsq(X, theta_s0, rcond=None)
        if not np.all(family.valid_theta(X @ beta_s0)):
            raise CalibrationError("start outside region")
    except CalibrationError:
        beta_s0 = _start_beta(family, link, GlmData(y, X))

    beta_s, iterations = _irls(family, X, y, w, beta_s0, lambda b: (X @ b, np.ones(len(y))),
                               max_iter=options.max_iter)
    theta_s = X @ beta_s
    target = np.sum(w * (theta_s * y - family.cumulant(theta_s) + family.g(y))) / np.sum(w)
    pearson = np.sum(w * (y - family.dcumulant(theta_s)) ** 2 / family.d2cumulant(theta_s)) / np.sum(w)

    def dispersion_equation(log_phi):
        phi_s = np.exp(log_phi)
        return phi_s ** 2 * family.db(phi_s) - target

    phi_s = _solve_log_dispersion(dispersion_equation, np.log(pearson), "canonical fit")
    inv_phi = 1.0 / phi_s - tilt.a2
    if not inv_phi > 0:
        raise CalibrationError(f"reverted dispersion is not positive (1/phi* - 1/phi~ + c = {inv_phi:.6g})",
                               "1/phi* > 1/phi~ - c")
    phi = 1.0 / inv_phi
    beta_tilde = np.zeros(data.n_coef) if spec.is_mle else np.asarray(spec.beta_tilde) / spec.phi_tilde
    beta = (beta_s / phi_s - beta_tilde) * phi
    trace = [{"iteration": iterations, "phi_star": phi_s, "phi": phi}]
    logger.debug(f"canonical fit: {iterations} IRLS iterations, phi*={phi_s:.6g}, phi={phi:.6g}")
    return ParamVector(beta, phi), iterations, trace, True


def _fit_alternating(family, link, spec, data, init, log_w, options):
    """Alternate a Fisher-scoring beta step and a dispersion root until both settle"""
    X, y = data.X, data.y
    w = np.exp(log_w)
    tilt = tilt_of(family, link, spec, X)
    beta, phi = np.asarray(init.beta, dtype=float), init.phi
    trace: List[Dict[str, float]] = []
    settled = False

    for iteration in range(1, options.max_iter + 1):
        inv_phi_s = 1.0 / phi + tilt.a2
        if not inv_phi_s > 0:
            raise CalibrationError(f"phi*={1.0 / inv_phi_s:.6g} is not positive at phi={phi:.6g}", "phi* > 0")
        phi_s = 1.0 / inv_phi_s

        def theta_map(b, phi=phi, phi_s=phi_s):
            eta = X @ b
            return (link.xi(eta) / phi + tilt.a1) * phi_s, (phi_s / phi) * link.dxi(eta)

        new_beta, inner = _irls(family, X, y, w, beta, theta_map)

        theta = link.xi(X @ new_beta)

        def dispersion_equation(log_phi, theta=theta):
            phi_ = np.exp(log_phi)
            theta_s, phi_s_ = apply_tilt(family, theta, phi_, tilt)
            s_theta, s_phi = family.score_terms(theta_s, phi_s_, y)
            kappa = tilt.a1 - tilt.a2 * theta
            return float(np.sum(w * (phi_s_ * kappa * s_theta - s_phi)))

        new_phi = _solve_log_dispersion(dispersion_equation, np.log(phi), "dispersion step")
        change = max(float(np.max(np.abs(new_beta - beta))), abs(new_phi - phi))
        beta, phi = new_beta, new_phi
        norm = _relative_norm(family, link, ParamVector(beta, phi), spec, data)
        trace.append({"iteration": iteration, "inner": inner, "phi": phi, "change": change, "score_norm": norm})
        logger.debug(f"alternating iteration {iteration}: change={change:.3e} score_norm={norm:.3e} phi={phi:.6g}")
        if change < options.param_tol and norm < options.tol:
            settled = True
            break
    return ParamVector(beta, phi), iteration, trace, settled


def fit(family: EdmFamily, link: LinkSpec, spec: WeightSpec, data: GlmData,
        options: Optional[FitOptions] = None) -> FitResult:
    """Root of the weighted score equations with its sandwich covariance"""
    options = options or FitOptions()
    _validate(family, data)
    init = options.init or initial_estimate(family, link, data)

    tilt = tilt_of(family, link, spec, data.X)
    log_w = log_weight(family, tilt, data.y)
    log_w = log_w - np.max(log_w)

    if link.is_canonical:
        params, iterations, trace, settled = _fit_canonical(family, link, spec, data, init, log_w, options)
        method = "canonical"
    else:
        params, iterations, trace, settled = _fit_alternating(family, link, spec, data, init, log_w, options)
        method = "alternating"

    norm = _relative_norm(family, link, params, spec, data)
    converged = settled and norm < options.tol
    result = FitResult(params, None, iterations, norm, converged, spec, data.n, method,
                       family.family_id.value, link.link_id.value, tuple(trace))
    if not converged:
        message = (f"{spec.label()} fit did not converge after {iterations} iterations "
                   f"(relative score norm {norm:.3e}, tol {options.tol:g})")
        if options.raise_on_failure:
            raise ConvergenceError(message, list(trace))
        logger.warning(message)
        return result

    if options.compute_covariance:
        covariance = _covariance(family, link, params, spec, data, options.covariance_estimator)
        result = replace(result, covariance=covariance)
    logger.debug(f"{spec.label()}: beta={np.round(params.beta, 6).tolist()} phi={params.phi:.6g} "
                 f"({method}, {iterations} iterations, score norm {norm:.2e})")
    return result


# ---------------------------------------------------------------------------
# Sandwich covariance
# ---------------------------------------------------------------------------

def cross_moment_rows(family: EdmFamily, link: LinkSpec, params: ParamVector, spec_a: WeightSpec,
                      spec_b: WeightSpec, X) -> np.ndarray:
    """E[S_a S_b^T | x] for every row under the model at ``params``, shape (n, P+1, P+1)"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sa = row_state(family, link, params, spec_a, X)
    sb = row_state(family, link, params, spec_b, X)
    tilt_ab = sa.tilt + sb.tilt
    theta_ab, phi_ab = apply_tilt(family, sa.theta, sa.phi, tilt_ab, "theta**")
    lam = checked_exp(log_bias_adjustment(family, sa.theta, sa.phi, theta_ab, phi_ab, tilt_ab.log_scale))

    second = family.full_support_outer(theta_ab, phi_ab)
    la, lb = lag_matrix(sa.theta_s, theta_ab), lag_matrix(sb.theta_s, theta_ab)
    ca = score_shift(family, theta_ab, phi_ab, sa.theta_s, sa.phi_s)
    cb = score_shift(family, theta_ab, phi_ab, sb.theta_s, sb.phi_s)
    moment = np.einsum("nij,njk,nlk->nil", la, second, lb) + ca[:, :, None] * cb[:, None, :]
    return lam[:, None, None] * project_moment(moment, sa, sb, X)


def project_moment(moment: np.ndarray, sa: RowState, sb: RowState, X: np.ndarray) -> np.ndarray:
    """J_a^T diag(dlogf_a) M diag(dlogf_b) J_b"""
    inner = sa.dlogf()[:, :, None] * moment * sb.dlogf()[:, None, :]
    return np.einsum("nip,nij,njq->npq", sa.jacobian(X), inner, sb.jacobian(X))


def sandwich(gamma: np.ndarray, lam: np.ndarray, n: int, label: Optional[str] = None) -> np.ndarray:
    """(1/n) Gamma^{-1} Lambda Gamma^{-T}, symmetrized"""
    left = solve_linear(gamma, lam, label=label or "Gamma")
    cov = solve_linear(gamma, left.T, label=label or "Gamma").T / n
    return (cov + cov.T) / 2.0


def information_matrices(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec,
                         data: GlmData, estimator: str = "model") -> Tuple[np.ndarray, np.ndarray]:
    """(Gamma, Lambda): mean score Jacobian and mean score second moment"""
    if estimator == "model":
        mle = WeightSpec.mle()
        gamma = -cross_moment_rows(family, link, params, spec, mle, data.X).mean(axis=0)
        lam = cross_moment_rows(family, link, params, spec, spec, data.X).mean(axis=0)
        return gamma, lam
    if estimator == "empirical":
        contrib = score_contributions(family, link, params, spec, data)
        lam = contrib.T @ contrib / data.n
        gamma = central_jacobian(
            lambda p: score(family, link, ParamVector.from_array(p), spec, data) / data.n, params.as_array())
        return gamma, lam
    raise ValueError(f"unknown covariance estimator '{estimator}' (expected one of {COVARIANCE_ESTIMATORS})")


def _covariance(family, link, params, spec, data, estimator):
    gamma, lam = information_matrices(family, link, params, spec, data, estimator)
    try:
        return sandwich(gamma, lam, data.n)
    except SingularMatrixError as e:
        raise SingularMatrixError(f"Gamma for {spec.label()} is singular (condition {e.condition:.3e})",
                                  e.condition, spec.label())


def sandwich_covariance(family: EdmFamily, link: LinkSpec, fit_result: FitResult, data: GlmData,
                        estimator: str = "model") -> np.ndarray:
    return _covariance(family, link, fit_result.params, fit_result.spec, data, estimator)
