"""
Weight functions, transformed parameters and hyperparameter calibration.

A weight spec tilts the model density by

    W(y, x) = exp{theta_tilde*y/phi_tilde + (1/phi_tilde - c)*g(y)},   theta_tilde = xi(x^T beta_tilde)

whose normalization constant is fixed to exactly one (times ``exp(log_scale)``).
The tilted density f*W/lambda* belongs to the same family with parameters
(theta*, phi*), and lambda* has a closed form in the cumulant functions.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np

from .errors import BracketError, CalibrationError, DomainError, OverflowExponentError
from .families import EdmFamily, FamilyId, LinkSpec, ParamVector
from .logger import get_module_logger
from .numerics import find_root, make_rng, scan_bracket

if TYPE_CHECKING:
    from .censtrun import RecordSet

logger = get_module_logger("weighting")

MAX_EXPONENT = 700.0
CALIBRATION_DRAWS = 1_000_000


class WeightMode(str, Enum):
    MLE = "mle"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class WeightSpec:
    """Hyperparameters (beta_tilde, phi_tilde) of the weight function.

    ``WeightSpec.mle()`` is the flat weight W = 1. ``log_scale`` multiplies W by a
    positive constant; fitted roots do not depend on it.
    """
    mode: WeightMode = WeightMode.MLE
    beta_tilde: Tuple[float, ...] = ()
    phi_tilde: float = 1.0
    log_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", WeightMode(self.mode))
        object.__setattr__(self, "beta_tilde", tuple(float(b) for b in np.ravel(self.beta_tilde)))
        object.__setattr__(self, "phi_tilde", float(self.phi_tilde))
        if self.mode == WeightMode.WEIGHTED:
            if not self.beta_tilde:
                raise CalibrationError("weighted spec needs beta_tilde", "beta_tilde non-empty")
            if not (np.isfinite(self.phi_tilde) and self.phi_tilde > 0):
                raise CalibrationError(f"phi_tilde must be positive, got {self.phi_tilde:g}", "phi_tilde > 0")

    @classmethod
    def mle(cls) -> "WeightSpec":
        return cls(WeightMode.MLE)

    @classmethod
    def weighted(cls, beta_tilde: Sequence[float], phi_tilde: float, log_scale: float = 0.0) -> "WeightSpec":
        return cls(WeightMode.WEIGHTED, tuple(beta_tilde), phi_tilde, log_scale)

    @classmethod
    def constant(cls, link: LinkSpec, theta_tilde: float, phi_tilde: float, n_coef: int,
                 intercept: int = 0) -> "WeightSpec":
        """Spec whose theta_tilde is the same for every row (intercept-only beta_tilde)"""
        try:
            eta = float(link.inverse(theta_tilde))
        except (ValueError, FloatingPointError, DomainError):
            raise CalibrationError(f"theta_tilde={theta_tilde:g} is not reachable through the {link} link",
                                   "theta_tilde in link range")
        beta = np.zeros(n_coef)
        beta[intercept] = eta
        return cls.weighted(beta, phi_tilde)

    @property
    def is_mle(self) -> bool:
        return self.mode == WeightMode.MLE

    def scaled(self, log_factor: float) -> "WeightSpec":
        return WeightSpec(self.mode, self.beta_tilde, self.phi_tilde, self.log_scale + log_factor)

    def theta_tilde(self, link: LinkSpec, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.is_mle:
            return np.zeros(X.shape[0])
        if len(self.beta_tilde) != X.shape[1]:
            raise CalibrationError(f"beta_tilde has {len(self.beta_tilde)} entries but the design has "
                                   f"{X.shape[1]} columns", "len(beta_tilde) == P")
        return link.xi(X @ np.asarray(self.beta_tilde))

    def label(self) -> str:
        if self.is_mle:
            return "MLE"
        beta = ", ".join(f"{b:.4g}" for b in self.beta_tilde)
        return f"beta~=({beta}), phi~={self.phi_tilde:.4g}"

    def to_dict(self):
        out = {"mode": self.mode.value}
        if not self.is_mle:
            out["beta_tilde"] = list(self.beta_tilde)
            out["phi_tilde"] = self.phi_tilde
        if self.log_scale:
            out["log_scale"] = self.log_scale
        return out

    @classmethod
    def from_dict(cls, data) -> "WeightSpec":
        mode = WeightMode(str(data.get("mode", "weighted")).lower())
        if mode == WeightMode.MLE:
            return cls(WeightMode.MLE, log_scale=float(data.get("log_scale", 0.0)))
        return cls(mode, tuple(data["beta_tilde"]), float(data["phi_tilde"]), float(data.get("log_scale", 0.0)))


@dataclass(frozen=True)
class Tilt:
    """Per-row exponential tilt: log W = a1*y + a2*g(y) + log_scale"""
    a1: np.ndarray
    a2: float
    log_scale: float = 0.0

    def __add__(self, other: "Tilt") -> "Tilt":
        return Tilt(self.a1 + other.a1, self.a2 + other.a2, self.log_scale + other.log_scale)


def tilt_of(family: EdmFamily, link: LinkSpec, spec: WeightSpec, X) -> Tilt:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if spec.is_mle:
        return Tilt(np.zeros(X.shape[0]), 0.0, spec.log_scale)
    return Tilt(spec.theta_tilde(link, X) / spec.phi_tilde, 1.0 / spec.phi_tilde - family.c, spec.log_scale)


def apply_tilt(family: EdmFamily, theta, phi, tilt: Tilt, label: str = "theta*") -> Tuple[np.ndarray, np.ndarray]:
    """Parameters of f*W/lambda, raising CalibrationError outside the valid region"""
    inv_phi = 1.0 / phi + tilt.a2
    if not np.all(inv_phi > 0):
        raise CalibrationError(f"1/phi + 1/phi_tilde - c must be positive for {label} "
                               f"(min {np.min(inv_phi):g})", f"phi of {label} > 0")
    phi_s = 1.0 / inv_phi
    theta_s = (theta / phi + tilt.a1) * phi_s
    ok = family.valid_theta(theta_s)
    if not np.all(ok):
        bad = np.asarray(theta_s)[~np.asarray(ok)].ravel()[0]
        raise CalibrationError(f"{label}={bad:g} leaves the valid region of the {family.family_id.value} "
                               f"family ({family.theta_region})", f"{label}: {family.theta_region}")
    return theta_s, phi_s


def log_bias_adjustment(family: EdmFamily, theta, phi, theta_s, phi_s, log_scale: float = 0.0):
    return (family.cumulant(theta_s) / phi_s - family.b(phi_s)
            - family.cumulant(theta) / phi + family.b(phi) + log_scale)


def checked_exp(exponent):
    top = np.max(exponent)
    if top > MAX_EXPONENT:
        raise OverflowExponentError(f"bias adjustment exponent {top:.6g} overflows", float(top))
    return np.exp(exponent)


@dataclass(frozen=True)
class TransformedParams:
    theta_star: np.ndarray
    phi_star: np.ndarray
    theta_2star: np.ndarray
    phi_2star: np.ndarray


def transform(family: EdmFamily, theta, phi, spec: WeightSpec, x, link: Optional[LinkSpec] = None) -> TransformedParams:
    """(theta*, phi*) of f*W/lambda* and (theta**, phi**) of f*W^2/lambda**"""
    family.check_params(theta, phi)
    link = link or family.canonical_link()
    tilt = tilt_of(family, link, spec, np.atleast_2d(x))
    theta_s, phi_s = apply_tilt(family, theta, phi, tilt, "theta*")
    theta_ss, phi_ss = apply_tilt(family, theta, phi, tilt + tilt, "theta**")
    return TransformedParams(_squeeze(theta_s), _squeeze(phi_s), _squeeze(theta_ss), _squeeze(phi_ss))


def bias_adjustment(family: EdmFamily, theta, phi, spec: WeightSpec, x, link: Optional[LinkSpec] = None):
    """lambda* = integral of f*W over the support"""
    family.check_params(theta, phi)
    link = link or family.canonical_link()
    tilt = tilt_of(family, link, spec, np.atleast_2d(x))
    theta_s, phi_s = apply_tilt(family, theta, phi, tilt)
    return _squeeze(checked_exp(log_bias_adjustment(family, theta, phi, theta_s, phi_s, tilt.log_scale)))


def log_weight(family: EdmFamily, tilt: Tilt, y):
    y = np.asarray(y, dtype=float)
    inside = family.in_support(y)
    y_safe = np.where(inside, y, family._interior_point)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = tilt.a1 * y_safe + tilt.a2 * family.g(y_safe) + tilt.log_scale
    return np.where(inside, value, -np.inf)


def weight_eval(family: EdmFamily, spec: WeightSpec, y, x, link: Optional[LinkSpec] = None):
    link = link or family.canonical_link()
    y = np.asarray(y, dtype=float)
    if np.any(~family.in_support(y)):
        raise DomainError(f"response outside the support of the {family.family_id.value} family", "y")
    tilt = tilt_of(family, link, spec, np.atleast_2d(x))
    return _squeeze(np.exp(log_weight(family, tilt, y)))


def _squeeze(values):
    values = np.asarray(values)
    return float(values.ravel()[0]) if values.size == 1 else values


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass
class _FreeHyperparameter:
    """One-parameter family of specs indexed by h on the real line"""
    family: EdmFamily
    link: LinkSpec
    n_coef: int
    intercept: int
    mean: float
    spread: float
    centre: float = field(init=False)

    def __post_init__(self):
        if self.family.family_id == FamilyId.GAMMA:
            # theta_tilde = -exp(h), weight exp(theta_tilde * y)
            self.centre = -np.log(self.mean)
        elif self.family.family_id == FamilyId.NORMAL:
            self.centre = np.log(self.spread)
        else:
            self.centre = np.log(self.spread / self.mean ** 3)

    def tilt_coefficients(self, h: float) -> Tuple[float, float]:
        if self.family.family_id == FamilyId.GAMMA:
            return -np.exp(h), 1.0
        phi_tilde = np.exp(h)
        theta_tilde = self.mean if self.family.family_id == FamilyId.NORMAL else -0.5 / self.mean ** 2
        return theta_tilde, phi_tilde

    def spec(self, h: float) -> WeightSpec:
        theta_tilde, phi_tilde = self.tilt_coefficients(h)
        return WeightSpec.constant(self.link, theta_tilde, phi_tilde, self.n_coef, self.intercept)

    def grid(self, half_width: float = 15.0, points: int = 61) -> np.ndarray:
        return self.centre + np.linspace(-half_width, half_width, points)


def _intercept_column(X: np.ndarray) -> int:
    hits = np.flatnonzero(np.all(X == 1.0, axis=0))
    if hits.size == 0:
        raise CalibrationError("calibration needs an intercept column of ones in the design", "intercept column")
    return int(hits[0])


def _check_levels(alpha: float, delta: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}", "0 < alpha < 1")
    if not 0.0 < delta <= 1.0:
        raise CalibrationError(f"delta must lie in (0, 1], got {delta}", "0 < delta <= 1")


def _solve_ratio(free: _FreeHyperparameter, ratio, delta: float, what: str) -> WeightSpec:
    points = free.grid()
    try:
        bracket = scan_bracket(lambda h: ratio(h) - delta, list(points))
        h = find_root(lambda h: ratio(h) - delta, bracket, tol=1e-10)
    except BracketError as e:
        raise CalibrationError(f"{what}: no hyperparameter gives tail-weight ratio {delta} ({e})",
                               "tail-weight ratio bracketed", (float(points[0]), float(points[-1])))
    spec = free.spec(h)
    logger.debug(f"{what}: delta={delta} solved at h={h:.6g} ratio={ratio(h):.6g} -> {spec.label()}")
    return spec


def calibrate_complete(family: EdmFamily, link: LinkSpec, true_params: ParamVector, x_sample,
                       alpha: float, delta: float, seed: int = 0,
                       n_draws: int = CALIBRATION_DRAWS) -> WeightSpec:
    """Spec whose average weight beyond the alpha-quantile is delta times the overall average.

    Responses are simulated from the model with antithetic uniforms pushed
    through the quantile function; covariate rows are cycled from ``x_sample``.
    """
    _check_levels(alpha, delta)
    if delta == 1.0:
        return WeightSpec.mle()
    X = np.atleast_2d(np.asarray(x_sample, dtype=float))
    intercept = _intercept_column(X)

    rng = make_rng(seed)
    half = rng.random(n_draws // 2)
    u = np.concatenate([half, 1.0 - half])
    rows = np.arange(u.size) % X.shape[0]
    theta = true_params.check(family, link, X)[rows]
    y = family.ppf(theta, true_params.phi, u)
    y = y[np.isfinite(y)]
    q = np.quantile(y, alpha)
    tail = y > q

    free = _FreeHyperparameter(family, link, X.shape[1], intercept, float(np.mean(y)), float(np.var(y)))
    g_y = family.g(y)

    def ratio(h):
        theta_tilde, phi_tilde = free.tilt_coefficients(h)
        log_w = theta_tilde / phi_tilde * y + (1.0 / phi_tilde - family.c) * g_y
        w = np.exp(log_w - log_w.max())
        return float(np.mean(w[tail]) / np.mean(w))

    logger.info(f"Calibrating {family.family_id.value} weight: alpha={alpha}, delta={delta}, q={q:.6g}")
    return _solve_ratio(free, ratio, delta, "complete-data calibration")


def calibrate_censored(family: EdmFamily, link: LinkSpec, fitted_mle: ParamVector, records: "RecordSet",
                       alpha: float, delta: float) -> WeightSpec:
    """Calibration on incomplete data from closed-form interval probabilities.

    The tail threshold is the empirical alpha-quantile of the exactly observed
    responses; the ratio is mean_i[lambda* F*(Q&T_i)/F(Q&T_i)] over
    mean_i[lambda* F*(T_i)/F(T_i)], evaluated at the fitted MLE.
    """
    _check_levels(alpha, delta)
    if delta == 1.0:
        return WeightSpec.mle()
    X = np.atleast_2d(np.asarray(records.X, dtype=float))
    intercept = _intercept_column(X)
    exact_y = records.y[records.is_exact]
    if exact_y.size == 0:
        raise CalibrationError("no exactly observed responses to locate the tail quantile", "exact responses")
    q = float(np.quantile(exact_y, alpha))

    theta = fitted_mle.check(family, link, X)
    phi = np.full_like(theta, fitted_mle.phi)
    t_lo, t_hi = records.trunc_lo, records.trunc_hi
    q_lo = np.maximum(q, t_lo)
    in_tail = q_lo < t_hi
    with np.errstate(divide="ignore"):
        log_f_trunc = np.log(family.cdf(theta, phi, t_lo, t_hi))
        log_f_tail = np.log(np.where(in_tail, family.cdf(theta, phi, q_lo, t_hi), 0.0))
    in_tail &= np.isfinite(log_f_tail)
    if not np.any(in_tail):
        raise CalibrationError(f"no record's truncation region reaches beyond q={q:.6g}", "tail probability > 0")

    means = family.mean(theta)
    free = _FreeHyperparameter(family, link, X.shape[1], intercept, float(np.mean(means)),
                               float(np.var(means) + np.mean(family.variance(theta, phi))))

    def ratio(h):
        tilt = tilt_of(family, link, free.spec(h), X)
        try:
            theta_s, phi_s = apply_tilt(family, theta, phi, tilt)
        except CalibrationError:
            return np.nan
        log_lam = log_bias_adjustment(family, theta, phi, theta_s, phi_s)
        with np.errstate(divide="ignore"):
            num = log_lam[in_tail] + np.log(family.cdf(theta_s[in_tail], phi_s[in_tail], q_lo[in_tail],
                                                       t_hi[in_tail])) - log_f_tail[in_tail]
            den = log_lam + np.log(family.cdf(theta_s, phi_s, t_lo, t_hi)) - log_f_trunc
        shift = np.max(den)
        # records whose truncation region ends below q add nothing to the tail
        return float(np.sum(np.exp(num - shift)) / np.sum(np.exp(den - shift)))

    logger.info(f"Calibrating {family.family_id.value} weight on {len(exact_y)} exact of "
                f"{X.shape[0]} records: alpha={alpha}, delta={delta}, q={q:.6g}")
    return _solve_ratio(free, ratio, delta, "censored-data calibration")
