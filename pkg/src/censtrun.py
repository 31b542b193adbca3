"""
Randomly censored and truncated observations.

Each record carries a truncation region T, an exactly observed region U and
censoring intervals I_1..I_M that together partition T. An exact outcome
contributes W(y) d/dPsi log f*_T(y); an outcome censored in I contributes
lambda* F*(I)/F(I) d/dPsi log F*_T(I). Region probabilities and conditional
score moments come from ``EdmFamily.region_terms``, so a whole record set is
processed in a few vectorized quadrature passes.
"""
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CalibrationError, ConvergenceError, DomainError, QuadratureError, SingularMatrixError
from .families import EdmFamily, Interval, LinkSpec, ParamVector
from .logger import get_module_logger
from .numerics import central_jacobian, integrate, solve_linear
from .swle import (FitOptions, FitResult, GlmData, fit as fit_complete, initial_estimate,
                   lag_matrix, project_moment, row_state, sandwich, score_shift)
from .weighting import WeightSpec, apply_tilt, log_bias_adjustment, log_weight

logger = get_module_logger("censtrun")


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CensoringScheme:
    """Truncation region, exactly observed region and censoring intervals of one record"""
    truncation: Interval
    uncensored: Interval
    censor_intervals: Tuple[Interval, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "censor_intervals", tuple(self.censor_intervals))
        if self.truncation.is_empty:
            raise DomainError(f"truncation region {self.truncation} is empty", "truncation")
        pieces = [p for p in (self.uncensored,) + self.censor_intervals if not p.is_empty]
        if any(p.is_empty for p in self.censor_intervals):
            raise DomainError("censoring intervals must be non-empty", "censor_intervals")
        pieces.sort(key=lambda p: p.lo)
        if not pieces or pieces[0].lo != self.truncation.lo or pieces[-1].hi != self.truncation.hi:
            raise DomainError(f"U and the censoring intervals do not cover {self.truncation}", "censor_intervals")
        for left, right in zip(pieces, pieces[1:]):
            if left.hi != right.lo:
                raise DomainError(f"intervals {left} and {right} overlap or leave a gap", "censor_intervals")

    @classmethod
    def complete(cls, truncation: Interval = Interval()) -> "CensoringScheme":
        return cls(truncation, truncation)

    @classmethod
    def from_limits(cls, truncation: Interval, censor: Optional[Interval]) -> "CensoringScheme":
        """Scheme with one censoring interval attached to an end of the truncation region"""
        if censor is None or censor.is_empty:
            return cls.complete(truncation)
        censor = censor.intersect(truncation)
        if censor.is_empty:
            return cls.complete(truncation)
        if censor.hi >= truncation.hi:
            return cls(truncation, Interval(truncation.lo, censor.lo), (censor,))
        if censor.lo <= truncation.lo:
            return cls(truncation, Interval(censor.hi, truncation.hi), (censor,))
        raise DomainError(f"censoring interval {censor} must touch an end of the truncation region {truncation}",
                          "censor_intervals")

    @property
    def n_intervals(self) -> int:
        return len(self.censor_intervals)


@dataclass(frozen=True)
class ExactValue:
    y: float


@dataclass(frozen=True)
class CensoredIn:
    index: int


Outcome = Union[ExactValue, CensoredIn]


@dataclass(frozen=True)
class ObservationRecord:
    x: Tuple[float, ...]
    scheme: CensoringScheme
    outcome: Outcome

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.ravel(self.x)))
        if isinstance(self.outcome, ExactValue):
            if not self.scheme.uncensored.contains(self.outcome.y):
                raise DomainError(f"exact response {self.outcome.y:g} is outside U={self.scheme.uncensored}",
                                  "y", self.outcome.y)
        elif not 0 <= self.outcome.index < self.scheme.n_intervals:
            raise DomainError(f"censoring index {self.outcome.index} out of range "
                              f"(M={self.scheme.n_intervals})", "outcome", self.outcome.index)

    @property
    def is_exact(self) -> bool:
        return isinstance(self.outcome, ExactValue)


@dataclass
class RecordSet:
    """Column-oriented view of a list of observation records.

    Censoring intervals of all records are flattened into ``int_lo``,
    ``int_hi`` and ``int_record``; ``observed`` holds, per record, the
    position of its outcome interval in the flattened arrays (-1 if exact).
    """
    X: np.ndarray
    y: np.ndarray
    trunc_lo: np.ndarray
    trunc_hi: np.ndarray
    unc_lo: np.ndarray
    unc_hi: np.ndarray
    int_lo: np.ndarray
    int_hi: np.ndarray
    int_record: np.ndarray
    observed: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[ObservationRecord]) -> "RecordSet":
        if not records:
            raise DomainError("no records", "records")
        X = np.array([r.x for r in records], dtype=float)
        y = np.array([r.outcome.y if r.is_exact else np.nan for r in records])
        int_lo, int_hi, int_record, observed = [], [], [], []
        for i, r in enumerate(records):
            base = len(int_lo)
            for interval in r.scheme.censor_intervals:
                int_lo.append(interval.lo)
                int_hi.append(interval.hi)
                int_record.append(i)
            observed.append(-1 if r.is_exact else base + r.outcome.index)
        return cls(X, y,
                   np.array([r.scheme.truncation.lo for r in records], dtype=float),
                   np.array([r.scheme.truncation.hi for r in records], dtype=float),
                   np.array([r.scheme.uncensored.lo for r in records], dtype=float),
                   np.array([r.scheme.uncensored.hi for r in records], dtype=float),
                   np.array(int_lo, dtype=float), np.array(int_hi, dtype=float),
                   np.array(int_record, dtype=int), np.array(observed, dtype=int))

    @classmethod
    def from_complete(cls, data: GlmData, family: EdmFamily) -> "RecordSet":
        support = family.support
        scheme = CensoringScheme.complete(Interval(support.lo, support.hi))
        return cls.from_records([ObservationRecord(tuple(x), scheme, ExactValue(float(y)))
                                 for x, y in zip(data.X, data.y)])

    def to_records(self) -> List[ObservationRecord]:
        out = []
        for i in range(self.n):
            rows = np.flatnonzero(self.int_record == i)
            intervals = tuple(Interval(float(self.int_lo[j]), float(self.int_hi[j])) for j in rows)
            scheme = CensoringScheme(Interval(float(self.trunc_lo[i]), float(self.trunc_hi[i])),
                                     Interval(float(self.unc_lo[i]), float(self.unc_hi[i])), intervals)
            if self.observed[i] < 0:
                outcome = ExactValue(float(self.y[i]))
            else:
                outcome = CensoredIn(int(np.flatnonzero(rows == self.observed[i])[0]))
            out.append(ObservationRecord(tuple(self.X[i]), scheme, outcome))
        return out

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    @property
    def is_exact(self) -> np.ndarray:
        return self.observed < 0

    @property
    def censored(self) -> np.ndarray:
        return np.flatnonzero(~self.is_exact)

    def is_complete(self, family: EdmFamily) -> bool:
        return (self.int_lo.size == 0
                and bool(np.all(self.trunc_lo <= family.support.lo))
                and bool(np.all(self.trunc_hi >= family.support.hi)))

    def complete_data(self) -> GlmData:
        if not np.all(self.is_exact):
            raise DomainError("record set contains censored outcomes", "records")
        return GlmData(self.y, self.X)

    def exact_data(self) -> GlmData:
        mask = self.is_exact
        return GlmData(self.y[mask], self.X[mask])


# ---------------------------------------------------------------------------
# Extended score
# ---------------------------------------------------------------------------

@dataclass
class _ScoreParts:
    contributions: np.ndarray
    log_effective: np.ndarray


def _check_truncation(log_mass: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(np.asarray(log_mass)))
    if bad.size:
        raise DomainError(f"record {int(bad[0])} has zero probability on its truncation region", "truncation",
                          int(bad[0]))


def _extended_parts(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec,
                    records: RecordSet, shift: Optional[float] = None) -> _ScoreParts:
    state = row_state(family, link, params, spec, records.X)
    trunc = family.region_terms(state.theta_s, state.phi_s, records.trunc_lo, records.trunc_hi)
    with np.errstate(divide="ignore"):
        _check_truncation(np.log(family.cdf(state.theta, state.phi, records.trunc_lo, records.trunc_hi)))

    exact = records.is_exact
    y_safe = np.where(exact, records.y, family._interior_point)
    s_theta, s_phi = family.score_terms(state.theta_s, state.phi_s, y_safe)
    centred = np.column_stack([s_theta, s_phi]) - trunc.mean_score
    log_eff = np.where(exact, log_weight(family, state.tilt, y_safe), 0.0)

    cens = records.censored
    if cens.size:
        k = records.observed[cens]
        lo, hi = records.int_lo[k], records.int_hi[k]
        tilted = family.region_terms(state.theta_s[cens], state.phi_s[cens], lo, hi)
        base = family.region_terms(state.theta[cens], state.phi[cens], lo, hi)
        _check_truncation(base.log_mass)
        centred[cens] = tilted.mean_score - trunc.mean_score[cens]
        log_eff[cens] = state.log_lam[cens] + tilted.log_mass - base.log_mass

    if shift is None:
        shift = 0.0
    eff = np.exp(log_eff - shift)
    terms = state.dlogf() * centred
    contributions = eff[:, None] * np.einsum("nip,ni->np", state.jacobian(records.X), terms)
    return _ScoreParts(contributions, log_eff)


def extended_score_contributions(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec,
                                 records: RecordSet) -> np.ndarray:
    return _extended_parts(family, link, params, spec, records).contributions


def extended_score(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec,
                   records: RecordSet) -> np.ndarray:
    """Weighted score of incomplete data, summed over records"""
    return extended_score_contributions(family, link, params, spec, records).sum(axis=0)


def observed_loglik(family: EdmFamily, link: LinkSpec, params: ParamVector, records: RecordSet) -> float:
    """Log-likelihood of the observed data: truncated densities and interval probabilities"""
    theta = params.check(family, link, records.X)
    phi = np.full_like(theta, params.phi)
    log_trunc = np.log(family.cdf(theta, phi, records.trunc_lo, records.trunc_hi))
    exact = records.is_exact
    total = np.sum(family.log_density(theta[exact], phi[exact], records.y[exact]) - log_trunc[exact])
    cens = records.censored
    if cens.size:
        k = records.observed[cens]
        prob = family.cdf(theta[cens], phi[cens], records.int_lo[k], records.int_hi[k])
        total += np.sum(np.log(prob) - log_trunc[cens])
    return float(total)


# ---------------------------------------------------------------------------
# Region integrals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DTerms:
    """Unnormalized integrals of f, f*s and f*s*s^T over a region"""
    mass: float
    theta: float
    phi: float
    theta_theta: float
    theta_phi: float
    phi_phi: float

    def to_dict(self) -> Dict[str, float]:
        return {"mass": self.mass, "D_theta": self.theta, "D_phi": self.phi, "D_theta_theta": self.theta_theta,
                "D_theta_phi": self.theta_phi, "D_phi_phi": self.phi_phi}


def d_terms(family: EdmFamily, theta: float, phi: float, region: Interval,
            rel_tol: float = 1e-10, abs_tol: float = 1e-13) -> DTerms:
    """Adaptive quadrature of the score moment integrands over ``region``"""
    family.check_params(theta, phi)
    region = region.intersect(family.support)
    if region.is_empty:
        return DTerms(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    mean = float(family.mean(theta))
    points = [mean] if region.lo < mean < region.hi else None

    def moment(fn):
        def integrand(y):
            s_theta, s_phi = family.score_terms(theta, phi, y)
            return float(np.exp(family.log_density(theta, phi, y))) * fn(s_theta, s_phi)
        result = integrate(integrand, region.lo, region.hi, rel_tol, abs_tol, points=points)
        if not result.converged:
            raise QuadratureError(f"quadrature over {region} did not converge: estimate {result.value:.6g}, "
                                  f"error bound {result.error_estimate:.3g}", result.value, result.error_estimate)
        return result.value

    return DTerms(moment(lambda u, v: 1.0), moment(lambda u, v: u), moment(lambda u, v: v),
                  moment(lambda u, v: u * u), moment(lambda u, v: u * v), moment(lambda u, v: v * v))


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------

def pair_moment_rows(family: EdmFamily, link: LinkSpec, params: ParamVector, spec_a: WeightSpec,
                     spec_b: WeightSpec, records: RecordSet) -> np.ndarray:
    """E[S_a S_b^T] of every record under the truncated and censored data law, shape (n, P+1, P+1)"""
    X = records.X
    sa = row_state(family, link, params, spec_a, X)
    sb = row_state(family, link, params, spec_b, X)
    theta, phi = sa.theta, sa.phi
    tilt_ab = sa.tilt + sb.tilt
    theta_ab, phi_ab = apply_tilt(family, theta, phi, tilt_ab, "theta**")
    log_lam_ab = log_bias_adjustment(family, theta, phi, theta_ab, phi_ab, tilt_ab.log_scale)

    log_trunc = family.region_terms(theta, phi, records.trunc_lo, records.trunc_hi).log_mass
    _check_truncation(log_trunc)
    m_a = family.region_terms(sa.theta_s, sa.phi_s, records.trunc_lo, records.trunc_hi).mean_score
    m_b = m_a if spec_b == spec_a else \
        family.region_terms(sb.theta_s, sb.phi_s, records.trunc_lo, records.trunc_hi).mean_score

    unc = family.region_terms(theta_ab, phi_ab, records.unc_lo, records.unc_hi)
    w_unc = np.exp(log_lam_ab + unc.log_mass - log_trunc)
    la, lb = lag_matrix(sa.theta_s, theta_ab), lag_matrix(sb.theta_s, theta_ab)
    e_a = score_shift(family, theta_ab, phi_ab, sa.theta_s, sa.phi_s) - m_a
    e_b = score_shift(family, theta_ab, phi_ab, sb.theta_s, sb.phi_s) - m_b
    first = unc.mean_score
    moment = (np.einsum("nij,njk,nlk->nil", la, unc.mean_outer, lb)
              + np.einsum("nij,nj,nk->nik", la, first, e_b)
              + np.einsum("ni,nj,nkj->nik", e_a, first, lb)
              + e_a[:, :, None] * e_b[:, None, :])
    moment = w_unc[:, None, None] * moment

    if records.int_lo.size:
        rec = records.int_record
        lo, hi = records.int_lo, records.int_hi
        base = family.region_terms(theta[rec], phi[rec], lo, hi)
        ta = family.region_terms(sa.theta_s[rec], sa.phi_s[rec], lo, hi)
        tb = ta if spec_b == spec_a else family.region_terms(sb.theta_s[rec], sb.phi_s[rec], lo, hi)
        with np.errstate(invalid="ignore"):
            log_w = (sa.log_lam[rec] + ta.log_mass + sb.log_lam[rec] + tb.log_mass
                     - base.log_mass - log_trunc[rec])
        w_int = np.where(np.isfinite(log_w), np.exp(log_w), 0.0)
        da = ta.mean_score - m_a[rec]
        db = tb.mean_score - m_b[rec]
        np.add.at(moment, rec, w_int[:, None, None] * da[:, :, None] * db[:, None, :])

    return project_moment(moment, sa, sb, X)


def censtrun_information(family: EdmFamily, link: LinkSpec, params: ParamVector, spec: WeightSpec,
                         records: RecordSet, estimator: str = "model") -> Tuple[np.ndarray, np.ndarray]:
    if estimator == "model":
        gamma = -pair_moment_rows(family, link, params, spec, WeightSpec.mle(), records).mean(axis=0)
        lam = pair_moment_rows(family, link, params, spec, spec, records).mean(axis=0)
        return gamma, lam
    if estimator == "empirical":
        contrib = extended_score_contributions(family, link, params, spec, records)
        lam = contrib.T @ contrib / records.n
        gamma = central_jacobian(
            lambda p: extended_score(family, link, ParamVector.from_array(p), spec, records) / records.n,
            params.as_array())
        return gamma, lam
    raise ValueError(f"unknown covariance estimator '{estimator}'")


def censtrun_covariance(family: EdmFamily, link: LinkSpec, fit_result: FitResult, records: RecordSet,
                        estimator: str = "model") -> np.ndarray:
    gamma, lam = censtrun_information(family, link, fit_result.params, fit_result.spec, records, estimator)
    try:
        return sandwich(gamma, lam, records.n)
    except SingularMatrixError as e:
        raise SingularMatrixError(f"Gamma for {fit_result.spec.label()} is singular "
                                  f"(condition {e.condition:.3e})", e.condition, fit_result.spec.label())


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _validate(family: EdmFamily, records: RecordSet) -> None:
    if records.n <= records.n_coef + 1:
        raise DomainError(f"need more than P+1={records.n_coef + 1} records, got {records.n}", "n", records.n)
    exact_y = records.y[records.is_exact]
    if np.any(~family.in_support(exact_y)):
        raise DomainError(f"exact responses outside the support of the {family.family_id.value} family", "y")
    rank = np.linalg.matrix_rank(records.X)
    if rank < records.n_coef:
        raise DomainError(f"design matrix is rank deficient (rank {rank} < {records.n_coef} columns)", "X", rank)


def _relative_norm(parts: _ScoreParts, shift: float) -> float:
    total = np.sum(np.exp(parts.log_effective - shift))
    return float(np.max(np.abs(parts.contributions.sum(axis=0))) / total)


def _initial_censtrun(family: EdmFamily, link: LinkSpec, records: RecordSet) -> ParamVector:
    exact = records.is_exact
    if exact.sum() > records.n_coef + 1 and np.linalg.matrix_rank(records.X[exact]) == records.n_coef:
        return initial_estimate(family, link, records.exact_data())
    raise DomainError("too few exact outcomes to start the fit; supply FitOptions.init", "init")


def fit_censtrun(family: EdmFamily, link: LinkSpec, spec: WeightSpec, records: RecordSet,
                 options: Optional[FitOptions] = None) -> FitResult:
    """Damped Newton root of the extended score with a finite-difference Jacobian"""
    options = options or FitOptions()
    _validate(family, records)

    if records.is_complete(family):
        logger.debug("record set is complete; using the complete-data fit")
        result = fit_complete(family, link, spec, records.complete_data(), options)
        return replace(result, method=f"complete/{result.method}")

    init = options.init
    if init is None:
        init = _initial_censtrun(family, link, records)
        if not spec.is_mle:
            mle_options = replace(options, init=init, compute_covariance=False)
            init = fit_censtrun(family, link, WeightSpec.mle(), records, mle_options).params

    psi = init.as_array()
    trace: List[Dict[str, float]] = []
    converged = False
    parts = _extended_parts(family, link, ParamVector.from_array(psi), spec, records)
    iteration = 0

    for iteration in range(1, options.max_iter + 1):
        shift = float(np.max(parts.log_effective))
        current = parts.contributions.sum(axis=0) * np.exp(-shift)
        norm = _relative_norm(parts, shift)

        def scaled_score(p, shift=shift):
            return _extended_parts(family, link, ParamVector.from_array(p), spec, records, shift) \
                .contributions.sum(axis=0)

        jac = central_jacobian(scaled_score, psi)
        step = -solve_linear(jac, current, label="extended score Jacobian")

        t = 1.0
        accepted = None
        for halving in range(21):
            candidate = psi + t * step
            if candidate[-1] > 0:
                try:
                    cand_parts = _extended_parts(family, link, ParamVector.from_array(candidate), spec, records)
                    cand_shift = float(np.max(cand_parts.log_effective))
                    cand_norm = _relative_norm(cand_parts, cand_shift)
                    if cand_norm <= norm or halving == 20:
                        accepted = (candidate, cand_parts, cand_norm)
                        break
                except (DomainError, CalibrationError):
                    pass
            t *= 0.5
        if accepted is None:
            raise ConvergenceError("Newton step left the valid region after 20 halvings", trace)

        candidate, parts, new_norm = accepted
        change = float(np.max(np.abs(candidate - psi)))
        psi = candidate
        trace.append({"iteration": iteration, "score_norm": new_norm, "change": change, "step": t})
        logger.debug(f"censored Newton iteration {iteration}: score_norm={new_norm:.3e} change={change:.3e} "
                     f"step={t:g}")
        if new_norm < options.tol and change < options.param_tol:
            converged = True
            break

    params = ParamVector.from_array(psi)
    shift = float(np.max(parts.log_effective))
    norm = _relative_norm(parts, shift)
    result = FitResult(params, None, iteration, norm, converged, spec, records.n, "censored-newton",
                       family.family_id.value, link.link_id.value, tuple(trace))
    if not converged:
        message = (f"{spec.label()} censored fit did not converge after {iteration} iterations "
                   f"(relative score norm {norm:.3e})")
        if options.raise_on_failure:
            raise ConvergenceError(message, trace)
        logger.warning(message)
        return result
    if options.compute_covariance:
        result = replace(result, covariance=censtrun_covariance(family, link, result, records,
                                                                options.covariance_estimator))
    return result
