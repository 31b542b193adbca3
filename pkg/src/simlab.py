"""
Seedable data generators and the replication engine for simulation studies.

Three generators are available: a plain GLM, a linear model contaminated by
a scaled and translated Student-t, and a Gamma GLM whose dispersion follows
a log-linear regression, optionally with left truncation and right censoring.
"""
import concurrent.futures
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .censtrun import RecordSet
from .diagnostics import DELTA_GRIDS, HyperGrid, diagnose, param_names
from .errors import ConfigError, DomainError, StudyError, SwleError
from .families import EdmFamily, FamilyId, LinkId, LinkSpec, ParamVector, get_family, make_link
from .logger import get_module_logger
from .numerics import make_rng, sample_student_t, spawn_seeds
from .swle import FitOptions, GlmData, fit
from .weighting import CALIBRATION_DRAWS, WeightSpec, calibrate_complete

logger = get_module_logger("simlab")

MAX_FAILURE_SHARE = 0.10

# Sub-streams of the master seed used outside the replications
CALIBRATION_STREAM = 1
PILOT_STREAM = 2


class Generator(str, Enum):
    PLAIN_GLM = "plain"
    CONTAMINATED_LINEAR = "contaminated"
    VARYING_DISPERSION_GAMMA = "varying_dispersion"


@dataclass(frozen=True)
class Contamination:
    """Mixture component: with probability epsilon the response is mu_i + t_df scaled to the given variance"""
    epsilon: float
    df: float = 2.5
    variance: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"contamination epsilon must lie in [0, 1), got {self.epsilon}")
        if not self.df > 2.0:
            raise ConfigError(f"Student-t degrees of freedom must exceed 2 for a finite variance, got {self.df}")
        if not self.variance > 0.0:
            raise ConfigError(f"contamination variance must be positive, got {self.variance}")

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.variance * (self.df - 2.0) / self.df))


@dataclass(frozen=True)
class CensoringRule:
    """Per-record truncation point T and censoring point C, each drawn uniformly from its list"""
    truncation_points: Tuple[float, ...] = (0.0, 0.5)
    censor_points: Tuple[float, ...] = (10.0, 20.0)
    max_resamples: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "truncation_points", tuple(float(t) for t in self.truncation_points))
        object.__setattr__(self, "censor_points", tuple(float(c) for c in self.censor_points))
        if not self.truncation_points or not self.censor_points:
            raise ConfigError("censoring rule needs at least one truncation and one censoring point")
        if min(self.censor_points) <= max(self.truncation_points):
            raise ConfigError("every censoring point must exceed every truncation point")
        if self.max_resamples < 1:
            raise ConfigError("max_resamples must be at least 1")


PLAIN_SETTINGS = {
    FamilyId.GAMMA: (LinkId.LOG, (1.0, 0.5), 0.5),
    FamilyId.NORMAL: (LinkId.CANONICAL, (1.0, 0.5), 0.25),
    FamilyId.INVERSE_GAUSSIAN: (LinkId.LOG, (1.0, 0.5), 0.1),
}


@dataclass(frozen=True)
class SimDesign:
    generator: Generator
    family: FamilyId
    link: LinkId
    beta: Tuple[float, ...]
    phi: float
    n: int
    seed: int = 0
    contamination: Optional[Contamination] = None
    dispersion_coef: Optional[Tuple[float, ...]] = None
    censoring: Optional[CensoringRule] = None
    fit_family: Optional[FamilyId] = None
    fit_link: Optional[LinkId] = None
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "generator", Generator(self.generator))
        object.__setattr__(self, "family", get_family(self.family).family_id)
        object.__setattr__(self, "link", LinkId(self.link))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.fit_family is not None:
            object.__setattr__(self, "fit_family", get_family(self.fit_family).family_id)
        if self.fit_link is not None:
            object.__setattr__(self, "fit_link", LinkId(self.fit_link))
        if self.n < 1:
            raise ConfigError(f"sample size must be at least 1, got {self.n}")
        if not self.beta:
            raise ConfigError("beta needs at least an intercept")
        if not self.phi > 0.0:
            raise ConfigError(f"phi must be positive, got {self.phi}")
        if self.generator == Generator.CONTAMINATED_LINEAR:
            if self.contamination is None:
                raise ConfigError("contaminated design needs a contamination block")
            if self.family != FamilyId.NORMAL or self.link != LinkId.CANONICAL:
                raise ConfigError("contaminated design generates from the normal linear model")
        elif self.contamination is not None:
            raise ConfigError(f"contamination is only used by the '{Generator.CONTAMINATED_LINEAR.value}' generator")
        if self.generator == Generator.VARYING_DISPERSION_GAMMA:
            if self.family != FamilyId.GAMMA:
                raise ConfigError("varying-dispersion design generates from the Gamma family")
            if self.dispersion_coef is None or len(self.dispersion_coef) != len(self.beta):
                raise ConfigError("varying-dispersion design needs one dispersion coefficient per covariate")
            object.__setattr__(self, "dispersion_coef", tuple(float(a) for a in self.dispersion_coef))
        elif self.dispersion_coef is not None:
            raise ConfigError("dispersion coefficients are only used by the varying-dispersion generator")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        fitted = "" if not self.is_cross_family else f"->{self.fitted_family().family_id.value}"
        return f"{self.generator.value}-{self.family.value}{fitted}-n{self.n}"

    @property
    def n_coef(self) -> int:
        return len(self.beta)

    @property
    def is_cross_family(self) -> bool:
        return self.fit_family is not None and self.fit_family != self.family

    @property
    def true_params(self) -> ParamVector:
        """Parameters of the core model; with varying dispersion phi is its value at x2 = 0"""
        if self.dispersion_coef is not None:
            return ParamVector(self.beta, float(np.exp(self.dispersion_coef[0])))
        return ParamVector(self.beta, self.phi)

    def family_obj(self) -> EdmFamily:
        return get_family(self.family)

    def link_obj(self) -> LinkSpec:
        return make_link(self.family_obj(), self.link)

    def fitted_family(self) -> EdmFamily:
        return get_family(self.fit_family or self.family)

    def fitted_link(self) -> LinkSpec:
        if self.fit_link is not None:
            return make_link(self.fitted_family(), self.fit_link)
        if self.is_cross_family:
            return make_link(self.fitted_family(), PLAIN_SETTINGS[self.fitted_family().family_id][0])
        return self.link_obj()

    def to_dict(self):
        return {
            "generator": self.generator.value,
            "family": self.family.value,
            "link": self.link.value,
            "beta": list(self.beta),
            "phi": self.phi,
            "n": self.n,
            "seed": self.seed,
            "contamination": None if self.contamination is None else {
                "epsilon": self.contamination.epsilon, "df": self.contamination.df,
                "variance": self.contamination.variance},
            "dispersion_coef": None if self.dispersion_coef is None else list(self.dispersion_coef),
            "censoring": None if self.censoring is None else {
                "truncation_points": list(self.censoring.truncation_points),
                "censor_points": list(self.censoring.censor_points),
                "max_resamples": self.censoring.max_resamples},
            "fit_family": None if self.fit_family is None else self.fit_family.value,
            "fit_link": None if self.fit_link is None else self.fit_link.value,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SimDesign":
        data = dict(data)
        try:
            if data.get("contamination"):
                data["contamination"] = Contamination(**data["contamination"])
            if data.get("censoring"):
                data["censoring"] = CensoringRule(**data["censoring"])
            if data.get("dispersion_coef") is not None:
                data["dispersion_coef"] = tuple(data["dispersion_coef"])
            data["beta"] = tuple(data["beta"])
            return cls(**data)
        except (TypeError, KeyError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid study design: {e}")


def plain_design(family: Union[str, FamilyId] = "gamma", n: int = 2500, seed: int = 0,
                 fit_family: Optional[Union[str, FamilyId]] = None, fit_link: Optional[str] = None) -> SimDesign:
    family_id = get_family(family).family_id
    link, beta, phi = PLAIN_SETTINGS[family_id]
    return SimDesign(Generator.PLAIN_GLM, family_id, link, beta, phi, n, seed,
                     fit_family=None if fit_family is None else get_family(fit_family).family_id,
                     fit_link=None if fit_link is None else LinkId(fit_link))


def contaminated_design(n: int = 5000, epsilon: float = 0.1, seed: int = 0) -> SimDesign:
    return SimDesign(Generator.CONTAMINATED_LINEAR, FamilyId.NORMAL, LinkId.CANONICAL, (1.0, 0.5), 0.25, n, seed,
                     contamination=Contamination(epsilon))


def censored_gamma_design(case: str = "I", n: int = 5000, seed: int = 0, censored: bool = True) -> SimDesign:
    slopes = {"I": 0.0, "II": 0.25}
    if case not in slopes:
        raise ConfigError(f"unknown varying-dispersion case '{case}' (expected I or II)")
    alpha = (float(np.log(0.5)), slopes[case])
    return SimDesign(Generator.VARYING_DISPERSION_GAMMA, FamilyId.GAMMA, LinkId.LOG, (1.0, 0.5), 0.5, n, seed,
                     dispersion_coef=alpha, censoring=CensoringRule() if censored else None)


PRESETS: Dict[str, Callable[..., SimDesign]] = {
    "sim1-gamma": lambda **kw: plain_design("gamma", **kw),
    "sim1-normal": lambda **kw: plain_design("normal", **kw),
    "sim1-invgauss": lambda **kw: plain_design("invgauss", **kw),
    "sim2": contaminated_design,
    "sim3-case1": lambda **kw: censored_gamma_design("I", **kw),
    "sim3-case2": lambda **kw: censored_gamma_design("II", **kw),
}


def preset(name: str, **overrides) -> SimDesign:
    if name not in PRESETS:
        raise ConfigError(f"unknown study preset '{name}' (available: {', '.join(sorted(PRESETS))})")
    return PRESETS[name](**overrides)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def design_matrix(rng: np.random.Generator, n: int, n_coef: int) -> np.ndarray:
    """Intercept column followed by independent standard normal covariates"""
    return np.column_stack([np.ones(n), rng.standard_normal((n, n_coef - 1))])


def _row_dispersion(design: SimDesign, X: np.ndarray) -> np.ndarray:
    if design.dispersion_coef is not None:
        return np.exp(X @ np.asarray(design.dispersion_coef))
    return np.full(X.shape[0], design.phi)


def _draw(rng: np.random.Generator, design: SimDesign, family: EdmFamily, theta: np.ndarray,
          phi: np.ndarray) -> np.ndarray:
    y = np.asarray(family.sample(rng, theta, phi), dtype=float)
    if design.contamination is not None:
        spec = design.contamination
        hit = rng.random(theta.shape[0]) < spec.epsilon
        noise = family.mean(theta) + spec.scale * sample_student_t(rng, spec.df, theta.shape[0])
        y = np.where(hit, noise, y)
    return y


def _censor(rng: np.random.Generator, design: SimDesign, family: EdmFamily, theta: np.ndarray, phi: np.ndarray,
            y: np.ndarray, X: np.ndarray) -> RecordSet:
    rule = design.censoring
    n = y.shape[0]
    trunc = rng.choice(np.asarray(rule.truncation_points), size=n)
    cens = rng.choice(np.asarray(rule.censor_points), size=n)

    pending = y <= trunc
    for _ in range(rule.max_resamples):
        if not pending.any():
            break
        rows = np.flatnonzero(pending)
        y[rows] = _draw(rng, design, family, theta[rows], phi[rows])
        pending[rows] = y[rows] <= trunc[rows]
    if pending.any():
        row = int(np.flatnonzero(pending)[0])
        raise DomainError(f"row {row}: no draw above the truncation point after {rule.max_resamples} resamples",
                          "truncation", float(trunc[row]))

    censored = y > cens
    idx = np.arange(n)
    return RecordSet(
        X=X,
        y=np.where(censored, np.nan, y),
        trunc_lo=trunc,
        trunc_hi=np.full(n, np.inf),
        unc_lo=trunc.copy(),
        unc_hi=cens,
        int_lo=cens.copy(),
        int_hi=np.full(n, np.inf),
        int_record=idx,
        observed=np.where(censored, idx, -1),
    )


def generate(design: SimDesign, seed=None) -> Union[GlmData, RecordSet]:
    """One dataset; identical (design, seed) give identical arrays"""
    rng = make_rng(design.seed if seed is None else seed)
    family = design.family_obj()
    X = design_matrix(rng, design.n, design.n_coef)
    theta = ParamVector(design.beta, design.phi).theta(design.link_obj(), X)
    phi = _row_dispersion(design, X)
    family.check_params(theta, phi, "generating model")
    y = _draw(rng, design, family, theta, phi)
    if design.censoring is None:
        return GlmData(y, X)
    return _censor(rng, design, family, theta, phi, y, X)


def _observed_responses(data: Union[GlmData, RecordSet]) -> np.ndarray:
    if isinstance(data, RecordSet):
        return data.y[data.is_exact]
    return data.y


# ---------------------------------------------------------------------------
# Replication engine
# ---------------------------------------------------------------------------

def calibrate_grid(design: SimDesign, deltas: Sequence[float], alpha: float = 0.99,
                   n_draws: int = CALIBRATION_DRAWS) -> HyperGrid:
    """Calibrate once per design: against the core model, or a pilot MLE when fitting another family"""
    family, link = design.fitted_family(), design.fitted_link()
    x_sample = design_matrix(make_rng([design.seed, CALIBRATION_STREAM]), design.n, design.n_coef)
    if design.is_cross_family:
        pilot = generate(design, [design.seed, PILOT_STREAM])
        observed = pilot if isinstance(pilot, GlmData) else pilot.exact_data()
        y, X = observed.y, observed.X
        keep = family.in_support(y)
        logger.info(f"Pilot MLE for {family.family_id.value} on {int(keep.sum())} of {y.size} in-support draws")
        pilot_fit = fit(family, link, WeightSpec.mle(), GlmData(y[keep], X[keep]),
                        FitOptions(compute_covariance=False))
        params = pilot_fit.params
    else:
        params = design.true_params
    specs = tuple(calibrate_complete(family, link, params, x_sample, alpha, d, seed=[design.seed, CALIBRATION_STREAM],
                                     n_draws=n_draws) for d in deltas)
    return HyperGrid(specs)


@dataclass
class ReplicationRecord:
    index: int
    seed: int
    estimates: Optional[np.ndarray] = None
    standard_errors: Optional[np.ndarray] = None
    meta_statistic: float = float("nan")
    meta_p_value: float = float("nan")
    individual_p: Optional[np.ndarray] = None
    param_meta_p: Optional[np.ndarray] = None
    support_violation: bool = False
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def completed(self) -> bool:
        return not self.failed and not self.support_violation

    def to_dict(self):
        def listed(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "index": self.index,
            "seed": self.seed,
            "estimates": listed(self.estimates),
            "standard_errors": listed(self.standard_errors),
            "meta_statistic": self.meta_statistic,
            "meta_p_value": self.meta_p_value,
            "individual_p": listed(self.individual_p),
            "param_meta_p": listed(self.param_meta_p),
            "support_violation": self.support_violation,
            "error": self.error,
        }


@dataclass
class ReplicationSummary:
    """Aggregates over replications; support violations count as rejections of every test"""
    design: SimDesign
    grid: HyperGrid
    level: float
    records: List[ReplicationRecord]
    names: List[str] = field(default_factory=list)

    @property
    def B(self) -> int:
        return len(self.records)

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def failures(self) -> List[Tuple[int, str]]:
        return [(r.index, r.error) for r in self.records if r.failed]

    @property
    def support_violations(self) -> int:
        return sum(r.support_violation for r in self.records)

    def _completed(self) -> List[ReplicationRecord]:
        return [r for r in self.records if r.completed]

    def _stack(self, attribute: str) -> np.ndarray:
        done = self._completed()
        if not done:
            return np.full((0, self.K, len(self.names)), np.nan)
        return np.stack([getattr(r, attribute) for r in done])

    @property
    def mean_estimates(self) -> np.ndarray:
        est = self._stack("estimates")
        return est.mean(axis=0) if est.shape[0] else np.full((self.K, len(self.names)), np.nan)

    @property
    def sd_estimates(self) -> np.ndarray:
        est = self._stack("estimates")
        if est.shape[0] < 2:
            return np.zeros((self.K, len(self.names)))
        return est.std(axis=0, ddof=1)

    @property
    def mean_standard_errors(self) -> np.ndarray:
        se = self._stack("standard_errors")
        return se.mean(axis=0) if se.shape[0] else np.full((self.K, len(self.names)), np.nan)

    def _rate(self, rejected: Callable[[ReplicationRecord], np.ndarray], shape) -> np.ndarray:
        counted = [r for r in self.records if not r.failed]
        if not counted:
            return np.full(shape, np.nan)
        hits = [np.ones(shape) if r.support_violation else rejected(r).astype(float) for r in counted]
        return np.mean(hits, axis=0)

    @property
    def meta_rejection_rate(self) -> float:
        return float(self._rate(lambda r: np.asarray(r.meta_p_value < self.level), ()))

    @property
    def individual_rejection_rates(self) -> np.ndarray:
        rates = self._rate(lambda r: r.individual_p < self.level, (self.K, self.K))
        np.fill_diagonal(rates, 0.0)
        return rates

    @property
    def param_meta_rejection_rates(self) -> np.ndarray:
        return self._rate(lambda r: r.param_meta_p < self.level, (len(self.names),))

    def to_dict(self, include_records: bool = True):
        out = {
            "design": self.design.to_dict(),
            "grid": self.grid.to_list(),
            "level": self.level,
            "B": self.B,
            "K": self.K,
            "parameters": self.names,
            "mean_estimates": self.mean_estimates.tolist(),
            "sd_estimates": self.sd_estimates.tolist(),
            "mean_standard_errors": self.mean_standard_errors.tolist(),
            "meta_rejection_rate": self.meta_rejection_rate,
            "individual_rejection_rates": self.individual_rejection_rates.tolist(),
            "param_meta_rejection_rates": self.param_meta_rejection_rates.tolist(),
            "support_violations": self.support_violations,
            "failures": [{"index": i, "error": e} for i, e in self.failures],
        }
        if include_records:
            out["records"] = [r.to_dict() for r in self.records]
        return out

    def to_rows(self) -> List[Dict[str, Union[str, float]]]:
        """Flat rows (design, k, statistic, value) for CSV export"""
        name = self.design.name
        rows = []
        means, sds, ses = self.mean_estimates, self.sd_estimates, self.mean_standard_errors
        for k in range(self.K):
            for p, param in enumerate(self.names):
                rows.append({"design": name, "k": str(k + 1), "statistic": f"mean_{param}", "value": means[k, p]})
                rows.append({"design": name, "k": str(k + 1), "statistic": f"sd_{param}", "value": sds[k, p]})
                rows.append({"design": name, "k": str(k + 1), "statistic": f"mean_se_{param}", "value": ses[k, p]})
        individual = self.individual_rejection_rates
        for k in range(self.K):
            for k2 in range(k + 1, self.K):
                rows.append({"design": name, "k": f"{k + 1}-{k2 + 1}", "statistic": "individual_rejection",
                             "value": individual[k, k2]})
        rows.append({"design": name, "k": "all", "statistic": "meta_rejection", "value": self.meta_rejection_rate})
        for param, rate in zip(self.names, self.param_meta_rejection_rates):
            rows.append({"design": name, "k": "all", "statistic": f"meta_rejection_{param}", "value": rate})
        rows.append({"design": name, "k": "all", "statistic": "support_violations", "value": self.support_violations})
        rows.append({"design": name, "k": "all", "statistic": "failures", "value": len(self.failures)})
        return rows


def replicate(design: SimDesign, grid: HyperGrid, index: int, seed: int, level: float = 0.05,
              options: Optional[FitOptions] = None, k0: int = 0, contrast: str = "consecutive") -> ReplicationRecord:
    """generate -> fit every spec -> diagnostics, capturing failures in the record"""
    record = ReplicationRecord(index, seed)
    family, link = design.fitted_family(), design.fitted_link()
    try:
        data = generate(design, seed)
        if not np.all(family.in_support(_observed_responses(data))):
            record.support_violation = True
            logger.debug(f"Replication {index}: responses outside the {family.family_id.value} support")
            return record
        report = diagnose(family, link, grid, data, options, k0=k0, level=level, jobs=1, contrast=contrast)
    except (SwleError, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as e:
        record.error = f"{type(e).__name__}: {e}"
        logger.warning(f"Replication {index} failed: {record.error}")
        return record

    record.estimates = np.stack([f.params.as_array() for f in report.fits])
    record.standard_errors = np.stack([f.standard_errors for f in report.fits])
    record.meta_statistic = report.meta.statistic
    record.meta_p_value = report.meta.p_value
    record.individual_p = report.individual_matrix("p_value")
    record.param_meta_p = np.array([r.p_value for r in report.param_meta])
    return record


def run_study(design: SimDesign, grid: Optional[HyperGrid] = None, B: int = 100, level: float = 0.05,
              deltas: Optional[Sequence[float]] = None, alpha: float = 0.99, jobs: int = 1,
              deterministic: bool = False, options: Optional[FitOptions] = None, k0: int = 0,
              contrast: str = "consecutive",
              progress: Optional[Callable[[int, int], None]] = None) -> ReplicationSummary:
    """Run B replications of a design and aggregate estimates and rejection rates.

    Replication b uses the b-th child seed of ``design.seed``, so parallel and
    sequential runs produce the same records. Without a grid the specs are
    calibrated once from ``deltas`` (default: the K=2 grid).
    """
    if B < 1:
        raise ConfigError(f"number of replications must be at least 1, got {B}")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"test level must lie in (0, 1), got {level}")
    if grid is None:
        grid = calibrate_grid(design, deltas or DELTA_GRIDS[2], alpha)
    options = options or FitOptions()
    seeds = spawn_seeds(design.seed, B)
    logger.info(f"Study {design.name}: B={B}, K={grid.K}, jobs={1 if deterministic else jobs}")

    records: List[ReplicationRecord] = []
    if deterministic or jobs <= 1:
        for b, seed in enumerate(seeds):
            records.append(replicate(design, grid, b, seed, level, options, k0, contrast))
            if progress:
                progress(b + 1, B)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as executor:
            futures = [executor.submit(replicate, design, grid, b, seed, level, options, k0, contrast)
                       for b, seed in enumerate(seeds)]
            for done, future in enumerate(concurrent.futures.as_completed(futures), start=1):
                records.append(future.result())
                if progress:
                    progress(done, B)
        records.sort(key=lambda r: r.index)

    summary = ReplicationSummary(design, grid, level, records, param_names(design.n_coef))
    n_failed = len(summary.failures)
    if n_failed > MAX_FAILURE_SHARE * B:
        raise StudyError(f"{n_failed} of {B} replications failed (first: {summary.failures[0][1]})", summary)
    if summary.support_violations:
        logger.warning(f"{summary.support_violations} of {B} replications produced responses outside the "
                       f"{design.fitted_family().family_id.value} support")
    logger.success(f"Study {design.name} finished: meta rejection rate {summary.meta_rejection_rate:.3f}")
    return summary
