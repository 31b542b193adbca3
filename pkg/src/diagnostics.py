"""
Wald-type misspecification diagnostics across weight hyperparameter sets.

Under a correctly specified GLM every weight spec estimates the same
parameters, so differences between the K fits are asymptotically normal
with covariance built from the meta covariance Sigma_meta. Sigma_meta is
evaluated at the MLE fit; its (k, k') block is
Gamma_k^{-1} Lambda_(k,k') Gamma_k'^{-T}.
"""
import concurrent.futures
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .censtrun import RecordSet, fit_censtrun, pair_moment_rows
from .errors import ConfigError, DomainError, SingularMatrixError
from .families import EdmFamily, LinkSpec, ParamVector
from .logger import get_module_logger
from .numerics import MAX_CONDITION, chi_square_sf, condition_number, solve_linear
from .swle import FitOptions, FitResult, GlmData, cross_moment_rows, fit as fit_complete
from .weighting import WeightSpec, calibrate_censored, calibrate_complete

logger = get_module_logger("diagnostics")

Dataset = Union[GlmData, RecordSet]

DELTA_GRIDS = {
    2: (1.0, 0.001),
    3: (1.0, 0.1, 0.001),
    5: (1.0, 0.5, 0.1, 0.01, 0.001),
}


@dataclass(frozen=True)
class HyperGrid:
    """Ordered weight specs k = 1..K; by convention spec 1 is the MLE"""
    specs: Tuple[WeightSpec, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        if not specs:
            raise ConfigError("hyperparameter grid is empty")
        for k, spec in enumerate(specs):
            for k2 in range(k):
                if specs[k2] == spec:
                    raise ConfigError(f"hyperparameter grid repeats spec {k2 + 1} at position {k + 1} "
                                      f"({spec.label()})")

    @property
    def K(self) -> int:
        return len(self.specs)

    @property
    def mle_index(self) -> Optional[int]:
        for k, spec in enumerate(self.specs):
            if spec.is_mle:
                return k
        return None

    @classmethod
    def calibrated(cls, family: EdmFamily, link: LinkSpec, params: ParamVector, x_sample, alpha: float,
                   deltas: Sequence[float], seed: int = 0) -> "HyperGrid":
        return cls(tuple(calibrate_complete(family, link, params, x_sample, alpha, d, seed) for d in deltas))

    @classmethod
    def calibrated_censored(cls, family: EdmFamily, link: LinkSpec, mle: ParamVector, records: RecordSet,
                            alpha: float, deltas: Sequence[float]) -> "HyperGrid":
        return cls(tuple(calibrate_censored(family, link, mle, records, alpha, d) for d in deltas))

    def to_list(self) -> List[dict]:
        return [spec.to_dict() for spec in self.specs]


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float

    def rejects(self, level: float) -> bool:
        return self.p_value < level

    def to_dict(self):
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


# ---------------------------------------------------------------------------
# Meta covariance
# ---------------------------------------------------------------------------

def mean_cross_moment(family: EdmFamily, link: LinkSpec, params: ParamVector, spec_a: WeightSpec,
                      spec_b: WeightSpec, data: Dataset) -> np.ndarray:
    """Covariate-averaged E[S_a S_b^T] for complete or incomplete data"""
    if isinstance(data, RecordSet):
        return pair_moment_rows(family, link, params, spec_a, spec_b, data).mean(axis=0)
    return cross_moment_rows(family, link, params, spec_a, spec_b, data.X).mean(axis=0)


def meta_covariance(family: EdmFamily, link: LinkSpec, mle_params: ParamVector, specs: Sequence[WeightSpec],
                    data: Dataset) -> np.ndarray:
    """Sigma_meta of sqrt(n) (Psi^(1), ..., Psi^(K)), shape ((P+1)K, (P+1)K)"""
    specs = list(specs)
    d = mle_params.n_coef + 1
    K = len(specs)
    mle = WeightSpec.mle()
    inverses = []
    for k, spec in enumerate(specs):
        gamma = -mean_cross_moment(family, link, mle_params, spec, mle, data)
        try:
            inverses.append(solve_linear(gamma, np.eye(d), label=f"Gamma k={k + 1}"))
        except SingularMatrixError as e:
            raise SingularMatrixError(f"Gamma for spec k={k + 1} is singular (condition {e.condition:.3e})",
                                      e.condition, f"k={k + 1}")

    sigma = np.zeros((d * K, d * K))
    for k in range(K):
        for k2 in range(k, K):
            lam = mean_cross_moment(family, link, mle_params, specs[k], specs[k2], data)
            block = inverses[k] @ lam @ inverses[k2].T
            sigma[k * d:(k + 1) * d, k2 * d:(k2 + 1) * d] = block
            sigma[k2 * d:(k2 + 1) * d, k * d:(k + 1) * d] = block.T
    return (sigma + sigma.T) / 2.0


# ---------------------------------------------------------------------------
# Wald statistics
# ---------------------------------------------------------------------------

def _stacked(fits: Sequence[FitResult]) -> Tuple[np.ndarray, int]:
    n_obs = {f.n_obs for f in fits}
    if len(n_obs) != 1:
        raise ValueError(f"fits use different sample sizes: {sorted(n_obs)}")
    return np.concatenate([f.params.as_array() for f in fits]), n_obs.pop()


def _wald(design: np.ndarray, estimates: np.ndarray, sigma: np.ndarray, n: int, label: str) -> WaldResult:
    diff = design @ estimates
    middle = np.atleast_2d(design @ sigma @ design.T)
    cond = condition_number(middle)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularMatrixError(f"{label}: contrast covariance is near-singular (condition {cond:.3e})",
                                  cond, label)
    statistic = float(n * diff @ np.linalg.solve(middle, diff))
    statistic = max(statistic, 0.0)
    df = design.shape[0]
    return WaldResult(statistic, df, float(chi_square_sf(statistic, df)))


def contrast_matrix(K: int, d: int, contrast: str = "consecutive") -> np.ndarray:
    """Rows (I, -I) between consecutive specs, or between spec 1 and each other spec"""
    if K < 2:
        raise ValueError("meta statistics need at least two weight specs")
    out = np.zeros((d * (K - 1), d * K))
    eye = np.eye(d)
    for j in range(K - 1):
        first = j if contrast == "consecutive" else 0
        if contrast not in ("consecutive", "baseline"):
            raise ValueError(f"unknown contrast '{contrast}'")
        out[j * d:(j + 1) * d, first * d:(first + 1) * d] = eye
        out[j * d:(j + 1) * d, (j + 1) * d:(j + 2) * d] = -eye
    return out


def _pair_design(k: int, k2: int, K: int, d: int, rows: Optional[Sequence[int]] = None) -> np.ndarray:
    if k == k2:
        raise ValueError(f"pairwise statistics need two different specs, got k=k'={k + 1}")
    if not (0 <= k < K and 0 <= k2 < K):
        raise ValueError(f"spec indices ({k + 1}, {k2 + 1}) out of range 1..{K}")
    rows = list(range(d)) if rows is None else list(rows)
    out = np.zeros((len(rows), d * K))
    for r, p in enumerate(rows):
        out[r, k * d + p] = 1.0
        out[r, k2 * d + p] = -1.0
    return out


def meta_wald(fits: Sequence[FitResult], sigma_meta: np.ndarray, contrast: str = "consecutive") -> WaldResult:
    estimates, n = _stacked(fits)
    d = fits[0].params.n_coef + 1
    return _wald(contrast_matrix(len(fits), d, contrast), estimates, sigma_meta, n, "meta Wald")


def individual_wald(k: int, k2: int, fits: Sequence[FitResult], sigma_meta: np.ndarray) -> WaldResult:
    """Pairwise comparison of the full parameter vectors of specs k and k' (0-based)"""
    estimates, n = _stacked(fits)
    d = fits[0].params.n_coef + 1
    return _wald(_pair_design(k, k2, len(fits), d), estimates, sigma_meta, n, f"individual Wald ({k + 1},{k2 + 1})")


def param_meta_wald(p: int, fits: Sequence[FitResult], sigma_meta: np.ndarray,
                    contrast: str = "consecutive") -> WaldResult:
    """Meta statistic restricted to parameter p (0-based; p = P is phi)"""
    estimates, n = _stacked(fits)
    d = fits[0].params.n_coef + 1
    if not 0 <= p < d:
        raise ValueError(f"parameter index {p} out of range 0..{d - 1}")
    full = contrast_matrix(len(fits), d, contrast)
    return _wald(full[p::d], estimates, sigma_meta, n, f"parameter {p} meta Wald")


def param_individual_wald(p: int, k: int, k2: int, fits: Sequence[FitResult], sigma_meta: np.ndarray) -> WaldResult:
    estimates, n = _stacked(fits)
    d = fits[0].params.n_coef + 1
    if not 0 <= p < d:
        raise ValueError(f"parameter index {p} out of range 0..{d - 1}")
    return _wald(_pair_design(k, k2, len(fits), d, [p]), estimates, sigma_meta, n,
                 f"parameter {p} individual Wald ({k + 1},{k2 + 1})")


def residuals(fits: Sequence[FitResult], k0: int, ses: Sequence[float]) -> np.ndarray:
    """(Psi_p^(k) - Psi_p^(k0)) / SE_p^(k0), shape (P+1, K)"""
    ses = np.asarray(ses, dtype=float)
    if not 0 <= k0 < len(fits):
        raise ValueError(f"benchmark index {k0 + 1} out of range 1..{len(fits)}")
    if np.any(~(ses > 0)):
        bad = int(np.flatnonzero(~(ses > 0))[0])
        raise DomainError(f"standard error of parameter {bad} at the benchmark fit is zero", "se", float(ses[bad]))
    estimates = np.column_stack([f.params.as_array() for f in fits])
    return (estimates - estimates[:, [k0]]) / ses[:, None]


# ---------------------------------------------------------------------------
# Orchestration and report
# ---------------------------------------------------------------------------

def param_names(n_coef: int) -> List[str]:
    return [f"beta{j + 1}" for j in range(n_coef)] + ["phi"]


@dataclass
class MetaWaldReport:
    fits: List[FitResult]
    sigma_meta: np.ndarray
    meta: WaldResult
    individual: Dict[Tuple[int, int], WaldResult]
    param_meta: List[WaldResult]
    param_individual: List[Dict[Tuple[int, int], WaldResult]]
    residual_matrix: np.ndarray
    k0: int = 0
    level: float = 0.05
    names: List[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.fits)

    def individual_matrix(self, which: str = "statistic") -> np.ndarray:
        out = np.zeros((self.K, self.K))
        for (k, k2), res in self.individual.items():
            out[k, k2] = out[k2, k] = getattr(res, which)
        return out

    def to_dict(self):
        return {
            "K": self.K,
            "level": self.level,
            "k0": self.k0 + 1,
            "parameters": self.names,
            "fits": [f.to_dict() for f in self.fits],
            "meta": self.meta.to_dict(),
            "individual": [{"k": k + 1, "k_prime": k2 + 1, **res.to_dict()}
                           for (k, k2), res in sorted(self.individual.items())],
            "param_meta": [{"parameter": name, **res.to_dict()} for name, res in zip(self.names, self.param_meta)],
            "param_individual": [
                {"parameter": name, "k": k + 1, "k_prime": k2 + 1, **res.to_dict()}
                for name, table in zip(self.names, self.param_individual)
                for (k, k2), res in sorted(table.items())
            ],
            "residuals": {name: row.tolist() for name, row in zip(self.names, self.residual_matrix)},
            "sigma_meta": self.sigma_meta.tolist(),
        }

    def to_text(self) -> str:
        lines = [f"Meta Wald: statistic {self.meta.statistic:.3f}, df {self.meta.df}, p {self.meta.p_value:.3f}", ""]
        lines.append("Individual Wald (statistics lower triangle, p-values upper triangle)")
        lines.append(triangular_table(self.individual))
        for name, res, table in zip(self.names, self.param_meta, self.param_individual):
            lines.append("")
            lines.append(f"{name}: meta statistic {res.statistic:.3f}, df {res.df}, p {res.p_value:.3f}")
            lines.append(triangular_table(table))
        lines.append("")
        lines.append(f"Standardized parameter deviance residuals (benchmark k={self.k0 + 1})")
        header = "".join(f"{'k=' + str(k + 1):>10}" for k in range(self.K))
        lines.append(f"{'':>8}{header}")
        for name, row in zip(self.names, self.residual_matrix):
            lines.append(f"{name:>8}" + "".join(f"{v:>10.3f}" for v in row))
        return "\n".join(lines)


def triangular_table(entries: Dict[Tuple[int, int], WaldResult]) -> str:
    K = 1 + max(max(k, k2) for k, k2 in entries) if entries else 1
    cells = [["-" for _ in range(K)] for _ in range(K)]
    for (k, k2), res in entries.items():
        lo, hi = min(k, k2), max(k, k2)
        cells[hi][lo] = f"{res.statistic:.3f}"
        cells[lo][hi] = f"{res.p_value:.3f}"
    width = max(8, max(len(c) for row in cells for c in row) + 2)
    lines = [f"{'':>6}" + "".join(f"{'k=' + str(k + 1):>{width}}" for k in range(K))]
    for k, row in enumerate(cells):
        lines.append(f"{'k=' + str(k + 1):>6}" + "".join(f"{c:>{width}}" for c in row))
    return "\n".join(lines)


def fit_dataset(family: EdmFamily, link: LinkSpec, spec: WeightSpec, data: Dataset,
                options: Optional[FitOptions] = None) -> FitResult:
    if isinstance(data, RecordSet):
        return fit_censtrun(family, link, spec, data, options)
    return fit_complete(family, link, spec, data, options)


def diagnose(family: EdmFamily, link: LinkSpec, grid: HyperGrid, data: Dataset,
             options: Optional[FitOptions] = None, k0: int = 0, level: float = 0.05, jobs: int = 1,
             contrast: str = "consecutive") -> MetaWaldReport:
    """Fit every spec of the grid and compute all Wald statistics and residuals"""
    options = options or FitOptions()
    if grid.K < 2:
        raise ConfigError("diagnostics need a grid with at least two weight specs")
    if not 0 <= k0 < grid.K:
        raise ConfigError(f"benchmark k0={k0 + 1} out of range 1..{grid.K}")

    base = grid.mle_index
    if base is None:
        logger.warning("grid has no MLE entry; evaluating Sigma_meta at the fit of spec 1")
        base = 0
    fits: List[Optional[FitResult]] = [None] * grid.K
    fits[base] = fit_dataset(family, link, grid.specs[base], data, options)
    warm = replace(options, init=options.init or fits[base].params)

    others = [k for k in range(grid.K) if k != base]
    if jobs > 1 and len(others) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=min(jobs, len(others))) as executor:
            future_to_k = {executor.submit(fit_dataset, family, link, grid.specs[k], data, warm): k for k in others}
            for future in concurrent.futures.as_completed(future_to_k):
                fits[future_to_k[future]] = future.result()
    else:
        for k in others:
            fits[k] = fit_dataset(family, link, grid.specs[k], data, warm)

    sigma = meta_covariance(family, link, fits[base].params, grid.specs, data)
    d = fits[0].params.n_coef + 1
    meta = meta_wald(fits, sigma, contrast)
    individual = {(k, k2): individual_wald(k, k2, fits, sigma) for k in range(grid.K) for k2 in range(k + 1, grid.K)}
    param_meta = [param_meta_wald(p, fits, sigma, contrast) for p in range(d)]
    param_individual = [{(k, k2): param_individual_wald(p, k, k2, fits, sigma)
                         for k in range(grid.K) for k2 in range(k + 1, grid.K)} for p in range(d)]

    ses = fits[k0].standard_errors
    if ses is None:
        raise ConfigError("benchmark fit has no covariance; enable compute_covariance")
    resid = residuals(fits, k0, ses)
    logger.info(f"Meta Wald statistic {meta.statistic:.3f} (df {meta.df}, p {meta.p_value:.3g}) over K={grid.K}")
    return MetaWaldReport(fits, sigma, meta, individual, param_meta, param_individual, resid, k0, level,
                          param_names(d - 1))
