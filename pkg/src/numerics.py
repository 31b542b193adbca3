"""
Shared numerical kernels.

Adaptive quadrature and root finding wrap QUADPACK and Brent's method from
scipy; symmetric solves go through scipy.linalg's Cholesky routines with an
LU fallback. The batch quadrature engine integrates many one-dimensional
densities at once, one row per record, and is what keeps censored fits
vectorized. Random streams are numpy Generators derived from SeedSequence
so that per-replication draws do not depend on scheduling.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate as sp_integrate
from scipy import linalg as sp_linalg
from scipy import optimize as sp_optimize
from scipy import special as sp_special

from .errors import BracketError, SingularMatrixError
from .logger import get_module_logger

logger = get_module_logger("numerics")

DEFAULT_REL_TOL = 1e-9
DEFAULT_ABS_TOL = 1e-12
DEFAULT_ROOT_TOL = 1e-12
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class QuadratureResult:
    """Outcome of one adaptive quadrature call"""
    value: float
    error_estimate: float
    subdivisions: int
    rel_tol: float = DEFAULT_REL_TOL
    abs_tol: float = DEFAULT_ABS_TOL

    @property
    def converged(self) -> bool:
        return self.error_estimate <= max(self.abs_tol, self.rel_tol * abs(self.value))


def integrate(f: Callable[[float], float], lo: float, hi: float,
              rel_tol: float = DEFAULT_REL_TOL, abs_tol: float = DEFAULT_ABS_TOL,
              limit: int = 200, points: Optional[Sequence[float]] = None) -> QuadratureResult:
    """Adaptive Gauss-Kronrod quadrature of f over (lo, hi].

    Infinite end points are accepted; QUADPACK maps them onto a finite
    interval itself. Non-convergence is reported through the result's
    ``converged`` flag and left to the caller.
    """
    if not hi > lo:
        return QuadratureResult(0.0, 0.0, 0, rel_tol, abs_tol)

    kwargs = {"epsabs": abs_tol, "epsrel": rel_tol, "limit": limit, "full_output": 1}
    if points is not None and np.isfinite(lo) and np.isfinite(hi):
        inner = [p for p in points if lo < p < hi]
        if inner:
            kwargs["points"] = inner

    out = sp_integrate.quad(f, lo, hi, **kwargs)
    value, error, info = out[0], out[1], out[2]
    result = QuadratureResult(float(value), float(abs(error)), int(info.get("last", 0)), rel_tol, abs_tol)
    if not result.converged:
        logger.debug(f"Quadrature on ({lo}, {hi}] flagged: value={value:.6g}, error={error:.3g}")
    return result


def find_root(g: Callable[[float], float], bracket: Tuple[float, float],
              tol: float = DEFAULT_ROOT_TOL, max_iter: int = 200) -> float:
    """Brent root of g inside a sign-changing bracket"""
    lo, hi = bracket
    g_lo, g_hi = g(lo), g(hi)
    if g_lo == 0.0:
        return float(lo)
    if g_hi == 0.0:
        return float(hi)
    if not (np.isfinite(g_lo) and np.isfinite(g_hi)) or np.sign(g_lo) == np.sign(g_hi):
        raise BracketError(
            f"No sign change on [{lo:.6g}, {hi:.6g}]: g(lo)={g_lo:.6g}, g(hi)={g_hi:.6g}",
            interval=(lo, hi), values=(g_lo, g_hi))
    return float(sp_optimize.brentq(g, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=max_iter))


def scan_bracket(g: Callable[[float], float], points: Sequence[float]) -> Tuple[float, float]:
    """First pair of consecutive points on which g changes sign"""
    values = [g(p) for p in points]
    for (p0, v0), (p1, v1) in zip(zip(points, values), zip(points[1:], values[1:])):
        if np.isfinite(v0) and np.isfinite(v1) and (v0 == 0.0 or np.sign(v0) != np.sign(v1)):
            return p0, p1
    raise BracketError(
        f"No sign change found while scanning [{points[0]:.6g}, {points[-1]:.6g}]",
        interval=(points[0], points[-1]), values=(values[0], values[-1]))


def chi_square_sf(x, k):
    """Chi-square survival function via the regularized upper incomplete gamma"""
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    out = sp_special.gammaincc(k / 2.0, np.maximum(x, 0.0) / 2.0)
    out = np.where(x <= 0.0, 1.0, out)
    return float(out) if out.ndim == 0 else out


def condition_number(a: np.ndarray) -> float:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if not np.all(np.isfinite(a)):
        return float("inf")
    return float(np.linalg.cond(a))


def solve_spd(a: np.ndarray, b: np.ndarray, max_condition: float = MAX_CONDITION,
              label: Optional[str] = None) -> np.ndarray:
    """Solve A X = B for symmetric A.

    Cholesky first; when A is not positive definite, fall back to pivoted LU.
    Matrices whose condition number exceeds ``max_condition`` are rejected.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    cond = condition_number(a)
    if not np.isfinite(cond) or cond > max_condition:
        what = f" ({label})" if label else ""
        raise SingularMatrixError(f"Matrix{what} is numerically singular: condition number {cond:.3e}",
                                  condition=cond, label=label)
    try:
        factor = sp_linalg.cho_factor(a, check_finite=False)
        return sp_linalg.cho_solve(factor, b, check_finite=False)
    except np.linalg.LinAlgError:
        logger.debug(f"Cholesky failed (condition {cond:.3e}); using pivoted LU")
        return solve_linear(a, b, max_condition=max_condition, label=label)


def solve_linear(a: np.ndarray, b: np.ndarray, max_condition: float = MAX_CONDITION,
                 label: Optional[str] = None) -> np.ndarray:
    """Solve A X = B for a general square A by pivoted LU"""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    cond = condition_number(a)
    if not np.isfinite(cond) or cond > max_condition:
        what = f" ({label})" if label else ""
        raise SingularMatrixError(f"Matrix{what} is numerically singular: condition number {cond:.3e}",
                                  condition=cond, label=label)
    lu, piv = sp_linalg.lu_factor(a, check_finite=False)
    return sp_linalg.lu_solve((lu, piv), np.asarray(b, dtype=float), check_finite=False)


def central_jacobian(fun: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                     steps: Optional[np.ndarray] = None) -> np.ndarray:
    """Central-difference Jacobian with step eps^(1/3) * max(1, |x|)"""
    x0 = np.asarray(x0, dtype=float)
    if steps is None:
        steps = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(x0))
    columns = []
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = steps[j]
        columns.append((np.asarray(fun(x0 + e)) - np.asarray(fun(x0 - e))) / (2.0 * steps[j]))
    return np.column_stack(columns)


# ---------------------------------------------------------------------------
# Batch quadrature
# ---------------------------------------------------------------------------

@dataclass
class BatchQuadrature:
    """Per-row integrals: log of the mass and feature means per unit mass"""
    log_mass: np.ndarray
    means: np.ndarray


@lru_cache(maxsize=8)
def _gauss_legendre(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(nodes)


def batch_integrate(log_integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
                    features: Callable[[np.ndarray, np.ndarray], np.ndarray],
                    n_features: int, t_lo: np.ndarray, t_hi: np.ndarray,
                    grid_size: int = 257, panels: int = 16, nodes: int = 16,
                    margin: float = 50.0, chunk_size: int = 2048) -> BatchQuadrature:
    """Integrate exp(log_integrand) and exp(log_integrand) * features row by row.

    ``log_integrand(t, rows)`` and ``features(t, rows)`` receive an array of
    abscissae with one row per selected record and return arrays of shape
    ``t.shape`` and ``t.shape + (n_features,)``. Each row's window
    [t_lo, t_hi] is first scanned on a uniform grid and trimmed to where the
    log integrand lies within ``margin`` nats of its maximum; the trimmed
    window is then integrated by composite Gauss-Legendre. Masses are
    returned on the log scale so far-tail regions keep their precision.
    """
    t_lo = np.asarray(t_lo, dtype=float)
    t_hi = np.asarray(t_hi, dtype=float)
    n = t_lo.shape[0]
    log_mass = np.full(n, -np.inf)
    means = np.zeros((n, n_features))

    active = np.flatnonzero(np.isfinite(t_lo) & np.isfinite(t_hi) & (t_hi > t_lo))
    for start in range(0, active.size, chunk_size):
        rows = active[start:start + chunk_size]
        lm, mu = _integrate_rows(log_integrand, features, n_features, t_lo[rows], t_hi[rows], rows,
                                 grid_size, panels, nodes, margin)
        log_mass[rows] = lm
        means[rows] = mu
    return BatchQuadrature(log_mass, means)


def _integrate_rows(log_integrand, features, n_features, a, b, rows, grid_size, panels, nodes, margin):
    r = rows.size
    u = np.linspace(0.0, 1.0, grid_size)
    grid = a[:, None] + (b - a)[:, None] * u[None, :]
    coarse = _finite_or_neg_inf(log_integrand(grid, rows))
    peak = coarse.max(axis=1)
    alive = np.isfinite(peak)

    keep = coarse >= (peak - margin)[:, None]
    first = np.argmax(keep, axis=1)
    last = grid_size - 1 - np.argmax(keep[:, ::-1], axis=1)
    idx = np.arange(r)
    lo = grid[idx, np.maximum(first - 1, 0)]
    hi = grid[idx, np.minimum(last + 1, grid_size - 1)]

    x, w = _gauss_legendre(nodes)
    width = (hi - lo) / panels
    left = lo[:, None] + width[:, None] * np.arange(panels)[None, :]
    t = (left[:, :, None] + width[:, None, None] * (x[None, None, :] + 1.0) / 2.0).reshape(r, panels * nodes)
    weights = (width[:, None] / 2.0) * np.tile(w, panels)[None, :]

    fine = _finite_or_neg_inf(log_integrand(t, rows))
    top = fine.max(axis=1)
    alive &= np.isfinite(top)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(fine - top[:, None]) * weights
    scaled = e.sum(axis=1)
    alive &= scaled > 0

    feats = np.asarray(features(t, rows), dtype=float)
    feats = np.where(e[:, :, None] > 0, feats, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = np.einsum("rm,rmk->rk", e, feats) / scaled[:, None]
        lm = top + np.log(scaled)
    lm = np.where(alive, lm, -np.inf)
    mu = np.where(alive[:, None], mu, 0.0)
    return lm, mu


def _finite_or_neg_inf(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.where(np.isnan(values) | (values == np.inf), -np.inf, values)


# ---------------------------------------------------------------------------
# Random streams and samplers
# ---------------------------------------------------------------------------

def make_rng(seed) -> np.random.Generator:
    """PCG64 generator from a 64-bit seed (or a SeedSequence)"""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, count: int) -> List[int]:
    """Independent 64-bit child seeds, fixed by (seed, index) only"""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def sample_normal(rng: np.random.Generator, mean, variance) -> np.ndarray:
    return rng.normal(mean, np.sqrt(variance))


def sample_gamma(rng: np.random.Generator, shape, scale) -> np.ndarray:
    # numpy's gamma sampler is Marsaglia-Tsang
    return rng.gamma(shape, scale)


def sample_inverse_gaussian(rng: np.random.Generator, mean, shape) -> np.ndarray:
    # numpy's wald sampler is the Michael-Schucany-Haas transform
    return rng.wald(mean, shape)


def sample_student_t(rng: np.random.Generator, df: float, size) -> np.ndarray:
    return rng.standard_t(df, size)
