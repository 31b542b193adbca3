"""
Exponential-dispersion families and link functions.

Every family is written in the decomposed form

    f(y; theta, phi) = exp{(theta*y - A(theta))/phi + (1/phi - c)*g(y) + a(y) + b(phi)}

so the weight tilts, transformed parameters and covariance elements used
elsewhere only need A, g, a, b, c and their derivatives. All methods are
vectorized over numpy arrays and free of side effects; family and link
objects are immutable singletons that may be shared between threads.
"""
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np
from scipy import special as sp_special
from scipy import stats as sp_stats

from .errors import DomainError
from .numerics import batch_integrate

LN2PI = np.log(2.0 * np.pi)


class FamilyId(str, Enum):
    GAMMA = "gamma"
    NORMAL = "normal"
    INVERSE_GAUSSIAN = "invgauss"


class LinkId(str, Enum):
    CANONICAL = "canonical"
    LOG = "log"


@dataclass(frozen=True)
class Interval:
    """Half-open interval (lo, hi]; infinite end points stand for unbounded sides"""
    lo: float = -np.inf
    hi: float = np.inf

    @property
    def is_empty(self) -> bool:
        return not self.hi > self.lo

    def contains(self, y: float) -> bool:
        return self.lo < y <= self.hi

    def intersect(self, other: "Interval") -> "Interval":
        return Interval(max(self.lo, other.lo), min(self.hi, other.hi))

    def covers(self, other: "Interval") -> bool:
        return other.is_empty or (self.lo <= other.lo and other.hi <= self.hi)

    def __str__(self) -> str:
        return f"({self.lo:g}, {self.hi:g}]"


@dataclass(frozen=True)
class RegionTerms:
    """Mass of a region and conditional moments of the per-observation score terms.

    For a density with parameters (theta, phi) the score terms are
    s_theta = y - A'(theta) and s_phi = theta*y - A(theta) + g(y) - phi^2 b'(phi).
    ``mean_score`` holds E[s | region] and ``mean_outer`` E[s s^T | region].
    """
    log_mass: np.ndarray
    mean_score: np.ndarray
    mean_outer: np.ndarray

    @property
    def mass(self) -> np.ndarray:
        return np.exp(self.log_mass)


class EdmFamily(metaclass=ABCMeta):
    """Base class of the exponential-dispersion families"""

    family_id: FamilyId
    c: float
    support: Interval

    # -- cumulant and dispersion functions --------------------------------
    @abstractmethod
    def cumulant(self, theta):
        pass

    @abstractmethod
    def dcumulant(self, theta):
        pass

    @abstractmethod
    def d2cumulant(self, theta):
        pass

    @abstractmethod
    def g(self, y):
        pass

    @abstractmethod
    def a(self, y):
        pass

    @abstractmethod
    def b(self, phi):
        pass

    @abstractmethod
    def db(self, phi):
        pass

    @abstractmethod
    def d2b(self, phi):
        pass

    @abstractmethod
    def theta_from_mean(self, mu):
        pass

    @abstractmethod
    def scipy_dist(self, theta, phi):
        """Frozen scipy.stats distribution with the same law"""

    @abstractmethod
    def window(self, theta, phi) -> Tuple[np.ndarray, np.ndarray]:
        """Integration-variable range outside which the density is negligible"""

    # -- parameter checks --------------------------------------------------
    def valid_theta(self, theta):
        return np.isfinite(theta)

    def check_params(self, theta, phi, label: str = "") -> None:
        """Raise DomainError naming the first parameter outside the valid region"""
        prefix = f"{label} " if label else ""
        phi_arr = np.asarray(phi, dtype=float)
        if not np.all(np.isfinite(phi_arr) & (phi_arr > 0)):
            bad = phi_arr[~(np.isfinite(phi_arr) & (phi_arr > 0))].ravel()[0]
            raise DomainError(f"{prefix}dispersion phi must be positive, got {bad:g}", "phi", float(bad))
        theta_arr = np.asarray(theta, dtype=float)
        ok = self.valid_theta(theta_arr)
        if not np.all(ok):
            bad = theta_arr[~ok].ravel()[0]
            raise DomainError(f"{prefix}theta={bad:g} is outside the valid region of the "
                              f"{self.family_id.value} family ({self.theta_region})", "theta", float(bad))

    theta_region = "theta real"

    def in_support(self, y):
        y = np.asarray(y, dtype=float)
        return (y > self.support.lo) & (y < self.support.hi)

    # -- moments -------------------------------------------------------------
    def mean(self, theta):
        return self.dcumulant(theta)

    def variance(self, theta, phi):
        return phi * self.d2cumulant(theta)

    # -- density ---------------------------------------------------------------
    def log_density(self, theta, phi, y):
        y = np.asarray(y, dtype=float)
        inside = self.in_support(y)
        y_safe = np.where(inside, y, self._interior_point)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = ((theta * y_safe - self.cumulant(theta)) / phi
                     + (1.0 / phi - self.c) * self.g(y_safe) + self.a(y_safe) + self.b(phi))
        return np.where(inside, value, -np.inf)

    _interior_point = 1.0

    def density(self, theta, phi, y):
        self.check_params(theta, phi)
        return np.exp(self.log_density(theta, phi, y))

    def cdf(self, theta, phi, lo, hi):
        """Probability of (lo, hi] computed from the closed-form distribution"""
        self.check_params(theta, phi)
        lo = np.maximum(np.asarray(lo, dtype=float), self.support.lo)
        hi = np.minimum(np.asarray(hi, dtype=float), self.support.hi)
        dist = self.scipy_dist(theta, phi)
        median = dist.median()
        upper = np.asarray(dist.sf(lo) - dist.sf(hi))
        lower = np.asarray(dist.cdf(hi) - dist.cdf(lo))
        prob = np.where(lo >= median, upper, lower)
        prob = np.where(hi > lo, np.clip(prob, 0.0, 1.0), 0.0)
        return float(prob) if prob.ndim == 0 else prob

    def ppf(self, theta, phi, u):
        return self.scipy_dist(theta, phi).ppf(u)

    def score_terms(self, theta, phi, y):
        """(y - A'(theta), theta*y - A(theta) + g(y) - phi^2 b'(phi))"""
        s_theta = y - self.dcumulant(theta)
        s_phi = theta * y - self.cumulant(theta) + self.g(y) - phi ** 2 * self.db(phi)
        return s_theta, s_phi

    def full_support_outer(self, theta, phi):
        """E[s s^T] over the whole support; the cross term vanishes identically"""
        theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
        out = np.zeros(theta.shape + (2, 2))
        out[..., 0, 0] = phi * self.d2cumulant(theta)
        out[..., 1, 1] = -phi ** 3 * (2.0 * self.db(phi) + phi * self.d2b(phi))
        return out

    # -- integration variable ----------------------------------------------------
    def to_t(self, y):
        return np.asarray(y, dtype=float)

    def from_t(self, t):
        return t

    def log_jacobian(self, t):
        return 0.0

    def region_terms(self, theta, phi, lo, hi) -> RegionTerms:
        """Mass and conditional score moments of (lo, hi] for each row.

        Full-support rows use closed forms; the rest go through the batch
        Gauss-Legendre engine in the family's integration variable.
        """
        theta, phi, lo, hi = (np.atleast_1d(np.asarray(v, dtype=float))
                              for v in np.broadcast_arrays(theta, phi, lo, hi))
        n = theta.shape[0]
        log_mass = np.zeros(n)
        mean_score = np.zeros((n, 2))
        mean_outer = self.full_support_outer(theta, phi)

        full = (lo <= self.support.lo) & (hi >= self.support.hi)
        part = np.flatnonzero(~full)
        if part.size:
            th, ph = theta[part], phi[part]
            w_lo, w_hi = self.window(th, ph)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_lo = np.maximum(self.to_t(np.maximum(lo[part], self.support.lo)), w_lo)
                t_hi = np.minimum(self.to_t(np.minimum(hi[part], self.support.hi)), w_hi)

            def log_integrand(t, rows):
                y = self.from_t(t)
                return self.log_density(th[rows][:, None], ph[rows][:, None], y) + self.log_jacobian(t)

            def features(t, rows):
                y = self.from_t(t)
                s_theta, s_phi = self.score_terms(th[rows][:, None], ph[rows][:, None], y)
                return np.stack([s_theta, s_phi, s_theta ** 2, s_theta * s_phi, s_phi ** 2], axis=-1)

            quad = batch_integrate(log_integrand, features, 5, t_lo, t_hi)
            log_mass[part] = quad.log_mass
            mean_score[part] = quad.means[:, :2]
            outer = np.empty((part.size, 2, 2))
            outer[:, 0, 0] = quad.means[:, 2]
            outer[:, 0, 1] = outer[:, 1, 0] = quad.means[:, 3]
            outer[:, 1, 1] = quad.means[:, 4]
            mean_outer[part] = outer
        return RegionTerms(log_mass, mean_score, mean_outer)

    def sample(self, rng: np.random.Generator, theta, phi):
        raise NotImplementedError

    def canonical_link(self) -> "LinkSpec":
        return LinkSpec(LinkId.CANONICAL, self.family_id)

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class GammaFamily(EdmFamily):
    family_id = FamilyId.GAMMA
    c = 1.0
    support = Interval(0.0, np.inf)
    theta_region = "theta < 0"

    def valid_theta(self, theta):
        return np.isfinite(theta) & (theta < 0)

    def cumulant(self, theta):
        return -np.log(-theta)

    def dcumulant(self, theta):
        return -1.0 / theta

    def d2cumulant(self, theta):
        return 1.0 / theta ** 2

    def g(self, y):
        return np.log(y)

    def a(self, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def b(self, phi):
        k = 1.0 / phi
        return k * np.log(k) - sp_special.gammaln(k)

    def db(self, phi):
        return (np.log(phi) - 1.0 + sp_special.digamma(1.0 / phi)) / phi ** 2

    def d2b(self, phi):
        k = 1.0 / phi
        return (-2.0 * (np.log(phi) - 1.0 + sp_special.digamma(k)) / phi ** 3
                + 1.0 / phi ** 3 - sp_special.polygamma(1, k) / phi ** 4)

    def theta_from_mean(self, mu):
        return -1.0 / mu

    def scipy_dist(self, theta, phi):
        return sp_stats.gamma(a=1.0 / phi, scale=-phi / theta)

    def sample(self, rng, theta, phi):
        from .numerics import sample_gamma
        return sample_gamma(rng, 1.0 / phi, -phi / theta)

    def to_t(self, y):
        return np.log(y)

    def from_t(self, t):
        return np.exp(t)

    def log_jacobian(self, t):
        return t

    def window(self, theta, phi):
        # shape k: the log integrand k*t - k*e^t/mu drops >= 100 nats outside
        k = 1.0 / phi
        q = 1.0 + 100.0 / k
        log_mu = np.log(-1.0 / theta)
        return log_mu - (q + 1.0), log_mu + np.log(q + np.log(q) + 1.0)


class NormalFamily(EdmFamily):
    family_id = FamilyId.NORMAL
    c = 0.0
    support = Interval(-np.inf, np.inf)
    _interior_point = 0.0

    def cumulant(self, theta):
        return theta ** 2 / 2.0

    def dcumulant(self, theta):
        return theta

    def d2cumulant(self, theta):
        return np.ones_like(np.asarray(theta, dtype=float))

    def g(self, y):
        return -np.asarray(y, dtype=float) ** 2 / 2.0

    def a(self, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def b(self, phi):
        return -0.5 * (LN2PI + np.log(phi))

    def db(self, phi):
        return -0.5 / phi

    def d2b(self, phi):
        return 0.5 / phi ** 2

    def theta_from_mean(self, mu):
        return mu

    def scipy_dist(self, theta, phi):
        return sp_stats.norm(loc=theta, scale=np.sqrt(phi))

    def sample(self, rng, theta, phi):
        from .numerics import sample_normal
        return sample_normal(rng, theta, phi)

    def score_terms(self, theta, phi, y):
        r = y - theta
        return r, (phi - r ** 2) / 2.0

    def window(self, theta, phi):
        half = 40.0 * np.sqrt(phi)
        return theta - half, theta + half


class InverseGaussianFamily(EdmFamily):
    family_id = FamilyId.INVERSE_GAUSSIAN
    c = 0.0
    support = Interval(0.0, np.inf)
    theta_region = "theta < 0"

    def valid_theta(self, theta):
        return np.isfinite(theta) & (theta < 0)

    def cumulant(self, theta):
        return -np.sqrt(-2.0 * theta)

    def dcumulant(self, theta):
        return 1.0 / np.sqrt(-2.0 * theta)

    def d2cumulant(self, theta):
        return (-2.0 * theta) ** -1.5

    def g(self, y):
        return -0.5 / np.asarray(y, dtype=float)

    def a(self, y):
        return -0.5 * (LN2PI + 3.0 * np.log(y))

    def b(self, phi):
        return -0.5 * np.log(phi)

    def db(self, phi):
        return -0.5 / phi

    def d2b(self, phi):
        return 0.5 / phi ** 2

    def theta_from_mean(self, mu):
        return -0.5 / mu ** 2

    def scipy_dist(self, theta, phi):
        mu = 1.0 / np.sqrt(-2.0 * theta)
        return sp_stats.invgauss(mu=mu * phi, scale=1.0 / phi)

    def sample(self, rng, theta, phi):
        from .numerics import sample_inverse_gaussian
        return sample_inverse_gaussian(rng, 1.0 / np.sqrt(-2.0 * theta), 1.0 / phi)

    def to_t(self, y):
        return np.log(y)

    def from_t(self, t):
        return np.exp(t)

    def log_jacobian(self, t):
        return t

    def window(self, theta, phi):
        # z = y/mu; r*(z-1)^2/(2z) = 100 at both ends, r = lambda/mu
        mu = 1.0 / np.sqrt(-2.0 * theta)
        r = 1.0 / (phi * mu)
        q = 1.0 + 100.0 / r
        root = np.sqrt(q * q - 1.0)
        return np.log(mu) - np.log(q + root), np.log(mu) + np.log(q + root)


@dataclass(frozen=True)
class LinkSpec:
    """Mapping theta = xi(x^T beta) for one family"""
    link_id: LinkId
    family_id: FamilyId

    @property
    def is_canonical(self) -> bool:
        return self.link_id == LinkId.CANONICAL

    def xi(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.is_canonical:
            return eta
        if self.family_id == FamilyId.GAMMA:
            return -np.exp(-eta)
        if self.family_id == FamilyId.INVERSE_GAUSSIAN:
            return -0.5 * np.exp(-2.0 * eta)
        return np.exp(eta)

    def dxi(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.is_canonical:
            return np.ones_like(eta)
        if self.family_id == FamilyId.GAMMA:
            return np.exp(-eta)
        if self.family_id == FamilyId.INVERSE_GAUSSIAN:
            return np.exp(-2.0 * eta)
        return np.exp(eta)

    def inverse(self, theta):
        """eta with xi(eta) = theta"""
        theta = np.asarray(theta, dtype=float)
        if self.is_canonical:
            return theta
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family_id == FamilyId.GAMMA:
                eta = -np.log(-theta)
            elif self.family_id == FamilyId.INVERSE_GAUSSIAN:
                eta = -0.5 * np.log(-2.0 * theta)
            else:
                eta = np.log(theta)
        if not np.all(np.isfinite(eta)):
            raise DomainError(f"theta={theta} cannot be produced by the {self.link_id.value} link "
                              f"of the {self.family_id.value} family", "theta")
        return eta

    def eta_from_mean(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.is_canonical:
            return FAMILIES[self.family_id].theta_from_mean(mu)
        return np.log(mu)

    def __str__(self) -> str:
        return f"{self.family_id.value}/{self.link_id.value}"


FAMILIES = {
    FamilyId.GAMMA: GammaFamily(),
    FamilyId.NORMAL: NormalFamily(),
    FamilyId.INVERSE_GAUSSIAN: InverseGaussianFamily(),
}

_FAMILY_ALIASES = {
    "gamma": FamilyId.GAMMA,
    "normal": FamilyId.NORMAL,
    "gaussian": FamilyId.NORMAL,
    "invgauss": FamilyId.INVERSE_GAUSSIAN,
    "inverse_gaussian": FamilyId.INVERSE_GAUSSIAN,
    "inversegaussian": FamilyId.INVERSE_GAUSSIAN,
    "ig": FamilyId.INVERSE_GAUSSIAN,
}


def get_family(name: Union[str, FamilyId]) -> EdmFamily:
    key = name if isinstance(name, FamilyId) else _FAMILY_ALIASES.get(str(name).lower())
    if key is None:
        raise DomainError(f"Unknown family '{name}' (expected gamma, normal or invgauss)", "family", name)
    return FAMILIES[key]


def make_link(family: EdmFamily, link: Union[str, LinkId]) -> LinkSpec:
    try:
        link_id = LinkId(link) if not isinstance(link, LinkId) else link
    except ValueError:
        raise DomainError(f"Unknown link '{link}' (expected canonical or log)", "link", link)
    return LinkSpec(link_id, family.family_id)


def density(family: EdmFamily, theta, phi, y):
    return family.density(theta, phi, y)


def cdf(family: EdmFamily, theta, phi, region: Interval):
    if region.is_empty:
        return 0.0
    return family.cdf(theta, phi, region.lo, region.hi)


@dataclass(frozen=True)
class ParamVector:
    """Model parameters (beta, phi)"""
    beta: Tuple[float, ...]
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in np.ravel(self.beta)))
        object.__setattr__(self, "phi", float(self.phi))

    @classmethod
    def from_array(cls, values) -> "ParamVector":
        values = np.asarray(values, dtype=float)
        return cls(tuple(values[:-1]), float(values[-1]))

    def as_array(self) -> np.ndarray:
        return np.append(np.asarray(self.beta, dtype=float), self.phi)

    @property
    def n_coef(self) -> int:
        return len(self.beta)

    def eta(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ np.asarray(self.beta, dtype=float)

    def theta(self, link: LinkSpec, X) -> np.ndarray:
        return link.xi(self.eta(X))

    def check(self, family: EdmFamily, link: LinkSpec, X) -> np.ndarray:
        """Canonical parameters of every row, raising DomainError if any is invalid"""
        theta = self.theta(link, X)
        family.check_params(theta, self.phi)
        return theta

    def to_dict(self):
        return {"beta": list(self.beta), "phi": self.phi}
