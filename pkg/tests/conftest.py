import numpy as np
import pytest
from scipy import optimize

from src.families import ParamVector, get_family, make_link
from src.swle import GlmData

# (link, beta, phi) used throughout the suite
SETTINGS = {
    "gamma": ("log", (1.0, 0.5), 0.5),
    "normal": ("canonical", (1.0, 0.5), 0.25),
    "invgauss": ("log", (1.0, 0.5), 0.1),
}


def simulate_glm(name, n, seed, link=None, beta=None, phi=None):
    """Responses from the model with x = (1, N(0,1))"""
    family = get_family(name)
    default_link, default_beta, default_phi = SETTINGS[name]
    link = make_link(family, link or default_link)
    params = ParamVector(beta or default_beta, phi or default_phi)
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, len(params.beta) - 1))])
    theta = params.theta(link, X)
    y = family.sample(rng, theta, np.full(n, params.phi))
    return family, link, params, GlmData(y, X)


@pytest.fixture(params=sorted(SETTINGS))
def family_name(request):
    return request.param


@pytest.fixture
def model(family_name):
    return simulate_glm(family_name, 400, seed=11)


def stationary_point(objective, start):
    """Root of the central-difference gradient of ``objective``, polished from ``start``"""
    def gradient(x):
        steps = 1e-5 * np.maximum(1.0, np.abs(x))
        return np.array([(objective(x + e) - objective(x - e)) / (2.0 * h) for h, e in zip(steps, np.diag(steps))])

    return optimize.root(gradient, np.asarray(start, dtype=float), method="hybr", options={"xtol": 1e-13}).x
