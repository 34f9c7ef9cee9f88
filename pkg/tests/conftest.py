import numpy as np
import pytest
from scipy.integrate import simpson

from pofrm.basis import make_basis
from pofrm.model import Dataset
from pofrm.smoothing import FunctionalSample


def smooth_curves(rng, n, t, n_terms=4):
    """Random low-frequency curves on ``t``."""
    k = np.arange(1, n_terms + 1)
    a = rng.normal(size=(n, n_terms)) / k
    b = rng.normal(size=(n, n_terms)) / k
    return (rng.normal(size=(n, 1)) + a @ np.sin(np.pi * np.outer(k, t))
            + b @ np.cos(np.pi * np.outer(k, t)))


def curve_dataset(rng, n=40, n_points=50, noise=0.05, gaps=0, gap_len=10, family="gaussian"):
    """Two curve covariates and a response driven by simple coefficient functions."""
    t = np.linspace(0.0, 1.0, n_points)
    covs = []
    eta = np.full(n, 0.3)
    for beta in (np.sin(2 * np.pi * t), 1.0 + t ** 2):
        clean = smooth_curves(rng, n, t)
        eta = eta + simpson(clean * beta, x=t, axis=1)
        obs = clean + noise * rng.normal(size=clean.shape)
        samples = []
        for i in range(n):
            mask = np.ones(n_points, dtype=bool)
            if i < gaps:
                start = rng.integers(0, n_points - gap_len + 1)
                mask[start:start + gap_len] = False
            samples.append(FunctionalSample((t,), np.where(mask, obs[i], np.nan), mask))
        covs.append(samples)
    if family == "gaussian":
        y = eta + 0.1 * rng.normal(size=n)
    else:
        y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-2.0 * (eta - eta.mean())))).astype(float)
    return Dataset(y, covs)


def surface_dataset(rng, n=30, shape=(12, 12), noise=0.05, gaps=0):
    t1 = np.linspace(0.0, 1.0, shape[0])
    t2 = np.linspace(0.0, 1.0, shape[1])
    a1 = rng.normal(size=n)
    a2 = rng.normal(size=n)
    clean = (a1[:, None, None] * np.sin(2 * np.pi * t1)[None, :, None]
             + a2[:, None, None] * np.cos(2 * np.pi * t2)[None, None, :] + 1.0)
    obs = clean + noise * rng.normal(size=clean.shape)
    samples = []
    for i in range(n):
        mask = np.ones(shape, dtype=bool)
        if i < gaps:
            mask[2:5, 3:7] = False
        samples.append(FunctionalSample((t1, t2), np.where(mask, obs[i], np.nan), mask))
    y = 0.5 * a1 - 0.3 * a2 + 0.05 * rng.normal(size=n)
    return Dataset(y, [samples])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def basis_10():
    return make_basis(0.0, 1.0, 10)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
