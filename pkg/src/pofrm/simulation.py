"""Seeded data generators for the benchmark studies and their missingness patterns.

Every replicate draws from its own stream ``default_rng(SeedSequence([seed, rep]))``,
so results do not depend on the order or parallelism of replicate runs.
Normal parameters are (mean, standard deviation).
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import simpson
from scipy.special import expit

from .errors import GapPlacementError, InsufficientCompletenessError, InvalidArgumentError, PofrmError
from .metrics import ReplicateReport, auc, imse, misclassification, rmse
from .model import Dataset, PofrSpec, eval_beta, fit
from .smoothing import FunctionalSample

ALPHA = 0.5
R2_TARGET = 0.95
DENSE_1D = 1001
DENSE_2D = 201
MAX_RECT_DRAWS = 100

STUDY1_GRID = 100
STUDY2_GRID = (20, 20)
PCT_GRID = {1: (0.2, 0.4, 0.6, 0.8), 2: (0.2, 0.4, 0.6)}
GAP_GRID = (0.05, 0.10, 0.15)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``generator`` selects the covariate/response law: ``"study1"``,
    ``"study2"`` or ``"two_group"`` (surfaces whose binary label is the group).
    """

    study: int = 1
    family: str = "gaussian"
    pct_incomplete: float = 0.2
    gap_size: float = 0.05
    n_subjects: int = 100
    replicates: int = 100
    seed: int = 0
    grid_size: tuple | None = None
    generator: str | None = None
    group_means: tuple = ((1.5, 1.2), (-1.2, -1.0))
    group_sd: float = 0.3
    noise_scale: float = 0.5
    r2: float = R2_TARGET

    def __post_init__(self):
        if self.study not in (1, 2):
            raise InvalidArgumentError(f"study must be 1 or 2, got {self.study}")
        if self.family not in ("gaussian", "binomial"):
            raise InvalidArgumentError(f"unknown family {self.family!r}")
        if not (0 <= self.pct_incomplete <= 1) or not (0 <= self.gap_size < 1):
            raise InvalidArgumentError("pct_incomplete must lie in [0, 1] and gap_size in [0, 1)")
        if int(self.n_subjects) != self.n_subjects or self.n_subjects < 2:
            raise InvalidArgumentError("n_subjects must be an integer >= 2")
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise InvalidArgumentError("replicates must be a positive integer")
        if self.noise_scale < 0 or not (0 < self.r2 <= 1):
            raise InvalidArgumentError("noise_scale must be >= 0 and r2 in (0, 1]")
        if self.generator is None:
            object.__setattr__(self, "generator", f"study{self.study}")
        if self.generator not in ("study1", "study2", "two_group"):
            raise InvalidArgumentError(f"unknown generator {self.generator!r}")
        if (self.generator == "study1") != (self.study == 1):
            raise InvalidArgumentError(f"generator {self.generator!r} does not match study {self.study}")
        if self.grid_size is None:
            object.__setattr__(self, "grid_size", (STUDY1_GRID,) if self.study == 1 else STUDY2_GRID)
        else:
            object.__setattr__(self, "grid_size", tuple(int(g) for g in np.atleast_1d(self.grid_size)))

    @property
    def scenario_id(self) -> str:
        head = f"study{self.study}" if self.generator == f"study{self.study}" else f"study{self.study}-{self.generator}"
        return f"{head}-{self.family}-pct{self.pct_incomplete:g}-gap{self.gap_size:g}"

    def to_dict(self) -> dict:
        return {
            "study": self.study, "family": self.family, "pct_incomplete": self.pct_incomplete,
            "gap_size": self.gap_size, "n_subjects": self.n_subjects, "replicates": self.replicates,
            "seed": self.seed, "grid_size": list(self.grid_size), "generator": self.generator,
            "group_means": [list(g) for g in self.group_means], "group_sd": self.group_sd,
            "noise_scale": self.noise_scale, "r2": self.r2,
            "normal_parameterization": "mean, standard deviation",
        }


@dataclass(frozen=True, eq=False)
class GeneratedDataset:
    """A simulated replicate.

    ``true_betas[j]`` is ``(grids, values)`` on a dense grid; ``noise_sd[j]``
    holds the per-subject measurement-noise standard deviations of covariate ``j``.
    """

    dataset: Dataset
    true_betas: list
    eta: np.ndarray
    noise_sd: list
    config: ScenarioConfig
    rep_index: int
    groups: np.ndarray | None = None
    complete: Dataset | None = field(default=None, repr=False)


def replicate_rng(seed: int, rep_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep_index)]))


def beta1(t):
    return 0.05 * np.sin(np.pi * np.asarray(t, dtype=float) / 5.0)


def beta2(t):
    return 0.05 * (np.asarray(t, dtype=float) / 2.5) ** 2


def beta_2d(t1, t2):
    t1, t2 = np.meshgrid(np.asarray(t1, dtype=float), np.asarray(t2, dtype=float), indexing="ij")
    return np.sin(2 * np.pi * t1) * np.cos(2 * np.pi * t2) + 0.8 * (t1 - 0.5) * (t2 - 0.5)


def _study1_curves(rng, n):
    """Coefficient draws and noise-free evaluators of the two curve covariates."""
    k = np.arange(1, 11)
    u1 = rng.normal(0.0, 5.0, n)
    u2 = rng.normal(0.0, 0.2, n)
    v1 = rng.normal(0.0, 1.0, (n, 10))
    v2 = rng.normal(0.0, 1.0, (n, 10))
    w1 = rng.normal(2.0, 3.0, n)
    w2 = rng.normal(-0.1, 0.15, n)
    z1 = rng.normal(-0.5, 0.8, (n, 10))
    z2 = rng.normal(0.5, 0.8, (n, 10))

    def x1(t):
        arg = 2 * np.pi * np.outer(t, k) / 10.0
        return u1[:, None] + u2[:, None] * t + v1 @ np.sin(arg).T + v2 @ np.cos(arg).T

    def x2(t):
        arg = 2 * np.pi * np.outer(t, k + 0.5) / 10.0
        return (w1[:, None] + w2[:, None] * t + z1 @ np.sin(arg + np.pi / 4).T
                + z2 @ np.cos(arg - np.pi / 4).T)

    return x1, x2


def _responses(rng, eta, family, r2=R2_TARGET):
    if family == "gaussian":
        sd = np.sqrt(np.var(eta) * (1.0 - r2) / r2)
        return eta + rng.normal(0.0, 1.0, eta.size) * sd
    return (rng.uniform(size=eta.size) < expit(eta)).astype(float)


def _noisy(rng, clean, axes, scale=0.5):
    sd = scale * np.sqrt(np.var(clean, axis=axes))
    shape = (-1,) + (1,) * len(axes)
    return clean + rng.normal(size=clean.shape) * sd.reshape(shape), sd


def gen_study1(config: ScenarioConfig, rep_index: int) -> GeneratedDataset:
    """Two curve covariates on ``[0, 1]`` with a Gaussian or binary response."""
    if config.generator != "study1":
        raise InvalidArgumentError("gen_study1 needs a study-1 configuration")
    rng = replicate_rng(config.seed, rep_index)
    n = config.n_subjects
    t = np.linspace(0.0, 1.0, config.grid_size[0])
    x1, x2 = _study1_curves(rng, n)
    c1, c2 = x1(t), x2(t)
    obs1, sd1 = _noisy(rng, c1, (1,), config.noise_scale)
    obs2, sd2 = _noisy(rng, c2, (1,), config.noise_scale)

    td = np.linspace(0.0, 1.0, DENSE_1D)
    eta = (ALPHA + simpson(x1(td) * beta1(td), x=td, axis=1)
           + simpson(x2(td) * beta2(td), x=td, axis=1))
    y = _responses(rng, eta, config.family, config.r2)

    complete = Dataset(y, [[FunctionalSample.from_array(row, (t,)) for row in obs]
                           for obs in (obs1, obs2)])
    gapped = apply_gaps(complete, config.pct_incomplete, config.gap_size, rng)
    return GeneratedDataset(gapped, [((td,), beta1(td)), ((td,), beta2(td))], eta,
                            [sd1, sd2], config, rep_index, complete=complete)


def _surface_coefficients(rng, config: ScenarioConfig):
    n = config.n_subjects
    n1 = int(round(0.5 * n))
    groups = np.r_[np.zeros(n1, dtype=int), np.ones(n - n1, dtype=int)]
    means = np.asarray(config.group_means, dtype=float)[groups]
    a1 = rng.normal(means[:, 0], config.group_sd)
    a2 = rng.normal(means[:, 1], config.group_sd)
    return groups, a1, a2


def _surfaces(a1, a2, t1, t2):
    s1 = np.sin(2 * np.pi * t1)[None, :, None]
    c2 = np.cos(2 * np.pi * t2)[None, None, :]
    inter = 0.5 * np.outer(t1 - 0.5, t2 - 0.5)[None]
    return a1[:, None, None] * s1 + a2[:, None, None] * c2 + inter + 2.0


def gen_study2(config: ScenarioConfig, rep_index: int) -> GeneratedDataset:
    """One surface covariate on ``[0, 1]^2`` drawn from a two-group design.

    With ``generator="two_group"`` the binary response is the group label
    itself instead of a draw from the linear predictor.
    """
    if config.generator not in ("study2", "two_group"):
        raise InvalidArgumentError("gen_study2 needs a study-2 configuration")
    rng = replicate_rng(config.seed, rep_index)
    n1, n2 = config.grid_size
    t1, t2 = np.linspace(0.0, 1.0, n1), np.linspace(0.0, 1.0, n2)
    groups, a1, a2 = _surface_coefficients(rng, config)
    clean = _surfaces(a1, a2, t1, t2)
    obs, sd = _noisy(rng, clean, (1, 2), config.noise_scale)

    td = np.linspace(0.0, 1.0, DENSE_2D)
    bd = beta_2d(td, td)
    dense = _surfaces(a1, a2, td, td) * bd[None]
    eta = ALPHA + simpson(simpson(dense, x=td, axis=2), x=td, axis=1)
    if config.generator == "two_group":
        y = (groups == 0).astype(float)
    else:
        y = _responses(rng, eta, config.family, config.r2)

    complete = Dataset(y, [[FunctionalSample.from_array(s, (t1, t2)) for s in obs]])
    gapped = apply_gaps(complete, config.pct_incomplete, config.gap_size, rng)
    return GeneratedDataset(gapped, [((td, td), bd)], eta, [sd], config, rep_index,
                            groups=groups, complete=complete)


def generate(config: ScenarioConfig, rep_index: int) -> GeneratedDataset:
    return gen_study1(config, rep_index) if config.study == 1 else gen_study2(config, rep_index)


def _gap_1d(n_points, gap_size, rng):
    length = int(round(gap_size * n_points))
    mask = np.ones(n_points, dtype=bool)
    if length:
        start = int(rng.integers(0, n_points - length + 1))
        mask[start:start + length] = False
    return mask


def _gap_2d(shape, gap_size, rng):
    n1, n2 = shape
    area = int(round(gap_size * n1 * n2))
    mask = np.ones(shape, dtype=bool)
    if area == 0:
        return mask
    for _ in range(MAX_RECT_DRAWS):
        ratio = rng.uniform(0.5, 2.0)
        h = max(int(round(np.sqrt(area * ratio))), 1)
        if area % h:
            continue
        w = area // h
        if h > n1 or w > n2 or not (0.5 <= h / w <= 2.0):
            continue
        r0 = int(rng.integers(0, n1 - h + 1))
        c0 = int(rng.integers(0, n2 - w + 1))
        mask[r0:r0 + h, c0:c0 + w] = False
        return mask
    raise GapPlacementError(
        f"no {area}-cell rectangle with aspect ratio in [0.5, 2] fits a {n1}x{n2} grid "
        f"after {MAX_RECT_DRAWS} draws")


def apply_gaps(dataset: Dataset, pct_incomplete: float, gap_size: float, rng) -> Dataset:
    """Blank one contiguous region in ``round(pct_incomplete * N)`` subjects per covariate.

    Subjects are chosen independently for each covariate. Curves lose a run of
    ``round(gap_size * n)`` points; surfaces lose an axis-aligned rectangle of
    exactly ``round(gap_size * n1 * n2)`` cells. Blanked values become NaN.
    """
    if not (0 <= pct_incomplete <= 1) or not (0 <= gap_size < 1):
        raise InvalidArgumentError("pct_incomplete must lie in [0, 1] and gap_size in [0, 1)")
    n = dataset.n_subjects
    n_gapped = int(round(pct_incomplete * n))
    out = []
    for samples in dataset.covariates:
        chosen = np.sort(rng.choice(n, size=n_gapped, replace=False)) if n_gapped else []
        new = list(samples)
        for i in chosen:
            s = samples[i]
            if s.dim == 1:
                gap = _gap_1d(s.values.size, gap_size, rng)
            else:
                gap = _gap_2d(s.values.shape, gap_size, rng)
            mask = s.mask & gap
            values = np.where(mask, s.values, np.nan)
            new[i] = FunctionalSample(s.grids, values, mask)
        out.append(new)
    return Dataset(dataset.y.copy(), out)


def scenario_grid(study: int, family: str, **kwargs) -> list[ScenarioConfig]:
    """All (pct, gap) combinations used for one study and family."""
    return [ScenarioConfig(study=study, family=family, pct_incomplete=p, gap_size=g, **kwargs)
            for p in PCT_GRID[study] for g in GAP_GRID]


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(config, seed=seed)


METHODS = ("pofrm", "pofrm_i")


def default_spec(config: ScenarioConfig) -> PofrSpec:
    return PofrSpec.from_dims([1, 1] if config.study == 1 else [2], family=config.family)


def _metrics(result, generated: GeneratedDataset) -> dict:
    out = {}
    for j, (grids, truth) in enumerate(generated.true_betas):
        est = eval_beta(result, j, grids if len(grids) == 2 else grids[0])
        out[f"imse_beta{j + 1}"] = imse(truth, est, grids if len(grids) == 2 else grids[0])
    y = generated.dataset.y
    if result.family == "gaussian":
        out["rmse"] = rmse(y, result.mu)
    else:
        out["auc"] = auc(y, result.mu) if 0 < y.sum() < y.size else float("nan")
        pct, cm = misclassification(y, result.mu)
        out["misclassification"] = pct
        out.update(tn=float(cm[0, 0]), fn=float(cm[0, 1]), fp=float(cm[1, 0]), tp=float(cm[1, 1]))
    return out


def run_replicate(config: ScenarioConfig, rep_index: int, methods=METHODS,
                  spec: PofrSpec | None = None) -> list[ReplicateReport]:
    """Generate one replicate and fit every requested method to the same data."""
    from .baseline import fit_pofrm_i  # deferred: baseline imports model as well

    generated = generate(config, rep_index)
    spec = spec or default_spec(config)
    reports = []
    for method in methods:
        rep = ReplicateReport(config.scenario_id, method, rep_index)
        try:
            if method == "pofrm":
                t0 = time.perf_counter()
                result = fit(generated.dataset, spec)
                rep.times = {k: result.timing[k] for k in ("smoothing", "psi", "fit")}
                rep.times["total"] = time.perf_counter() - t0
            elif method == "pofrm_i":
                result, rep.times = fit_pofrm_i(generated.dataset, spec)
            else:
                raise InvalidArgumentError(f"unknown method {method!r}")
            rep.values = _metrics(result, generated)
        except InsufficientCompletenessError as exc:
            rep.status, rep.message = "infeasible", str(exc)
        except PofrmError as exc:
            rep.status, rep.message = "error", f"{type(exc).__name__}: {exc}"
        reports.append(rep)
    return reports


def _run_one(args):
    config, rep, methods, spec = args
    return run_replicate(config, rep, methods, spec)


def run_scenario(config: ScenarioConfig, methods=METHODS, jobs: int = 1,
                 spec: PofrSpec | None = None) -> list[ReplicateReport]:
    """All replicates of a scenario, in replicate order regardless of ``jobs``."""
    tasks = [(config, r, tuple(methods), spec) for r in range(config.replicates)]
    if jobs <= 1:
        chunks = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_one, tasks))
    return [r for chunk in chunks for r in chunk]
