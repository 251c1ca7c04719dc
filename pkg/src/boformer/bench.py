"""Synthetic multi-objective black-box tasks.

Closed-form suites map the unit box onto each component's standard box and
negate the textbook function so every objective is maximized. GP suites draw
exact joint samples over the discretized grid.
"""

from __future__ import annotations

import warnings
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .gp import KernelSpec, canonical_kernel, kernel_matrix, stable_cholesky
from .pareto import ParetoArchive, hypervolume_exact, pareto_front


class ConfigError(ValueError):
    """Invalid task or suite configuration."""


@dataclass(frozen=True)
class BoxDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ConfigError("box bounds must satisfy lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @classmethod
    def unit(cls, dim: int) -> BoxDomain:
        return cls(np.zeros(dim), np.ones(dim))


# Textbook functions on their native domains (minimization form).

def ackley(x):
    x = np.atleast_2d(x)
    d = x.shape[1]
    a = -20.0 * np.exp(-0.2 * np.sqrt(np.sum(x**2, axis=1) / d))
    b = -np.exp(np.sum(np.cos(2 * np.pi * x), axis=1) / d)
    return a + b + 20.0 + np.e


def rastrigin(x):
    x = np.atleast_2d(x)
    return 10.0 * x.shape[1] + np.sum(x**2 - 10.0 * np.cos(2 * np.pi * x), axis=1)


def rosenbrock(x):
    x = np.atleast_2d(x)
    return np.sum(100.0 * (x[:, 1:] - x[:, :-1] ** 2) ** 2 + (x[:, :-1] - 1.0) ** 2, axis=1)


def branin(x):
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    b = 5.1 / (4 * np.pi**2)
    c = 5.0 / np.pi
    t = 1.0 / (8 * np.pi)
    return (x2 - b * x1**2 + c * x1 - 6.0) ** 2 + 10.0 * (1 - t) * np.cos(x1) + 10.0


def currin(x):
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], np.maximum(x[:, 1], 1e-12)
    factor = 1.0 - np.exp(-1.0 / (2.0 * x2))
    num = 2300 * x1**3 + 1900 * x1**2 + 2092 * x1 + 60
    den = 100 * x1**3 + 500 * x1**2 + 4 * x1 + 20
    return factor * num / den


def dixon_price(x):
    x = np.atleast_2d(x)
    i = np.arange(2, x.shape[1] + 1)
    return (x[:, 0] - 1.0) ** 2 + np.sum(i * (2 * x[:, 1:] ** 2 - x[:, :-1]) ** 2, axis=1)


@dataclass(frozen=True)
class Objective:
    """One closed-form objective: native function plus its standard box."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    box: BoxDomain

    def native(self, x) -> np.ndarray:
        return self.fn(np.atleast_2d(np.asarray(x, dtype=float)))

    def __call__(self, u) -> np.ndarray:
        """Negated value at unit-box points ``u`` (maximization convention)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return -self.fn(self.box.lower + u * (self.box.upper - self.box.lower))


def _objective(name: str, dim: int) -> Objective:
    table = {
        "ackley": (ackley, -32.768, 32.768),
        "rastrigin": (rastrigin, -5.12, 5.12),
        "rosenbrock": (rosenbrock, -5.0, 10.0),
        "dixon": (dixon_price, -10.0, 10.0),
    }
    if name == "branin":
        return Objective(name, branin, BoxDomain([-5.0, 0.0], [10.0, 15.0]))
    if name == "currin":
        return Objective(name, currin, BoxDomain([0.0, 0.0], [1.0, 1.0]))
    fn, lo, hi = table[name]
    return Objective(name, fn, BoxDomain(np.full(dim, lo), np.full(dim, hi)))


SUITES = {
    "AR": ("ackley", "rosenbrock"),
    "ARa": ("ackley", "rastrigin"),
    "BC": ("branin", "currin"),
    "DRa": ("dixon", "rastrigin"),
    "BCD": ("branin", "currin", "dixon"),
}
GP_SUITES = {"rbf-gp": "rbf", "matern-gp": "matern52"}


@dataclass(frozen=True)
class ObjectiveSuite:
    name: str
    K: int
    dim: int
    objectives: tuple[Objective, ...] = ()
    kernel: str | None = None

    @property
    def is_gp(self) -> bool:
        return self.kernel is not None

    @property
    def domain(self) -> BoxDomain:
        return BoxDomain.unit(self.dim)

    def values(self, grid) -> np.ndarray:
        if self.is_gp:
            raise ConfigError("GP suites are realized per task via sample_gp_task")
        return np.stack([f(grid) for f in self.objectives], axis=1)


def make_synthetic_suite(name: str, dim: int = 2, K: int = 2) -> ObjectiveSuite:
    """Named objective combination over the unit box.

    ``K`` is only consulted for the GP suites.
    """
    if name in GP_SUITES:
        if K < 2:
            raise ConfigError("need K >= 2 objectives")
        return ObjectiveSuite(name, K, dim, kernel=GP_SUITES[name])
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from {sorted(SUITES) + sorted(GP_SUITES)}")
    parts = SUITES[name]
    if any(p in ("branin", "currin") for p in parts) and dim != 2:
        raise ConfigError(f"suite {name} is defined for dim = 2 only")
    if dim < 2:
        raise ConfigError("dim must be >= 2")
    return ObjectiveSuite(name, len(parts), dim, tuple(_objective(p, dim) for p in parts))


def discretize_domain(box: BoxDomain, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` scrambled Sobol points scaled into ``box``."""
    if n < 2:
        raise ConfigError("grid needs n >= 2")
    sampler = qmc.Sobol(d=box.dim, scramble=True, seed=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two balance warning
        u = sampler.random(n)
    return box.lower + u * (box.upper - box.lower)


@dataclass(frozen=True)
class EpisodeTask:
    """A finalized, immutable optimization instance over a discrete grid.

    ``values`` are the min-max normalized noiseless objectives; ``true_values``
    additionally carry the per-episode perturbation and are what hypervolume
    and regret are measured on.
    """

    suite: ObjectiveSuite
    grid: np.ndarray
    values: np.ndarray
    noise_std: float
    perturb_scale: float
    reference_point: np.ndarray
    hv_star: float
    lo: np.ndarray
    hi: np.ndarray
    lengthscales: tuple[float, ...] | None = None
    seed: int | None = None
    true_values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "true_values", (1.0 - self.perturb_scale) * self.values)

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def N(self) -> int:
        return self.grid.shape[0]


def evaluate(task: EpisodeTask, x: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Noisy observation of the perturbed normalized objectives at grid index ``x``."""
    if not 0 <= int(x) < task.N:
        raise IndexError(f"grid index {x} outside [0, {task.N})")
    y = task.true_values[int(x)].copy()
    if task.noise_std > 0:
        if rng is None:
            raise ValueError("a noise generator is required when noise_std > 0")
        y = y + task.noise_std * rng.standard_normal(task.K)
    return y


def finalize_task(suite: ObjectiveSuite, grid, noise_std: float, rng: np.random.Generator,
                  raw_values=None, perturb_max: float = 0.1, kappa: float | None = None,
                  lengthscales=None, seed: int | None = None) -> EpisodeTask:
    """Normalize objectives over the grid, draw the perturbation, compute HV*."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ConfigError("grid is empty")
    raw = suite.values(grid) if raw_values is None else np.asarray(raw_values, dtype=float)
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    if np.any(hi - lo <= 0):
        raise ConfigError("degenerate objective: constant over the grid")
    values = (raw - lo) / (hi - lo)
    if kappa is None:
        kappa = float(rng.uniform(0.0, perturb_max)) if perturb_max > 0 else 0.0
    if not 0.0 <= kappa <= 0.1 + 1e-12:
        raise ConfigError("perturbation scale must lie in [0, 0.1]")
    ref = np.zeros(raw.shape[1])
    true_values = (1.0 - kappa) * values
    hv_star = hypervolume_exact(pareto_front(true_values), ref) if raw.shape[1] <= 3 else _hv_push(true_values, ref)
    return EpisodeTask(suite, grid, values, float(noise_std), float(kappa), ref, float(hv_star),
                       lo, hi, None if lengthscales is None else tuple(lengthscales), seed)


def _hv_push(values, ref) -> float:
    archive = ParetoArchive(ref)
    for v in values:
        archive.push(v)
    return archive.hv


def sample_gp_task(kernel: str, lengthscale_low: float, lengthscale_high: float, dim: int, K: int,
                   rng: np.random.Generator, grid_n: int = 256, noise_std: float = 0.1,
                   perturb_max: float = 0.1, kappa: float | None = None,
                   seed: int | None = None) -> EpisodeTask:
    """Draw K independent GP sample functions jointly over a Sobol grid."""
    if not 0 < lengthscale_low <= lengthscale_high:
        raise ConfigError("lengthscale bounds must satisfy 0 < low <= high")
    kind = canonical_kernel(kernel)
    suite = ObjectiveSuite(f"{kind}-gp", K, dim, kernel=kind)
    grid = discretize_domain(BoxDomain.unit(dim), grid_n, rng)
    ells = rng.uniform(lengthscale_low, lengthscale_high, size=K)
    raw = np.empty((grid_n, K))
    for i, ell in enumerate(ells):
        cov = kernel_matrix(KernelSpec(kind, float(ell), 1.0), grid, grid)
        chol, _ = stable_cholesky(cov, ladder=(1e-8, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2))
        raw[:, i] = chol @ rng.standard_normal(grid_n)
    return finalize_task(suite, grid, noise_std, rng, raw_values=raw, perturb_max=perturb_max,
                         kappa=kappa, lengthscales=ells, seed=seed)


@dataclass
class TaskConfig:
    suite: str = "rbf-gp"
    dim: int = 2
    K: int = 2
    grid_n: int = 256
    noise_std: float = 0.1
    perturb_max: float = 0.1
    lengthscale_low: float = 0.1
    lengthscale_high: float = 0.4


def make_task(cfg: TaskConfig, seed: int) -> EpisodeTask:
    """Build the task for ``seed``; grid, GP draw, and perturbation all follow from it."""
    rng = np.random.default_rng(seed)
    suite = make_synthetic_suite(cfg.suite, cfg.dim, cfg.K)
    if suite.is_gp:
        return sample_gp_task(suite.kernel, cfg.lengthscale_low, cfg.lengthscale_high, cfg.dim,
                              cfg.K, rng, cfg.grid_n, cfg.noise_std, cfg.perturb_max, seed=seed)
    grid = discretize_domain(suite.domain, cfg.grid_n, rng)
    return finalize_task(suite, grid, cfg.noise_std, rng, perturb_max=cfg.perturb_max, seed=seed)
