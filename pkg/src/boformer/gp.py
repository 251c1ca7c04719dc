"""Independent per-objective Gaussian process surrogates."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize_scalar

log = logging.getLogger(__name__)

KERNELS = ("rbf", "matern52")
JITTER_LADDER = (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
SQRT5 = np.sqrt(5.0)


class NumericalError(RuntimeError):
    """Covariance factorization failed even at the largest jitter."""


def canonical_kernel(kind: str) -> str:
    k = kind.lower().replace("-", "").replace("_", "").replace("/", "").replace("é", "e")
    if k in ("rbf", "se", "sqexp"):
        return "rbf"
    if k in ("matern52", "matern"):
        return "matern52"
    raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KERNELS}")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    lengthscale: float = 0.2
    signal_variance: float = 1.0
    noise_variance: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kernel(self.kind))
        if not self.lengthscale > 0 or not self.signal_variance > 0:
            raise ValueError("lengthscale and signal_variance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_from_distance(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if spec.kind == "rbf":
        return spec.signal_variance * np.exp(-0.5 * (r / spec.lengthscale) ** 2)
    s = SQRT5 * r / spec.lengthscale
    return spec.signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if spec.kind == "rbf":
        return spec.signal_variance * np.exp(-0.5 * _sqdist(a, b) / spec.lengthscale**2)
    return kernel_from_distance(spec, np.sqrt(_sqdist(a, b)))


def kernel_eval(spec: KernelSpec, a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("points must share dimension")
    return float(kernel_from_distance(spec, np.sqrt(np.sum((a - b) ** 2))))


def stable_cholesky(mat: np.ndarray, ladder=JITTER_LADDER) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``mat + jitter*I`` with the smallest working jitter."""
    eye = np.eye(mat.shape[0])
    for jitter in ladder:
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"Cholesky failed up to jitter {ladder[-1]:g} (n={mat.shape[0]})")


@dataclass(frozen=True)
class GPModel:
    spec: KernelSpec
    inputs: np.ndarray
    targets: np.ndarray
    factor: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def fit(inputs, targets, spec: KernelSpec) -> GPModel:
    """Factorize the regularized Gram matrix and solve for the weights."""
    targets = np.asarray(targets, dtype=float).ravel()
    n = targets.shape[0]
    if n == 0:
        dim = np.asarray(inputs).shape[-1] if np.asarray(inputs).ndim == 2 else 0
        return GPModel(spec, np.empty((0, dim)), targets, np.empty((0, 0)), np.empty(0))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] != n:
        raise ValueError("inputs and targets differ in length")
    gram = kernel_matrix(spec, inputs, inputs) + spec.noise_variance * np.eye(n)
    factor, jitter = stable_cholesky(gram)
    alpha = cho_solve((factor, True), targets)
    return GPModel(spec, inputs, targets, factor, alpha, jitter)


def posterior(model: GPModel, queries) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and marginal standard deviation at ``queries``."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    s2 = model.spec.signal_variance
    if model.n == 0:
        m = queries.shape[0]
        return np.zeros(m), np.full(m, np.sqrt(s2))
    kq = kernel_matrix(model.spec, queries, model.inputs)
    mean = kq @ model.alpha
    v = solve_triangular(model.factor, kq.T, lower=True)
    var = s2 - np.einsum("ij,ij->j", v, v)
    return mean, np.sqrt(np.clip(var, 0.0, None))


def log_marginal_likelihood(model: GPModel) -> float:
    n = model.n
    if n == 0:
        return 0.0
    return float(-0.5 * model.targets @ model.alpha
                 - np.sum(np.log(np.diag(model.factor)))
                 - 0.5 * n * np.log(2 * np.pi))


def _lml_at(inputs, targets, spec, lengthscale) -> float:
    try:
        return log_marginal_likelihood(fit(inputs, targets, replace(spec, lengthscale=lengthscale)))
    except NumericalError:
        return -np.inf


def fit_lengthscale_mll(inputs, targets, kind: str, bounds=(0.05, 2.0),
                        noise_variance: float = 0.0, n_grid: int = 32,
                        refine_iters: int = 40, min_signal_variance: float = 1e-6) -> KernelSpec:
    """Maximize the log marginal likelihood over the lengthscale.

    A log-spaced grid locates the basin; bounded Brent search on log(l)
    between the grid neighbours of the best candidate refines it. The signal
    variance is the sample variance of the targets.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0 < lo <= hi:
        raise ValueError("lengthscale bounds must satisfy 0 < low <= high")
    targets = np.asarray(targets, dtype=float).ravel()
    s2 = max(float(np.var(targets)), min_signal_variance)
    spec = KernelSpec(kind, lengthscale=lo, signal_variance=s2, noise_variance=noise_variance)
    if lo == hi:
        return spec
    grid = np.exp(np.linspace(np.log(lo), np.log(hi), n_grid))
    values = np.array([_lml_at(inputs, targets, spec, ell) for ell in grid])
    if not np.any(np.isfinite(values)):
        mid = float(np.sqrt(lo * hi))
        warnings.warn("marginal likelihood non-finite on the whole grid; using mid-bound lengthscale",
                      RuntimeWarning, stacklevel=2)
        return replace(spec, lengthscale=mid)
    best = int(np.nanargmax(np.where(np.isfinite(values), values, -np.inf)))
    a = np.log(grid[max(best - 1, 0)])
    b = np.log(grid[min(best + 1, n_grid - 1)])
    if a < b:
        res = minimize_scalar(lambda z: -_lml_at(inputs, targets, spec, float(np.exp(z))), bounds=(a, b),
                              method="bounded", options={"xatol": 1e-6, "maxiter": refine_iters})
        if np.isfinite(res.fun) and -res.fun >= values[best]:
            return replace(spec, lengthscale=float(np.exp(res.x)))
    ell = float(grid[best])
    return replace(spec, lengthscale=ell)


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-objective posterior at a set of query points.

    ``mean`` and ``std`` have shape (K, M); ``best`` has shape (K,).
    """

    mean: np.ndarray
    std: np.ndarray
    best: np.ndarray

    @property
    def K(self) -> int:
        return self.mean.shape[0]

    @property
    def M(self) -> int:
        return self.mean.shape[1]

    def features(self, t: int, T: int) -> np.ndarray:
        """Observation frames ``[mu_1..K, sigma_1..K, best_1..K, t/T]`` per point."""
        m = self.M
        return np.concatenate(
            [self.mean.T, self.std.T, np.broadcast_to(self.best, (m, self.K)),
             np.full((m, 1), t / T)], axis=1)


@dataclass
class SurrogateConfig:
    """How the per-objective GPs are configured during an episode.

    ``lengthscale`` fixes the kernel lengthscale (training-time surrogate);
    ``None`` means fit it by marginal likelihood every ``refit_every`` steps.
    """

    kernel: str = "matern52"
    noise_variance: float = 0.01
    lengthscale: float | None = None
    lengthscale_bounds: tuple[float, float] = (0.05, 2.0)
    refit_every: int = 5
    prior_variance: float = 0.05
    min_signal_variance: float = 1e-3


class Surrogate:
    """Tracks observations for K objectives and produces posterior summaries.

    Targets are centered on their observed mean before fitting the zero-mean
    GP, and the running best is the max over noisy observations.
    """

    def __init__(self, cfg: SurrogateConfig, K: int, lengthscales=None):
        self.cfg = cfg
        self.K = K
        self.X: list[np.ndarray] = []
        self.Y: list[np.ndarray] = []
        self._fixed = None if lengthscales is None else [float(v) for v in lengthscales]
        self._fitted: list[KernelSpec] | None = None
        self._since_fit = 0

    def add(self, x, y) -> None:
        self.X.append(np.asarray(x, dtype=float))
        self.Y.append(np.asarray(y, dtype=float))

    @property
    def n(self) -> int:
        return len(self.Y)

    def best(self) -> np.ndarray:
        if not self.Y:
            return np.zeros(self.K)
        return np.max(np.vstack(self.Y), axis=0)

    def _lengthscales(self, X, Yc) -> list[float]:
        cfg = self.cfg
        if self._fixed is not None:
            return self._fixed
        if cfg.lengthscale is not None:
            return [cfg.lengthscale] * self.K
        if len(Yc) < 2:
            lo, hi = cfg.lengthscale_bounds
            return [float(np.sqrt(lo * hi))] * self.K
        if self._fitted is None or self._since_fit >= cfg.refit_every:
            self._fitted = [
                fit_lengthscale_mll(X, Yc[:, i], cfg.kernel, cfg.lengthscale_bounds,
                                    cfg.noise_variance, min_signal_variance=cfg.min_signal_variance)
                for i in range(self.K)]
            self._since_fit = 0
        self._since_fit += 1
        return [s.lengthscale for s in self._fitted]

    def summary(self, queries) -> PosteriorSummary:
        cfg = self.cfg
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        m = queries.shape[0]
        X = np.vstack(self.X) if self.X else np.empty((0, queries.shape[1]))
        Y = np.vstack(self.Y) if self.Y else np.empty((0, self.K))
        offset = Y.mean(axis=0) if len(Y) else np.zeros(self.K)
        Yc = Y - offset
        ells = self._lengthscales(X, Yc)
        mean = np.empty((self.K, m))
        std = np.empty((self.K, m))
        for i in range(self.K):
            y = Yc[:, i]
            s2 = max(float(np.var(y)), cfg.min_signal_variance) if len(y) >= 2 else cfg.prior_variance
            model = fit(X, y, KernelSpec(cfg.kernel, ells[i], s2, cfg.noise_variance))
            mu, sd = posterior(model, queries)
            mean[i] = mu + offset[i]
            std[i] = sd
        return PosteriorSummary(mean, std, self.best())
