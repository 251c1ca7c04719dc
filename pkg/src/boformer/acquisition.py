"""Rule-based acquisition baselines: MC-EHVI, scalarized UCB, random search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import PosteriorSummary
from .pareto import ParetoArchive, improvement_batch

DEFAULT_MC_SAMPLES = 128


@dataclass(frozen=True)
class AcquisitionScore:
    scores: np.ndarray

    @property
    def argmax(self) -> int:
        # np.argmax returns the first maximizer: lowest-index tie-break
        return int(np.argmax(self.scores))

    def __len__(self) -> int:
        return self.scores.shape[0]


def ehvi_mc(post: PosteriorSummary, archive: ParetoArchive, n_samples: int = DEFAULT_MC_SAMPLES,
            rng: np.random.Generator | None = None, chunk: int = 64) -> AcquisitionScore:
    """Monte-Carlo expected hypervolume improvement for every query point.

    Draws come from the diagonal Gaussian posterior and the improvement of
    each draw is exact against the archive. All candidates share the same
    standard-normal draws (common random numbers), which keeps the ranking
    between candidates far less noisy than independent streams would.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    K, M = post.mean.shape
    z = np.broadcast_to(rng.standard_normal((1, n_samples, K)), (M, n_samples, K))
    mu = post.mean.T[:, None, :]
    sd = post.std.T[:, None, :]
    y = mu + sd * z
    scores = np.empty(M)
    for s in range(0, M, chunk):
        block = y[s:s + chunk].reshape(-1, K)
        gain = improvement_batch(archive.points, archive.ref, block)
        scores[s:s + chunk] = gain.reshape(-1, n_samples).mean(axis=1)
    return AcquisitionScore(scores)


def ehvi_mc_stderr(post: PosteriorSummary, archive: ParetoArchive, n_samples: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`ehvi_mc` but also returns the per-candidate standard error."""
    K, M = post.mean.shape
    means = np.empty(M)
    errs = np.empty(M)
    for j in range(M):
        y = post.mean[:, j] + post.std[:, j] * rng.standard_normal((n_samples, K))
        gain = improvement_batch(archive.points, archive.ref, y)
        means[j] = gain.mean()
        errs[j] = gain.std(ddof=1) / np.sqrt(n_samples) if n_samples > 1 else 0.0
    return means, errs


def random_simplex_weights(K: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(K))


def scalarized_ucb(post: PosteriorSummary, weights, beta: float = 1.0) -> AcquisitionScore:
    """Tchebycheff scalarization of per-objective UCB values.

    Each objective is anchored at the smallest posterior mean over the
    candidate set, so the score is invariant to a common shift of the means;
    objectives with zero weight are left out of the minimum.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise ValueError("weights must lie on the simplex")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    active = w > 0
    anchored = post.mean - post.mean.min(axis=1, keepdims=True) + beta * post.std
    scores = np.min(w[active, None] * anchored[active], axis=0)
    return AcquisitionScore(scores)


def random_policy(grid_size: int, rng: np.random.Generator) -> int:
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    return int(rng.integers(grid_size))


def demo_select(post: PosteriorSummary, archive: ParetoArchive, rng: np.random.Generator,
                n_samples: int = DEFAULT_MC_SAMPLES) -> int:
    """The demonstration policy: argmax of MC-EHVI."""
    return ehvi_mc(post, archive, n_samples, rng).argmax
