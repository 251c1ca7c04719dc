"""One optimization episode: surrogate updates, observations, archive, rewards."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bench import EpisodeTask, evaluate
from .gp import PosteriorSummary, Surrogate, SurrogateConfig
from .pareto import REWARD_CAP, REWARD_EPS, ParetoArchive, normalized_reward

# Surrogate used while collecting training trajectories: RBF at the generating lengthscale.
TRAIN_SURROGATE = SurrogateConfig(kernel="rbf", noise_variance=0.01)
# Deployment surrogate: Matern-5/2 with the lengthscale refit by marginal likelihood.
EVAL_SURROGATE = SurrogateConfig(kernel="matern52", noise_variance=0.01, refit_every=5)


@dataclass(frozen=True)
class StepResult:
    index: int
    observed: np.ndarray
    raw: float
    reward: float
    hv: float


class EpisodeEnv:
    """Steps 1..T over a finalized task.

    The surrogate sees noisy observations; hypervolume and rewards are measured
    on the task's noiseless (perturbed) values.
    """

    def __init__(self, task: EpisodeTask, T: int, surrogate: SurrogateConfig,
                 noise_rng: np.random.Generator, use_task_lengthscales: bool = False,
                 reward_eps: float = REWARD_EPS, reward_cap: float = REWARD_CAP):
        if T < 1:
            raise ValueError("horizon T must be >= 1")
        self.task = task
        self.T = T
        self.rng = noise_rng
        ells = task.lengthscales if use_task_lengthscales else None
        self.surrogate = Surrogate(surrogate, task.K, ells)
        self.archive = ParetoArchive(task.reference_point)
        # what a policy may legitimately see: the front of noisy observations
        self.observed_archive = ParetoArchive(task.reference_point)
        self.t = 1
        self.reward_eps = reward_eps
        self.reward_cap = reward_cap
        self._post: PosteriorSummary | None = None

    @property
    def done(self) -> bool:
        return self.t > self.T

    def posterior(self) -> PosteriorSummary:
        if self._post is None:
            self._post = self.surrogate.summary(self.task.grid)
        return self._post

    def frames(self) -> np.ndarray:
        """Observation frames of every grid point at the current step."""
        return self.posterior().features(self.t, self.T)

    def step(self, index: int) -> StepResult:
        if self.done:
            raise RuntimeError("episode already finished")
        y = evaluate(self.task, index, self.rng)
        raw = self.archive.push(self.task.true_values[index])
        reward = normalized_reward(raw, self.archive.hv, self.task.hv_star, self.reward_eps, self.reward_cap)
        self.observed_archive.push(y)
        self.surrogate.add(self.task.grid[index], y)
        self._post = None
        self.t += 1
        return StepResult(int(index), y, raw, reward, self.archive.hv)
