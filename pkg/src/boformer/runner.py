"""Deployment loop, evaluation harness, performance profiles.

Every policy answers one question per step: which grid index to evaluate
next, given the episode environment. Episodes of different policies share
task and observation-noise randomness (paired seeds).
"""

from __future__ import annotations

import time
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .acquisition import DEFAULT_MC_SAMPLES, ehvi_mc, random_policy, random_simplex_weights, scalarized_ucb
from .bench import BoxDomain, ConfigError, EpisodeTask, ObjectiveSuite, TaskConfig, make_task
from .env import EVAL_SURROGATE, EpisodeEnv
from .gp import SurrogateConfig
from .model import History, QParams, forward_candidates
from .pareto import hypervolume_exact, pareto_front
from .trainer import Trajectory, derive_seed


class Policy:
    """Base class: ``reset`` at the start of an episode, ``select`` each step."""

    name = "policy"
    K: int | None = None

    def reset(self, task: EpisodeTask, T: int, rng: np.random.Generator) -> None:
        self.rng = rng

    def select(self, env: EpisodeEnv) -> int:
        raise NotImplementedError

    def observe(self, index: int, reward: float) -> None:
        pass


class RandomPolicy(Policy):
    name = "random"

    def select(self, env):
        return random_policy(env.task.N, self.rng)


class EHVIPolicy(Policy):
    name = "ehvi"

    def __init__(self, n_samples: int = DEFAULT_MC_SAMPLES):
        self.n_samples = n_samples

    def select(self, env):
        return ehvi_mc(env.posterior(), env.observed_archive, self.n_samples, self.rng).argmax


class SUCBPolicy(Policy):
    """Scalarized UCB with fresh simplex weights every step."""

    name = "sucb"

    def __init__(self, beta: float = 1.0):
        self.beta = beta

    def select(self, env):
        w = random_simplex_weights(env.task.K, self.rng)
        return scalarized_ucb(env.posterior(), w, self.beta).argmax


class BOFormerPolicy(Policy):
    """Greedy (or softmax) selection by the sequence Q-network.

    History frames carry the reward and Q value of each earlier choice,
    truncated to the last ``window - 1`` steps.
    """

    name = "boformer"

    def __init__(self, params: QParams, temperature: float = 0.0, name: str | None = None):
        self.params = params
        self.temperature = temperature
        self.K = params.config.K
        if name is not None:
            self.name = name

    def reset(self, task, T, rng):
        super().reset(task, T, rng)
        self.frames: list[np.ndarray] = []
        self.rewards: list[float] = []
        self.qs: list[float] = []
        self._pending: tuple[np.ndarray, float] | None = None

    def history(self) -> History:
        n = self.params.config.window - 1
        fd = self.params.config.feature_dim
        if n == 0 or not self.frames:
            return History.empty(fd)
        return History(np.asarray(self.frames[-n:]).reshape(-1, fd), np.asarray(self.rewards[-n:]),
                       np.asarray(self.qs[-n:]))

    def select(self, env):
        obs = env.frames()
        q = forward_candidates(self.params, self.history(), obs)
        if self.temperature > 0:
            z = (q - q.max()) / self.temperature
            p = np.exp(z) / np.exp(z).sum()
            idx = int(self.rng.choice(len(q), p=p))
        else:
            idx = int(np.argmax(q))
        self._pending = (obs[idx], float(q[idx]))
        return idx

    def observe(self, index, reward):
        frame, q = self._pending
        self.frames.append(frame)
        self.rewards.append(reward)
        self.qs.append(q)


@dataclass
class EpisodeRecord:
    policy: str
    task_seed: int | None
    indices: np.ndarray
    observed: np.ndarray
    hv: np.ndarray
    hv_star: float
    wall: np.ndarray

    @property
    def T(self) -> int:
        return len(self.hv)

    @property
    def regret(self) -> np.ndarray:
        return np.maximum(self.hv_star - self.hv, 0.0)

    @property
    def final_hv(self) -> float:
        return float(self.hv[-1])

    @property
    def normalized_final_hv(self) -> float:
        return self.final_hv / self.hv_star if self.hv_star > 0 else 1.0


def run_episode(policy: Policy, task: EpisodeTask, T: int, rng: np.random.Generator,
                noise_rng: np.random.Generator | None = None,
                surrogate: SurrogateConfig = EVAL_SURROGATE, use_task_lengthscales: bool = False) -> EpisodeRecord:
    """One deployment episode. ``noise_rng`` defaults to ``rng``; pass a
    separate stream to keep observation noise paired across policies."""
    if T < 1:
        raise ConfigError("horizon T must be >= 1")
    if policy.K is not None and policy.K != task.K:
        raise ConfigError(f"policy built for K={policy.K} but task has K={task.K}")
    env = EpisodeEnv(task, T, surrogate, rng if noise_rng is None else noise_rng, use_task_lengthscales)
    policy.reset(task, T, rng)
    idx = np.zeros(T, dtype=int)
    obs = np.zeros((T, task.K))
    hv = np.zeros(T)
    wall = np.zeros(T)
    for t in range(T):
        t0 = time.perf_counter()
        choice = policy.select(env)
        res = env.step(choice)
        policy.observe(choice, res.reward)
        idx[t], obs[t], hv[t] = choice, res.observed, res.hv
        wall[t] = time.perf_counter() - t0
    return EpisodeRecord(policy.name, task.seed, idx, obs, hv, task.hv_star, wall)


def continuous_argmax(score: Callable[[np.ndarray], np.ndarray], box: BoxDomain, n_global: int,
                      m_top: int, k_local: int, rng: np.random.Generator,
                      radius: float = 0.1) -> np.ndarray:
    """Maximize ``score`` over a box with a global Sobol grid refined locally.

    The ``m_top`` best global points each get a local grid of ``k_local``
    points: the center itself plus scrambled Sobol points in a box of side
    ``radius`` times the domain side, clipped to the domain.
    """
    if not n_global >= m_top >= 1 or k_local < 1:
        raise ValueError("need n_global >= m_top >= 1 and k_local >= 1")
    span = box.upper - box.lower
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        glob = box.lower + qmc.Sobol(box.dim, scramble=True, seed=rng).random(n_global) * span
        g = np.asarray(score(glob), dtype=float)
        top = glob[np.argsort(-g, kind="stable")[:m_top]]
        cands = [top]
        if k_local > 1:
            local = qmc.Sobol(box.dim, scramble=True, seed=rng).random(k_local - 1) - 0.5
            for c in top:
                cands.append(np.clip(c + local * radius * span, box.lower, box.upper))
    allc = np.concatenate(cands)
    s = np.asarray(score(allc), dtype=float)
    return allc[int(np.argmax(s))]


@dataclass(frozen=True)
class ProfileCurve:
    policy: str
    taus: np.ndarray
    fractions: np.ndarray


def performance_profile(records: Sequence[EpisodeRecord], taus) -> dict[str, ProfileCurve]:
    """Fraction of each policy's episodes whose normalized final hv reaches tau."""
    if not records:
        raise ValueError("no records")
    taus = np.asarray(taus, dtype=float)
    if np.any(np.diff(taus) < 0):
        raise ValueError("tau grid must be sorted ascending")
    out = {}
    for name in dict.fromkeys(r.policy for r in records):
        scores = np.array([r.normalized_final_hv for r in records if r.policy == name])
        frac = (scores[None, :] >= taus[:, None] - 1e-12).mean(axis=1)
        out[name] = ProfileCurve(name, taus, frac)
    return out


@dataclass
class Report:
    records: list[EpisodeRecord]
    taus: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 101))

    def policies(self) -> list[str]:
        return list(dict.fromkeys(r.policy for r in self.records))

    def finals(self, policy: str) -> np.ndarray:
        return np.array([r.final_hv for r in self.records if r.policy == policy])

    def summary(self) -> list[tuple[str, float, float]]:
        rows = []
        for p in self.policies():
            f = self.finals(p)
            se = f.std(ddof=1) / np.sqrt(len(f)) if len(f) > 1 else 0.0
            rows.append((p, float(f.mean()), float(se)))
        return rows

    def mean_curve(self, policy: str) -> np.ndarray:
        return np.mean([r.hv for r in self.records if r.policy == policy], axis=0)

    def profiles(self) -> dict[str, ProfileCurve]:
        return performance_profile(self.records, self.taus)


def episode_seeds(seed: int, suite_index: int, episode: int) -> tuple[int, int, int]:
    """(task, observation noise, policy) seeds of one paired episode."""
    return (derive_seed(seed, suite_index, episode, 0), derive_seed(seed, suite_index, episode, 1),
            derive_seed(seed, suite_index, episode, 2))


def evaluate_suite(policies: Sequence[Policy], suites: Sequence[str] | str, episodes: int, T: int,
                   seed: int, task_cfg: TaskConfig | None = None,
                   surrogate: SurrogateConfig = EVAL_SURROGATE) -> Report:
    """Run every policy on the same tasks and noise streams."""
    suites = [suites] if isinstance(suites, str) else list(suites)
    base = task_cfg or TaskConfig()
    records = []
    for s, name in enumerate(suites):
        cfg = replace(base, suite=name)
        for e in range(episodes):
            task_seed, noise_seed, policy_seed = episode_seeds(seed, s, e)
            task = make_task(cfg, task_seed)
            for pol in policies:
                records.append(run_episode(pol, task, T, np.random.default_rng(policy_seed),
                                           np.random.default_rng(noise_seed), surrogate))
    return Report(records)


# Identifiability fixture: a 4-point 1-D grid with a lengthscale far below the
# point spacing, so unobserved points see exactly the (centered) prior.
_FIX_GRID = np.arange(4.0)[:, None]
_FIX_VALUES = {
    "A": np.array([[0.9, 0.1], [0.1, 0.9], [0.7, 0.7], [0.95, 0.95]]),
    "B": np.array([[0.9, 0.9], [0.1, 0.1], [0.7, 0.7], [0.95, 0.95]]),
}
FIXTURE_SURROGATE = SurrogateConfig(kernel="rbf", noise_variance=0.01, lengthscale=0.01)


def identifiability_task(scenario: str) -> EpisodeTask:
    vals = _FIX_VALUES[scenario]
    ref = np.zeros(2)
    return EpisodeTask(ObjectiveSuite(f"fig1-{scenario}", 2, 1), _FIX_GRID, vals, 0.0, 0.0, ref,
                       hypervolume_exact(pareto_front(vals), ref), np.zeros(2), np.ones(2))


def make_identifiability_pair(K: int = 2) -> tuple[Trajectory, Trajectory]:
    """Two 3-step trajectories that end on byte-identical candidate frames.

    Both first sample grid points 0 and 1; in scenario A those values trade
    off against each other, in scenario B one dominates the other. Observed
    means, variances, and best values coincide, so the frame of grid point 2
    at step 3 is the same, yet its hypervolume gain differs.
    """
    if K != 2:
        raise ConfigError("the identifiability fixture is defined for K = 2")
    out = []
    for scenario in ("A", "B"):
        task = identifiability_task(scenario)
        env = EpisodeEnv(task, 3, FIXTURE_SURROGATE, np.random.default_rng(0))
        frames, rewards, raws, hvs, cands = [], [], [], [], []
        for idx in (0, 1, 2):
            obs = env.frames()
            cands.append(obs)
            frames.append(obs[idx])
            res = env.step(idx)
            rewards.append(res.reward)
            raws.append(res.raw)
            hvs.append(res.hv)
        out.append(Trajectory(np.array([0, 1, 2]), np.array(frames), np.array(rewards), np.array(raws),
                              cands, np.array(hvs)))
    return out[0], out[1]
