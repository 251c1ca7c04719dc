"""Generalized DQN training of the sequence Q-network.

Off-policy loop: collect a trajectory (demo policy with probability
``r_demo``, otherwise softmax over Q with epsilon-uniform steps), store it in a
prioritized trajectory replay buffer, take an optimizer step on the summed
trajectory TD error of a prioritized batch, and periodically copy the policy
into the target network. The target network also supplies the Q values that
augment every history frame, computed recursively along the trajectory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .acquisition import demo_select
from .bench import TaskConfig, make_task
from .env import TRAIN_SURROGATE, EpisodeEnv
from .gp import SurrogateConfig
from .model import (EMBEDDING_NAMES, AdamState, History, ModelConfig, QParams, TrainingError,
                    adam_step, backward, forward, forward_batch, forward_candidates,
                    forward_candidates_batch, init_params, reinit_frame_embedding,
                    save_checkpoint)
from .pareto import REWARD_CAP

log = logging.getLogger(__name__)

LOG_FIELDS = ("episode", "loss", "episode_hv", "buffer_size", "epsilon_used", "demo_used")


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 1e-5
    weight_decay: float = 1e-5
    batch_size: int = 8
    r_demo: float = 0.01
    epsilon: float = 0.1
    target_sync_every: int = 5
    episodes: int = 300
    horizon: int = 50
    temperature: float = 1.0
    buffer_capacity: int = 64
    priority_alpha: float = 0.6
    candidate_cap: int = 256
    checkpoint_every: int = 50
    updates_per_episode: int = 1
    demo_samples: int = 128
    reward_cap: float = REWARD_CAP
    transfer_init: str = "random"
    transfer_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("r_demo", "epsilon"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")


@dataclass
class Trajectory:
    """One episode. ``candidates[t]`` holds the (possibly subsampled) frames
    of step t, always including the chosen one."""

    indices: np.ndarray
    frames: np.ndarray
    rewards: np.ndarray
    raw: np.ndarray
    candidates: list[np.ndarray]
    hv: np.ndarray
    task_seed: int | None = None
    demo: bool = False
    epsilon_steps: int = 0

    @property
    def T(self) -> int:
        return len(self.rewards)

    def history(self, t: int, qbar: np.ndarray, window: int) -> History:
        """History preceding 0-based step ``t``, truncated to ``window - 1`` frames."""
        lo = max(0, t - (window - 1))
        return History(self.frames[lo:t], self.rewards[lo:t], qbar[lo:t])


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


def recursive_target_q_batch(target: QParams, trajs: list[Trajectory]) -> list[np.ndarray]:
    """Target-network Q of every chosen frame, built step by step.

    Step t's history carries the rewards and target Q values of steps < t.
    """
    w = target.config.window
    T_max = max(tr.T for tr in trajs)
    qbar = [np.zeros(tr.T) for tr in trajs]
    for t in range(T_max):
        live = [j for j, tr in enumerate(trajs) if t < tr.T]
        hists = [trajs[j].history(t, qbar[j], w) for j in live]
        cands = np.stack([trajs[j].frames[t] for j in live])
        q = forward_batch(target, hists, cands)
        for j, v in zip(live, q):
            qbar[j][t] = v
    return qbar


def recursive_target_q(target: QParams, traj: Trajectory) -> np.ndarray:
    return recursive_target_q_batch(target, [traj])[0]


@dataclass
class TDBatch:
    """Flattened (history, frame, TD target) items of a set of trajectories."""

    histories: list[History]
    frames: np.ndarray
    targets: np.ndarray
    owner: np.ndarray  # index of the trajectory each item came from

    def __len__(self) -> int:
        return len(self.histories)


def td_batch(target: QParams, trajs: list[Trajectory], gamma: float, chunk: int = 64) -> TDBatch:
    """Items ``Q(h_i, o_i(x_i))`` paired with ``r_i + gamma * max_x Qbar(h_{i+1}, o_{i+1}(x))``."""
    w = target.config.window
    qbar = recursive_target_q_batch(target, trajs)
    hists, frames, owners, rewards = [], [], [], []
    next_hists, next_cands = [], []
    for j, tr in enumerate(trajs):
        for i in range(tr.T - 1):
            hists.append(tr.history(i, qbar[j], w))
            frames.append(tr.frames[i])
            owners.append(j)
            rewards.append(tr.rewards[i])
            next_hists.append(tr.history(i + 1, qbar[j], w))
            next_cands.append(tr.candidates[i + 1])
    n = len(hists)
    best_next = np.zeros(n)
    for s in range(0, n, chunk):
        block = next_cands[s:s + chunk]
        m = max(c.shape[0] for c in block)
        # pad by repeating a row: the max is unaffected
        padded = np.stack([np.concatenate([c, np.repeat(c[:1], m - c.shape[0], axis=0)]) for c in block])
        q = forward_candidates_batch(target, next_hists[s:s + chunk], padded)
        best_next[s:s + chunk] = q.max(axis=1)
    targets = np.asarray(rewards, dtype=float) + gamma * best_next
    fd = trajs[0].frames.shape[1] if trajs else 0
    return TDBatch(hists, np.asarray(frames).reshape(n, fd), targets, np.asarray(owners, dtype=int))


def per_trajectory_error(policy: QParams, batch: TDBatch, n_traj: int) -> np.ndarray:
    if len(batch) == 0:
        return np.zeros(n_traj)
    q = forward_batch(policy, batch.histories, batch.frames)
    return np.bincount(batch.owner, weights=(q - batch.targets) ** 2, minlength=n_traj)


def trajectory_td_error(policy: QParams, target: QParams, traj: Trajectory, gamma: float) -> float:
    """Summed squared TD residual over steps 1..T-1 of one trajectory."""
    return float(per_trajectory_error(policy, td_batch(target, [traj], gamma), 1)[0])


class PTRB:
    """Prioritized trajectory replay buffer (proportional, evict lowest priority)."""

    def __init__(self, capacity: int = 64, alpha: float = 0.6, min_priority: float = 1e-6):
        self.capacity = capacity
        self.alpha = alpha
        self.min_priority = min_priority
        self.items: list[Trajectory] = []
        self.priorities: list[float] = []

    def __len__(self) -> int:
        return len(self.items)

    def push(self, traj: Trajectory, priority: float) -> None:
        if len(self.items) >= self.capacity:
            drop = int(np.argmin(self.priorities))
            del self.items[drop]
            del self.priorities[drop]
        self.items.append(traj)
        self.priorities.append(max(float(priority), self.min_priority))

    def probabilities(self) -> np.ndarray:
        p = np.asarray(self.priorities) ** self.alpha
        return p / p.sum()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(len(self.items), size=n, replace=True, p=self.probabilities())

    def update(self, indices, priorities) -> None:
        for i, p in zip(indices, priorities):
            self.priorities[int(i)] = max(float(p), self.min_priority)


def _softmax_choice(q: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 0:
        return int(np.argmax(q))
    z = (q - q.max()) / temperature
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(q), p=p))


def collect_episode(policy: QParams, target: QParams, task, cfg: TrainerConfig,
                    rng: np.random.Generator, surrogate: SurrogateConfig = TRAIN_SURROGATE,
                    noise_rng: np.random.Generator | None = None) -> Trajectory:
    """Roll out one training episode and record everything the TD loss needs."""
    T = cfg.horizon
    w = policy.config.window
    env = EpisodeEnv(task, T, surrogate, noise_rng if noise_rng is not None else rng,
                     use_task_lengthscales=task.lengthscales is not None, reward_cap=cfg.reward_cap)
    demo = bool(rng.random() < cfg.r_demo)
    fd = policy.config.feature_dim
    frames = np.zeros((T, fd))
    rewards = np.zeros(T)
    raws = np.zeros(T)
    hvs = np.zeros(T)
    qbar = np.zeros(T)
    indices = np.zeros(T, dtype=int)
    cands: list[np.ndarray] = []
    eps_steps = 0
    for t in range(T):
        obs = env.frames()
        hist = History(frames[max(0, t - (w - 1)):t], rewards[max(0, t - (w - 1)):t],
                       qbar[max(0, t - (w - 1)):t])
        if demo:
            idx = demo_select(env.posterior(), env.observed_archive, rng, cfg.demo_samples)
        elif rng.random() < cfg.epsilon:
            idx = int(rng.integers(task.N))
            eps_steps += 1
        else:
            idx = _softmax_choice(forward_candidates(policy, hist, obs), cfg.temperature, rng)
        frames[t] = obs[idx]
        if task.N > cfg.candidate_cap:
            others = np.delete(np.arange(task.N), idx)
            keep = np.concatenate([[idx], rng.choice(others, cfg.candidate_cap - 1, replace=False)])
            cands.append(obs[np.sort(keep)])
        else:
            cands.append(obs)
        if not demo:
            qbar[t] = forward(target, hist, obs[idx])
        res = env.step(idx)
        indices[t], rewards[t], raws[t], hvs[t] = idx, res.reward, res.raw, res.hv
    return Trajectory(indices, frames, rewards, raws, cands, hvs, task.seed, demo, eps_steps)


@dataclass
class TrainResult:
    params: QParams
    target: QParams
    log: list[dict] = field(default_factory=list)


def _update(policy: QParams, target: QParams, buffer: PTRB, cfg: TrainerConfig, state: AdamState,
            rng: np.random.Generator, dropout_seed: int, trainable) -> float:
    idx = buffer.sample(cfg.batch_size, rng)
    trajs = [buffer.items[i] for i in idx]
    batch = td_batch(target, trajs, cfg.gamma)
    grads, loss = backward(policy, batch.histories, batch.frames, batch.targets,
                           dropout_seed=dropout_seed, trainable=trainable)
    adam_step(policy, grads, cfg.lr, cfg.weight_decay, state)
    buffer.update(idx, per_trajectory_error(policy, batch, len(trajs)))
    return loss / len(trajs)


def train(cfg: TrainerConfig, model_cfg: ModelConfig, task_cfg: TaskConfig, seed: int | None = None,
          init: QParams | None = None, trainable=None, out: str | Path | None = None,
          surrogate: SurrogateConfig = TRAIN_SURROGATE, dtype: torch.dtype = torch.float32,
          progress=None) -> TrainResult:
    """Off-policy training loop; every random stream derives from ``seed``."""
    seed = cfg.seed if seed is None else seed
    policy = init.clone() if init is not None else init_params(model_cfg, derive_seed(seed, 0), dtype)
    target = policy.clone()
    state = AdamState()
    buffer = PTRB(cfg.buffer_capacity, cfg.priority_alpha)
    rng = np.random.default_rng(derive_seed(seed, 1))
    result = TrainResult(policy, target)
    for e in range(1, cfg.episodes + 1):
        task_seed = derive_seed(seed, 2, e)
        task = make_task(task_cfg, task_seed)
        traj = collect_episode(policy, target, task, cfg, rng, surrogate,
                               noise_rng=np.random.default_rng(derive_seed(seed, 3, e)))
        priority = trajectory_td_error(policy, target, traj, cfg.gamma)
        buffer.push(traj, priority)
        losses = []
        for u in range(cfg.updates_per_episode):
            try:
                losses.append(_update(policy, target, buffer, cfg, state, rng,
                                      derive_seed(seed, 4, e, u), trainable))
            except TrainingError as err:
                raise TrainingError(f"{err} at episode {e} (task seed {task_seed})") from err
        if e % cfg.target_sync_every == 0:
            target = policy.clone()
        row = {"episode": e, "loss": float(np.mean(losses)) if losses else 0.0,
               "episode_hv": float(traj.hv[-1]), "buffer_size": len(buffer),
               "epsilon_used": traj.epsilon_steps, "demo_used": int(traj.demo)}
        result.log.append(row)
        if progress is not None:
            progress(row)
        if out is not None and (e % cfg.checkpoint_every == 0 or e == cfg.episodes):
            save_checkpoint(out, policy)
    result.params, result.target = policy, target
    return result


def onpolicy_update(policy: QParams, hist: History, frame, reward: float, next_hist: History,
                    next_cands: np.ndarray, gamma: float, lr: float, weight_decay: float,
                    state: AdamState, dropout_seed: int | None = None) -> float:
    """Single-transition update toward ``r + gamma * max Q_theta(h', o'(x))``."""
    y = reward + gamma * float(forward_candidates(policy, next_hist, next_cands).max())
    grads, loss = backward(policy, [hist], np.asarray(frame)[None], [y], dropout_seed=dropout_seed)
    adam_step(policy, grads, lr, weight_decay, state)
    return loss


def train_onpolicy(cfg: TrainerConfig, model_cfg: ModelConfig, task_cfg: TaskConfig,
                   seed: int | None = None, surrogate: SurrogateConfig = TRAIN_SURROGATE,
                   dtype: torch.dtype = torch.float32) -> TrainResult:
    """Greedy rollouts with one gradient step per environment step, no buffer."""
    seed = cfg.seed if seed is None else seed
    policy = init_params(model_cfg, derive_seed(seed, 0), dtype)
    state = AdamState()
    result = TrainResult(policy, policy)
    w = model_cfg.window
    T = cfg.horizon
    for e in range(1, cfg.episodes + 1):
        task = make_task(task_cfg, derive_seed(seed, 2, e))
        env = EpisodeEnv(task, T, surrogate, np.random.default_rng(derive_seed(seed, 3, e)),
                         use_task_lengthscales=task.lengthscales is not None, reward_cap=cfg.reward_cap)
        frames = np.zeros((T, model_cfg.feature_dim))
        rewards = np.zeros(T)
        qs = np.zeros(T)
        losses = []
        obs = env.frames()
        for t in range(T):
            lo = max(0, t - (w - 1))
            hist = History(frames[lo:t], rewards[lo:t], qs[lo:t])
            q = forward_candidates(policy, hist, obs)
            idx = int(np.argmax(q))
            frames[t], qs[t] = obs[idx], q[idx]
            res = env.step(idx)
            rewards[t] = res.reward
            if t + 1 < T:
                obs = env.frames()
                lo2 = max(0, t + 1 - (w - 1))
                nxt = History(frames[lo2:t + 1], rewards[lo2:t + 1], qs[lo2:t + 1])
                losses.append(onpolicy_update(policy, hist, frames[t], rewards[t], nxt, obs, cfg.gamma,
                                              cfg.lr, cfg.weight_decay, state,
                                              derive_seed(seed, 4, e, t)))
        result.log.append({"episode": e, "loss": float(np.mean(losses)) if losses else 0.0,
                           "episode_hv": float(env.archive.hv), "buffer_size": 0,
                           "epsilon_used": 0, "demo_used": 0, "updates": len(losses)})
    result.params = result.target = policy
    return result


def transfer_retrain_embedding(source: QParams, new_K: int, episodes: int, cfg: TrainerConfig,
                               task_cfg: TaskConfig, seed: int | None = None,
                               out: str | Path | None = None, progress=None) -> TrainResult:
    """New frame embedding for ``new_K`` objectives (``cfg.transfer_init``); only that embedding is trained."""
    if new_K < 2:
        raise ValueError("new_K must be >= 2")
    seed = cfg.seed if seed is None else seed
    params = reinit_frame_embedding(source, new_K, derive_seed(seed, 5), cfg.transfer_init)
    run_cfg = TrainerConfig(**{**cfg.__dict__, "episodes": episodes, "lr": cfg.transfer_lr})
    task_cfg = TaskConfig(**{**task_cfg.__dict__, "K": new_K})
    return train(run_cfg, params.config, task_cfg, seed, init=params, trainable=set(EMBEDDING_NAMES),
                 out=out, dtype=params.dtype, progress=progress)
