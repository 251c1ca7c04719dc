import numpy as np
import pytest
import torch

from boformer.bench import BoxDomain, ConfigError, EpisodeTask, ObjectiveSuite, TaskConfig, make_task
from boformer.env import EVAL_SURROGATE, EpisodeEnv
from boformer.model import History, ModelConfig, forward, forward_candidates, init_params
from boformer.pareto import hypervolume_exact, pareto_front
from boformer.runner import (BOFormerPolicy, EHVIPolicy, EpisodeRecord, RandomPolicy, SUCBPolicy,
                             continuous_argmax, evaluate_suite, make_identifiability_pair, performance_profile,
                             run_episode)

from .oracles import randomized_params

SMALL_TASK = TaskConfig(grid_n=32)


def fixed_task(grid, values, noise=0.0):
    values = np.asarray(values, dtype=float)
    ref = np.zeros(values.shape[1])
    return EpisodeTask(ObjectiveSuite("fixed", values.shape[1], grid.shape[1]), grid, values, noise, 0.0, ref,
                       hypervolume_exact(pareto_front(values), ref), np.zeros(2), np.ones(2))


def record(policy, final, star=1.0):
    return EpisodeRecord(policy, 0, np.zeros(1, int), np.zeros((1, 2)), np.array([final]), star, np.zeros(1))


class TestRunEpisode:
    def test_single_step_random(self):
        task = make_task(SMALL_TASK, seed=0)
        rec = run_episode(RandomPolicy(), task, 1, np.random.default_rng(0))
        assert rec.T == 1
        assert rec.hv[0] == pytest.approx(np.prod(np.maximum(task.true_values[rec.indices[0]], 0)))

    @pytest.mark.parametrize("policy", [RandomPolicy(), SUCBPolicy(), EHVIPolicy(n_samples=16)])
    def test_hv_monotone_and_regret(self, policy):
        task = make_task(SMALL_TASK, seed=1)
        rec = run_episode(policy, task, 8, np.random.default_rng(1))
        assert np.all(np.diff(rec.hv) >= 0)
        assert np.all(rec.regret >= 0)
        np.testing.assert_allclose(rec.regret, task.hv_star - rec.hv)

    def test_horizon_validation(self):
        with pytest.raises(ConfigError):
            run_episode(RandomPolicy(), make_task(SMALL_TASK, seed=0), 0, np.random.default_rng(0))

    def test_k_mismatch(self):
        policy = BOFormerPolicy(init_params(ModelConfig(K=3, n_layers=1, n_heads=1, hidden=4, window=2)))
        with pytest.raises(ConfigError):
            run_episode(policy, make_task(SMALL_TASK, seed=0), 2, np.random.default_rng(0))

    def test_ehvi_finds_dominating_point(self):
        # 15 clustered points and one far-away point that dominates them all
        grid = np.concatenate([np.linspace(0.0, 0.3, 15), [1.0]])[:, None]
        values = np.column_stack([np.linspace(0.1, 0.6, 15), np.linspace(0.6, 0.1, 15)])
        values = np.vstack([values, [1.0, 1.0]])
        task = fixed_task(grid, values)
        hits = 0
        for seed in range(100):
            rec = run_episode(EHVIPolicy(), task, 2, np.random.default_rng(seed))
            hits += 15 in rec.indices.tolist()
        assert hits >= 95

    def test_boformer_follows_its_scores(self):
        cfg = ModelConfig(K=2, n_layers=1, n_heads=2, hidden=8, window=4, dropout=0.0)
        params = randomized_params(cfg, seed=3).to(torch.float32)
        task = make_task(SMALL_TASK, seed=2)
        rec = run_episode(BOFormerPolicy(params), task, 3, np.random.default_rng(0))
        policy = BOFormerPolicy(params)
        policy.reset(task, 3, np.random.default_rng(0))
        env = EpisodeEnv(task, 3, EVAL_SURROGATE, np.random.default_rng(0))
        for t in range(3):
            q = forward_candidates(params, policy.history(), env.frames())
            assert int(np.argmax(q)) == rec.indices[t]
            policy.select(env)
            policy.observe(rec.indices[t], env.step(rec.indices[t]).reward)

    def test_window_one_is_markovian(self):
        # scrambling stored rewards and Q values cannot change a window-1 policy
        cfg = ModelConfig(K=2, n_layers=1, n_heads=2, hidden=8, window=1, dropout=0.0)
        params = randomized_params(cfg, seed=4).to(torch.float32)

        class Scrambled(BOFormerPolicy):
            def observe(self, index, reward):
                super().observe(index, reward)
                self.rewards[-1] = float(self.rng.normal() * 100)
                self.qs[-1] = float(self.rng.normal() * 100)

        task = make_task(SMALL_TASK, seed=5)
        a = run_episode(BOFormerPolicy(params), task, 6, np.random.default_rng(1), np.random.default_rng(2))
        b = run_episode(Scrambled(params), task, 6, np.random.default_rng(1), np.random.default_rng(2))
        np.testing.assert_array_equal(a.indices, b.indices)


class TestContinuousArgmax:
    def test_reduces_to_grid_argmax(self):
        from scipy.stats import qmc

        box = BoxDomain.unit(2)
        score = lambda x: -np.sum((x - 0.37) ** 2, axis=1)  # noqa: E731
        got = continuous_argmax(score, box, 64, 64, 1, np.random.default_rng(3))
        grid = qmc.Sobol(2, scramble=True, seed=np.random.default_rng(3)).random(64)
        np.testing.assert_array_equal(got, grid[np.argmax(score(grid))])

    def test_local_refinement_reaches_target(self):
        box = BoxDomain([-5.0, 0.0], [10.0, 15.0])
        target = np.array([np.pi, 2.275])
        got = continuous_argmax(lambda x: -np.linalg.norm(x - target, axis=1), box, 128, 4, 64,
                                np.random.default_rng(0))
        # local boxes have side 1.5; 64 Sobol points resolve them to well under 0.2
        assert np.linalg.norm(got - target) < 0.2
        assert np.all(got >= box.lower) and np.all(got <= box.upper)

    def test_deterministic(self):
        f = lambda x: np.sin(5 * x).sum(axis=1)  # noqa: E731
        a = continuous_argmax(f, BoxDomain.unit(3), 32, 4, 8, np.random.default_rng(9))
        b = continuous_argmax(f, BoxDomain.unit(3), 32, 4, 8, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_validation(self):
        with pytest.raises(ValueError):
            continuous_argmax(lambda x: x[:, 0], BoxDomain.unit(1), 4, 8, 1, np.random.default_rng(0))


class TestEvaluateSuite:
    def test_single_episode_summary(self):
        rep = evaluate_suite([RandomPolicy()], "rbf-gp", 1, 4, seed=0, task_cfg=SMALL_TASK)
        (name, mean, se), = rep.summary()
        assert name == "random" and mean == rep.records[0].final_hv and se == 0.0

    def test_paired_tasks_and_noise(self):
        rep = evaluate_suite([RandomPolicy(), EHVIPolicy(16)], "rbf-gp", 3, 3, seed=1, task_cfg=SMALL_TASK)
        seeds = {p: [r.task_seed for r in rep.records if r.policy == p] for p in rep.policies()}
        assert seeds["random"] == seeds["ehvi"]
        # identical policies on paired streams give identical records
        twin = RandomPolicy()
        twin.name = "random2"
        rep2 = evaluate_suite([RandomPolicy(), twin], "rbf-gp", 2, 4, seed=1, task_cfg=SMALL_TASK)
        a, b = rep2.records[0], rep2.records[1]
        np.testing.assert_array_equal(a.observed, b.observed)

    def test_all_pareto_optimal_reaches_star(self):
        grid = np.array([[0.0], [0.5], [1.0]])
        task = fixed_task(grid, [[1.0, 0.2], [0.6, 0.6], [0.2, 1.0]])
        rec = run_episode(RandomPolicy(), task, 30, np.random.default_rng(0))
        assert rec.final_hv == pytest.approx(task.hv_star) and rec.regret[-1] == pytest.approx(0.0)

    def test_seed_reproducible(self):
        a = evaluate_suite([SUCBPolicy()], "rbf-gp", 2, 3, seed=4, task_cfg=SMALL_TASK)
        b = evaluate_suite([SUCBPolicy()], "rbf-gp", 2, 3, seed=4, task_cfg=SMALL_TASK)
        for x, y in zip(a.records, b.records):
            np.testing.assert_array_equal(x.hv, y.hv)


class TestProfiles:
    def test_hand_counts(self):
        recs = [record("p", v) for v in (0.2, 0.5, 0.9)]
        prof = performance_profile(recs, [0.0, 0.5, 1.0 + 1e-9])["p"]
        np.testing.assert_allclose(prof.fractions, [1.0, 2 / 3, 0.0])

    def test_monotone(self):
        rng = np.random.default_rng(0)
        recs = [record(p, v) for p in ("a", "b") for v in rng.random(20)]
        for prof in performance_profile(recs, np.linspace(0, 1, 51)).values():
            assert np.all(np.diff(prof.fractions) <= 0)
            assert np.all((prof.fractions >= 0) & (prof.fractions <= 1))

    def test_normalized_by_star(self):
        prof = performance_profile([record("p", 0.4, star=0.5)], [0.8, 0.81])["p"]
        np.testing.assert_allclose(prof.fractions, [1.0, 0.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            performance_profile([], [0.0])
        with pytest.raises(ValueError):
            performance_profile([record("p", 0.1)], [0.5, 0.1])


class TestIdentifiabilityPair:
    def test_final_frames_identical(self):
        a, b = make_identifiability_pair()
        assert a.frames[2].tobytes() == b.frames[2].tobytes()
        assert a.frames[1].tobytes() != b.frames[1].tobytes()

    def test_improvements_differ(self):
        a, b = make_identifiability_pair()
        # scenario A front {(.9,.1), (.1,.9)} gains 0.49 - 0.13 from (.7,.7); B's (.9,.9) dominates it
        assert a.raw[2] == pytest.approx(0.36) and b.raw[2] == 0.0
        assert abs(a.rewards[2] - b.rewards[2]) >= 0.1

    def test_rewards_are_consistent(self):
        for tr in make_identifiability_pair():
            np.testing.assert_allclose(np.cumsum(tr.raw), tr.hv)

    def test_window_one_scorer_cannot_separate(self):
        cfg = ModelConfig(K=2, n_layers=1, n_heads=2, hidden=8, window=1, dropout=0.0)
        params = randomized_params(cfg, seed=1)
        a, b = make_identifiability_pair()
        empty = History.empty(7)
        assert forward(params, empty, a.frames[2]) == forward(params, empty, b.frames[2])

    def test_only_two_objectives(self):
        with pytest.raises(ConfigError):
            make_identifiability_pair(K=3)
