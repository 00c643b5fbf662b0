"""Tests for the pairwise-interaction and m-way CDF environments."""

import math

import numpy as np
import pytest

from slate_ope.core import (
    EpsilonGreedyPolicy,
    Slate,
    SlateConfig,
    SlateOpeError,
    TablePolicy,
    UniformPolicy,
    slate_matrix,
)
from slate_ope.estimators import SUNO, RewardGrid, compute_weights
from slate_ope.interaction import (
    InteractionEnv,
    build_interaction_env,
    build_mway_env,
    exact_target_mean,
    load_interaction_manifest,
    load_mway_manifest,
    save_interaction_manifest,
    save_mway_manifest,
)
from slate_ope.synth import AdditiveCdfEnv, exact_target_cdf


class TestInteractionEnv:
    def test_deterministic_build(self):
        a = build_interaction_env(SlateConfig(3, 10), 0.3, 0.8, 0.05, seed=23)
        b = build_interaction_env(SlateConfig(3, 10), 0.3, 0.8, 0.05, seed=23)
        assert np.array_equal(a.base, b.base)
        assert np.array_equal(a.pair_tables, b.pair_tables)

    def test_degenerate_parameters_are_fully_additive_and_deterministic(self):
        env = build_interaction_env(SlateConfig(3, 4), 0.0, 1.0, 0.0, seed=1)
        rng = np.random.default_rng(2)
        slates = rng.integers(0, 4, size=(100, 3))
        rewards = env.sample_rewards(None, slates, rng)
        additive = env.base[np.arange(3), slates].sum(axis=1)
        np.testing.assert_allclose(rewards, additive, atol=1e-15)

    def test_cascade_decay_weights_positions(self):
        env = build_interaction_env(SlateConfig(3, 4), 0.0, 0.5, 0.0, seed=3)
        slate = np.array([[1, 1, 1]])
        expected = (
            env.base[0, 1] + 0.5 * env.base[1, 1] + 0.25 * env.base[2, 1]
        )
        assert env.expected_rewards(slate)[0] == pytest.approx(expected)

    def test_pairwise_term_breaks_single_slot_additivity(self):
        env = build_interaction_env(SlateConfig(2, 3), 1.0, 1.0, 0.0, seed=4)
        # if E[R|a1,a2] were additive, the interaction difference would vanish
        e = lambda a, b: env.expected_rewards(np.array([[a, b]]))[0]
        interaction = e(0, 0) + e(1, 1) - e(0, 1) - e(1, 0)
        assert abs(interaction) > 1e-6

    def test_rewards_inside_declared_range(self):
        env = build_interaction_env(SlateConfig(3, 10), 0.3, 0.8, 0.05, seed=23)
        rng = np.random.default_rng(5)
        slates = rng.integers(0, 10, size=(20_000, 3))
        rewards = env.sample_rewards(None, slates, rng)
        lo, hi = env.reward_range
        assert rewards.min() >= lo
        assert rewards.max() <= hi

    def test_noise_is_zero_mean_and_truncated(self):
        env = build_interaction_env(SlateConfig(2, 2), 0.0, 1.0, 0.1, seed=6)
        rng = np.random.default_rng(7)
        slates = np.zeros((500_000, 2), dtype=np.int64)
        rewards = env.sample_rewards(None, slates, rng)
        noise = rewards - env.expected_rewards(slates)
        assert np.abs(noise).max() <= 0.3 + 1e-12
        # truncation at 3 sigma keeps the mean at zero
        assert abs(noise.mean()) < 4 * 0.1 / np.sqrt(len(noise))

    def test_exact_target_mean_matches_monte_carlo(self):
        env = build_interaction_env(SlateConfig(3, 5), 0.4, 0.9, 0.05, seed=8)
        pi = TablePolicy.random(env.config, 1, np.random.default_rng(9))
        rng = np.random.default_rng(10)
        n = 400_000
        slates = pi.sample_slates(np.zeros(n, dtype=np.int64), rng)
        rewards = env.sample_rewards(None, slates, rng)
        exact = exact_target_mean(env, pi)
        se = rewards.std(ddof=1) / np.sqrt(n)
        assert abs(rewards.mean() - exact) <= 4 * se

    def test_additive_mean_is_estimated_without_bias(self):
        # pairwise strength 0: the slot-additive weighted mean is centered
        # on the enumerated target mean across many small datasets
        env = build_interaction_env(SlateConfig(3, 3), 0.0, 0.8, 0.05, seed=11)
        mu = UniformPolicy(env.config)
        pi = EpsilonGreedyPolicy.deterministic(env.config, np.array([[0, 1, 2]]))
        exact = exact_target_mean(env, pi)
        n_datasets, n = 10_000, 40
        rng = np.random.default_rng(12)
        total = n_datasets * n
        slates = mu.sample_slates(np.zeros(total, dtype=np.int64), rng)
        rewards = env.sample_rewards(None, slates, rng)
        weights = compute_weights(
            SUNO, pi, mu, np.zeros(total, dtype=np.int64), slates
        )
        per_dataset = (weights * rewards).reshape(n_datasets, n).mean(axis=1)
        se = per_dataset.std(ddof=1) / np.sqrt(n_datasets)
        assert abs(per_dataset.mean() - exact) <= 3 * se

    def test_negative_strength_rejected(self):
        with pytest.raises(ValueError):
            build_interaction_env(SlateConfig(2, 2), -0.1, 1.0, 0.0, seed=0)

    def test_manifest_roundtrip(self, tmp_path):
        env = build_interaction_env(SlateConfig(3, 4), 0.2, 0.7, 0.03, seed=13)
        path = tmp_path / "env.json"
        save_interaction_manifest(env, path)
        back = load_interaction_manifest(path)
        assert back.config == env.config
        assert np.array_equal(back.base, env.base)
        assert np.array_equal(back.pair_tables, env.pair_tables)
        assert back.gamma == env.gamma


class TestMWayEnv:
    def test_m_one_matches_additive_env_with_shared_parameters(self):
        config = SlateConfig(3, 3)
        menv = build_mway_env(config, m=1, seed=14)
        aenv = AdditiveCdfEnv(
            config=config,
            slopes=menv.slopes.reshape(3, 3),
            centers=menv.centers.reshape(3, 3),
            seed=14,
        )
        nus = np.linspace(0, 1, 17)
        rng = np.random.default_rng(15)
        for _ in range(20):
            slate = Slate(tuple(rng.integers(0, 3, size=3)))
            np.testing.assert_allclose(
                np.asarray(menv.exact_slate_cdf(slate, nus)),
                np.asarray(aenv.exact_slate_cdf(slate, nus)),
                atol=1e-15,
            )

    def test_m_equals_k_single_component(self):
        config = SlateConfig(3, 2)
        env = build_mway_env(config, m=3, seed=16)
        assert len(env.subsets) == 1
        assert env.slopes.shape == (1, 8)

    def test_cdf_endpoints_for_all_orders(self):
        config = SlateConfig(4, 3)
        rng = np.random.default_rng(17)
        for m in range(1, 5):
            env = build_mway_env(config, m=m, seed=18 + m)
            for _ in range(100):
                slate = Slate(tuple(rng.integers(0, 3, size=4)))
                assert env.exact_slate_cdf(slate, 0.0) == pytest.approx(0.0, abs=1e-15)
                assert env.exact_slate_cdf(slate, 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_in_nu(self):
        env = build_mway_env(SlateConfig(3, 3), m=2, seed=19)
        nus = np.linspace(0, 1, 101)
        rng = np.random.default_rng(20)
        for _ in range(20):
            slate = Slate(tuple(rng.integers(0, 3, size=3)))
            values = np.asarray(env.exact_slate_cdf(slate, nus))
            assert np.all(np.diff(values) >= -1e-15)

    def test_sampling_matches_exact_cdf(self):
        env = build_mway_env(SlateConfig(3, 3), m=2, seed=21)
        slate = Slate((2, 0, 1))
        n = 1_000_000
        slates = np.tile(np.array(slate.actions), (n, 1))
        rewards = env.sample_rewards(None, slates, np.random.default_rng(22))
        grid = np.linspace(0.0, 1.0, 501)
        empirical = np.searchsorted(np.sort(rewards), grid, side="right") / n
        exact = np.asarray(env.exact_slate_cdf(slate, grid))
        assert np.abs(empirical - exact).max() <= 0.005

    def test_exact_target_cdf_reuses_enumeration(self):
        env = build_mway_env(SlateConfig(3, 3), m=2, seed=23)
        pi = TablePolicy.random(env.config, 1, np.random.default_rng(24))
        grid = RewardGrid.linspace(0.0, 1.0, 101)
        cdf = exact_target_cdf(env, pi, grid)
        # independent route: average slate CDFs weighted by slate probability
        slates = slate_matrix(env.config)
        probs = np.ones(slates.shape[0])
        for k in range(3):
            probs *= pi.slot_distribution(0, k)[slates[:, k]]
        manual = sum(
            p * np.asarray(env.exact_slate_cdf(row, grid.points))
            for p, row in zip(probs, slates)
        )
        np.testing.assert_allclose(cdf.values, np.clip(manual, 0, 1), atol=1e-9)

    def test_table_guard(self):
        with pytest.raises(SlateOpeError):
            build_mway_env(SlateConfig(10, 30), m=5, seed=0)

    def test_m_bounds(self):
        with pytest.raises(ValueError):
            build_mway_env(SlateConfig(3, 3), m=0, seed=0)
        with pytest.raises(ValueError):
            build_mway_env(SlateConfig(3, 3), m=4, seed=0)

    def test_component_normalization(self):
        env = build_mway_env(SlateConfig(3, 3), m=2, seed=25)
        n_subsets = math.comb(3, 2)
        for si in range(n_subsets):
            for flat in range(9):
                assert env._component(si, flat, np.array([1.0]))[0] == pytest.approx(
                    1.0 / n_subsets
                )

    def test_product_weight_unbiased_despite_structure(self):
        # positive control: product weights stay unbiased in a pair-
        # decomposable environment where order-1 weights are biased
        config = SlateConfig(3, 3)
        env = build_mway_env(config, m=2, seed=27)
        mu = UniformPolicy(config)
        pi = EpsilonGreedyPolicy.deterministic(config, np.array([[2, 0, 1]]))
        grid = RewardGrid.linspace(0.0, 1.0, 21)
        exact = exact_target_cdf(env, pi, grid).values
        n_datasets, n = 8000, 50
        total = n_datasets * n
        rng = np.random.default_rng(28)
        slates = mu.sample_slates(np.zeros(total, dtype=np.int64), rng)
        rewards = env.sample_rewards(None, slates, rng)
        from slate_ope.estimators import UNO

        weights = compute_weights(UNO, pi, mu, np.zeros(total, dtype=np.int64), slates)
        contrib = weights[:, None] * (rewards[:, None] <= grid.points[None, :])
        per = contrib.reshape(n_datasets, n, len(grid)).mean(axis=1)
        se = per.std(axis=0, ddof=1) / np.sqrt(n_datasets)
        gap = np.abs(per.mean(axis=0) - exact)
        assert np.all(gap <= 3 * np.maximum(se, 1e-12))

    def test_manifest_roundtrip(self, tmp_path):
        env = build_mway_env(SlateConfig(3, 3), m=2, seed=26)
        path = tmp_path / "mway.json"
        save_mway_manifest(env, path)
        back = load_mway_manifest(path)
        assert back.config == env.config
        assert back.m == env.m
        assert np.array_equal(back.slopes, env.slopes)
        assert np.array_equal(back.centers, env.centers)
        nus = np.linspace(0, 1, 9)
        np.testing.assert_array_equal(
            np.asarray(back.exact_slate_cdf(Slate((0, 1, 2)), nus)),
            np.asarray(env.exact_slate_cdf(Slate((0, 1, 2)), nus)),
        )
