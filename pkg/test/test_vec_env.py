#!/usr/bin/env python
# coding: utf-8

"""
Tests lock-step stepping of several environments: per-environment random
streams, automatic resets, threaded stepping and state snapshots.
"""

import unittest

import numpy as np

from blockland import EnvironmentFault
from blockland.agents import IdlePolicy, NaturalWalker, Policy, RandomWalker
from blockland.env import Action, Agent
from blockland.level import LevelSpec, twosides
from blockland.util import make_rng
from blockland.vec_env import EndKind, VecEnv


class ExplodingPolicy(Policy):
    tag = "exploding"

    def __init__(self, after):
        self.after = after
        self.calls = 0

    def act(self, obs, rng, state):
        self.calls += 1
        if self.calls > self.after:
            raise RuntimeError("boom")
        return int(Action.NOOP), state


def drive(vec_env, n_steps, seed=0):
    """Step with random learner actions; returns the stacked results."""
    rng = make_rng(seed, 99)
    results = []
    for _ in range(n_steps):
        actions = rng.integers(6, size=vec_env.n_envs)
        results.append(vec_env.step(actions))
    return results


class VecEnvTest(unittest.TestCase):
    def test_observation_shape(self):
        with VecEnv(twosides(), 3, Agent.ROBOT, RandomWalker(), seed=1) as vec_env:
            obs = vec_env.observations()
        self.assertEqual(obs.shape, (3, 12))
        np.testing.assert_array_equal(obs[0], obs[2])

    def test_threaded_matches_sequential(self):
        level = LevelSpec(max_steps=40)
        with VecEnv(level, 6, Agent.ROBOT, NaturalWalker(), seed=5) as sequential:
            expected = drive(sequential, 300)
        with VecEnv(level, 6, Agent.ROBOT, NaturalWalker(), seed=5, workers=4) as threaded:
            actual = drive(threaded, 300)
        for a, b in zip(expected, actual):
            self.assertEqual(a.rewards.tobytes(), b.rewards.tobytes())
            self.assertEqual(a.end_kinds.tobytes(), b.end_kinds.tobytes())
            self.assertEqual(a.final_obs.tobytes(), b.final_obs.tobytes())
            self.assertEqual(a.finished_returns, b.finished_returns)

    def test_streams_differ_between_envs(self):
        with VecEnv(twosides(), 2, Agent.ROBOT, RandomWalker(), seed=5) as vec_env:
            drive(vec_env, 50)
            self.assertNotEqual(vec_env.envs[0].state.human_pos, vec_env.envs[1].state.human_pos)

    def test_auto_reset_on_truncation(self):
        level = LevelSpec(max_steps=10)
        with VecEnv(level, 2, Agent.ROBOT, IdlePolicy(), seed=0) as vec_env:
            for _ in range(10):
                result = vec_env.step([Action.NOOP, Action.NOOP])
            np.testing.assert_array_equal(result.end_kinds, [EndKind.TRUNCATED] * 2)
            self.assertEqual(len(result.finished_returns), 2)
            self.assertAlmostEqual(result.finished_returns[0], -0.05, delta=1e-12)
            self.assertEqual(vec_env.envs[0].state.t, 0)
            self.assertEqual(vec_env.episode_returns, [0.0, 0.0])

    def test_final_obs_before_reset(self):
        level = LevelSpec(max_steps=3)
        with VecEnv(level, 1, Agent.ROBOT, IdlePolicy(), seed=0) as vec_env:
            for _ in range(3):
                result = vec_env.step([Action.MOVE_LEFT])
            # three moves left of the spawn, not the spawn itself
            self.assertAlmostEqual(result.final_obs[0, 0], 2 * 1.75 / 12 - 1, delta=1e-12)
            self.assertAlmostEqual(vec_env.observations()[0, 0], 2 * 2.5 / 12 - 1, delta=1e-12)

    def test_human_learner_reward_is_negated(self):
        with VecEnv(twosides(), 2, Agent.HUMAN, IdlePolicy(), seed=0) as vec_env:
            result = vec_env.step([Action.MOVE_RIGHT, Action.NOOP])
        np.testing.assert_array_equal(result.robot_rewards, [-0.005, -0.005])
        np.testing.assert_array_equal(result.rewards, [0.005, 0.005])
        self.assertEqual(vec_env.envs[0].state.human_pos, (9.75, 4.0))
        self.assertEqual(vec_env.envs[0].state.robot_pos, (2.5, 4.0))

    def test_state_dict_continues_identically(self):
        level = LevelSpec(max_steps=25)
        vec_env = VecEnv(level, 3, Agent.ROBOT, NaturalWalker(), seed=8)
        drive(vec_env, 40, seed=1)
        snapshot = vec_env.state_dict()
        expected = drive(vec_env, 60, seed=2)

        restored = VecEnv(level, 3, Agent.ROBOT, NaturalWalker(), seed=1234)
        restored.load_state_dict(snapshot)
        actual = drive(restored, 60, seed=2)
        for a, b in zip(expected, actual):
            self.assertEqual(a.final_obs.tobytes(), b.final_obs.tobytes())
            self.assertEqual(a.finished_returns, b.finished_returns)

    def test_fault_names_environment(self):
        with VecEnv(twosides(), 3, Agent.ROBOT, ExplodingPolicy(after=4), seed=0) as vec_env:
            vec_env.step([Action.NOOP] * 3)
            with self.assertRaises(EnvironmentFault) as cm:
                vec_env.step([Action.NOOP] * 3)
        self.assertEqual(cm.exception.env_index, 1)
        self.assertEqual(cm.exception.t, 1)
        self.assertIsInstance(cm.exception.__cause__, RuntimeError)


if __name__ == "__main__":
    unittest.main()
