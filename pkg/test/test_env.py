#!/usr/bin/env python
# coding: utf-8

"""
Tests the twosides simulation: reset, step mechanics, observations and the
episode bookkeeping identities.
"""

import math
import unittest
from dataclasses import replace

import numpy as np
from hypothesis import given, settings, strategies as st

from blockland import UsageError
from blockland.env import (
    Action,
    Agent,
    BlocklandEnv,
    BoxLocation,
    BoxState,
    OBSERVATION_SIZE,
    episode_return,
    minimum_delivery_steps,
    observe,
    reset,
    step,
    trace_counts,
)
from blockland.level import LevelSpec, twosides

from .config import TEST_LONG_SWEEPS

SPEC = twosides()

actions = st.sampled_from(list(Action))


def greedy_action(state, spec):
    """Walk the robot to the next box or the cart and interact once in reach."""
    held = state.held_box(Agent.ROBOT)
    if held is None:
        floor = [b for b in state.boxes if b.location is BoxLocation.ON_FLOOR]
        target = floor[0].pos
    else:
        target = spec.cart_pos
    x, y = state.robot_pos
    dx, dy = target[0] - x, target[1] - y
    if math.hypot(dx, dy) <= spec.interact_radius:
        return Action.INTERACT
    if abs(dx) >= abs(dy):
        return Action.MOVE_RIGHT if dx > 0 else Action.MOVE_LEFT
    return Action.MOVE_UP if dy > 0 else Action.MOVE_DOWN


def play(spec, robot_actions, human_actions):
    state, _, _ = reset(spec)
    trace = []
    for a_robot, a_human in zip(robot_actions, human_actions):
        state, result = step(state, spec, a_robot, a_human)
        trace.append(result)
        if state.done:
            break
    return state, trace


def assert_consistent(test, state, spec):
    """The per-step invariants of a world state."""
    low, high = spec.road_x_range
    for agent in Agent:
        x, y = state.position_of(agent)
        test.assertFalse(low < x < high, f"{agent} inside the road at x={x}")
        test.assertTrue(0.0 <= x <= spec.x_max)
        test.assertTrue(0.0 <= y <= spec.y_max)
    for box in state.boxes:
        if box.location is BoxLocation.HELD_BY_ROBOT:
            test.assertEqual(box.pos, state.robot_pos)
        elif box.location is BoxLocation.HELD_BY_HUMAN:
            test.assertEqual(box.pos, state.human_pos)
        elif box.location is BoxLocation.ON_CART:
            test.assertEqual(box.pos, spec.cart_pos)


class ResetTest(unittest.TestCase):
    def test_initial_state(self):
        state, obs_robot, obs_human = reset(SPEC, 0)
        self.assertEqual(state.t, 0)
        self.assertEqual(state.robot_pos, SPEC.robot_spawn)
        self.assertEqual(state.human_pos, SPEC.human_spawn)
        self.assertEqual([b.pos for b in state.boxes], list(SPEC.box_spawns))
        self.assertTrue(all(b.location is BoxLocation.ON_FLOOR for b in state.boxes))
        self.assertFalse(state.terminated or state.truncated)
        self.assertEqual(obs_robot[10], 0.0)
        self.assertEqual(obs_robot[11], 0.0)
        self.assertEqual(obs_human[10], 0.0)

    def test_seed_independent(self):
        s7, r7, h7 = reset(SPEC, 7)
        s13, r13, h13 = reset(SPEC, 13)
        self.assertEqual(s7, s13)
        np.testing.assert_array_equal(r7, r13)
        np.testing.assert_array_equal(h7, h13)


class StepTest(unittest.TestCase):
    def setUp(self):
        self.state, _, _ = reset(SPEC)

    def test_noop_costs_step_penalty(self):
        state, result = step(self.state, SPEC, Action.NOOP, Action.NOOP)
        self.assertEqual(result.reward_robot, -0.005)
        self.assertEqual(state.t, 1)
        self.assertEqual(state.robot_pos, SPEC.robot_spawn)

    def test_pickup(self):
        state = replace(self.state, robot_pos=(1.5, 1.0))
        state, result = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(result.reward_robot, 1 - 0.005)
        self.assertEqual(result.robot_pickups, 1)
        self.assertEqual(state.held_box(Agent.ROBOT), 0)
        self.assertEqual(state.boxes[0].pos, (1.5, 1.0))
        self.assertEqual(result.obs_robot[10], 1.0)
        self.assertEqual(result.obs_human[11], 1.0)

    def test_pickup_out_of_reach(self):
        state = replace(self.state, robot_pos=(2.5, 1.0))
        state, result = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(result.reward_robot, -0.005)
        self.assertIsNone(state.held_box(Agent.ROBOT))

    def test_pickup_at_exact_radius(self):
        state = replace(self.state, robot_pos=(2.0, 1.0))
        state, result = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(result.robot_pickups, 1)

    def test_pickup_prefers_nearest(self):
        boxes = (BoxState(pos=(2.0, 2.0)), BoxState(pos=(2.0, 2.5)))
        state = replace(self.state, robot_pos=(2.0, 2.75), boxes=boxes)
        state, _ = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(state.held_box(Agent.ROBOT), 1)

    def test_pickup_tie_keeps_lower_index(self):
        boxes = (BoxState(pos=(2.0, 2.5)), BoxState(pos=(2.0, 3.5)))
        state = replace(self.state, robot_pos=(2.0, 3.0), boxes=boxes)
        state, _ = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(state.held_box(Agent.ROBOT), 0)

    def test_place_last_box_terminates(self):
        boxes = (
            BoxState(pos=SPEC.cart_pos, location=BoxLocation.ON_CART),
            BoxState(pos=(1.0, 6.5), location=BoxLocation.HELD_BY_ROBOT),
        )
        state = replace(self.state, robot_pos=(1.0, 6.5), boxes=boxes)
        state, result = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(result.reward_robot, 2 - 0.005)
        self.assertTrue(result.terminated)
        self.assertFalse(result.truncated)
        self.assertEqual(state.boxes[1].location, BoxLocation.ON_CART)
        self.assertEqual(state.boxes[1].pos, SPEC.cart_pos)

    def test_place_out_of_reach(self):
        boxes = (
            BoxState(pos=(3.0, 3.0), location=BoxLocation.HELD_BY_ROBOT),
            BoxState(pos=(4.0, 7.0)),
        )
        state = replace(self.state, robot_pos=(3.0, 3.0), boxes=boxes)
        state, result = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(result.reward_robot, -0.005)
        self.assertEqual(state.held_box(Agent.ROBOT), 0)

    def test_boxes_on_cart_stay(self):
        boxes = (
            BoxState(pos=SPEC.cart_pos, location=BoxLocation.ON_CART),
            BoxState(pos=(4.0, 7.0)),
        )
        state = replace(self.state, robot_pos=(1.0, 6.5), boxes=boxes)
        state, result = step(state, SPEC, Action.INTERACT, Action.NOOP)
        self.assertEqual(result.robot_pickups, 0)
        self.assertEqual(state.boxes[0].location, BoxLocation.ON_CART)

    def test_human_clamped_at_road_edge(self):
        state = replace(self.state, human_pos=(SPEC.road_high_edge + 0.1, 4.0))
        state, _ = step(state, SPEC, Action.NOOP, Action.MOVE_LEFT)
        self.assertEqual(state.human_pos, (SPEC.road_high_edge, 4.0))

    def test_robot_clamped_at_road_edge(self):
        state = replace(self.state, robot_pos=(4.9, 4.0))
        state, _ = step(state, SPEC, Action.MOVE_RIGHT, Action.NOOP)
        self.assertEqual(state.robot_pos, (SPEC.road_low_edge, 4.0))

    def test_clamped_at_world_boundary(self):
        state = replace(self.state, robot_pos=(0.1, 7.9))
        state, _ = step(state, SPEC, Action.MOVE_LEFT, Action.NOOP)
        state, _ = step(state, SPEC, Action.MOVE_UP, Action.NOOP)
        self.assertEqual(state.robot_pos, (0.0, 8.0))

    def test_moves(self):
        expected = {
            Action.MOVE_UP: (2.5, 4.25),
            Action.MOVE_DOWN: (2.5, 3.75),
            Action.MOVE_LEFT: (2.25, 4.0),
            Action.MOVE_RIGHT: (2.75, 4.0),
        }
        for action, position in expected.items():
            with self.subTest(action=action):
                state, _ = step(self.state, SPEC, action, Action.NOOP)
                self.assertEqual(state.robot_pos, position)

    def test_held_box_follows_holder(self):
        boxes = (
            BoxState(pos=(2.0, 2.0), location=BoxLocation.HELD_BY_ROBOT),
            BoxState(pos=(4.0, 7.0)),
        )
        state = replace(self.state, robot_pos=(2.0, 2.0), boxes=boxes)
        state, result = step(state, SPEC, Action.MOVE_UP, Action.NOOP)
        self.assertEqual(state.boxes[0].pos, (2.0, 2.25))
        self.assertEqual(result.obs_robot[4], result.obs_robot[0])
        self.assertEqual(result.obs_robot[5], result.obs_robot[1])

    def test_robot_resolves_first(self):
        # both agents are 0.5 from box 0; the human also reaches box 1
        spec = LevelSpec(road_x_range=(4.75, 5.0), interact_radius=3.5)
        boxes = (BoxState(pos=(4.5, 4.0)), BoxState(pos=(4.0, 7.0)))
        state = replace(reset(spec)[0], robot_pos=(4.0, 4.0), human_pos=(5.0, 4.0), boxes=boxes)
        state, result = step(state, spec, Action.INTERACT, Action.INTERACT)
        self.assertEqual(state.held_box(Agent.ROBOT), 0)
        self.assertEqual(state.held_box(Agent.HUMAN), 1)
        self.assertEqual(result.robot_pickups, 1)

    def test_truncation(self):
        spec = LevelSpec(max_steps=3)
        state, _, _ = reset(spec)
        for _ in range(2):
            state, result = step(state, spec, Action.NOOP, Action.NOOP)
            self.assertFalse(result.truncated)
        state, result = step(state, spec, Action.NOOP, Action.NOOP)
        self.assertTrue(result.truncated)
        self.assertFalse(result.terminated)

    def test_termination_wins_over_truncation(self):
        spec = LevelSpec(max_steps=1)
        boxes = (
            BoxState(pos=spec.cart_pos, location=BoxLocation.ON_CART),
            BoxState(pos=(1.0, 6.5), location=BoxLocation.HELD_BY_ROBOT),
        )
        state = replace(reset(spec)[0], robot_pos=(1.0, 6.5), boxes=boxes)
        _, result = step(state, spec, Action.INTERACT, Action.NOOP)
        self.assertTrue(result.terminated)
        self.assertFalse(result.truncated)

    def test_step_after_end(self):
        spec = LevelSpec(max_steps=1)
        state, _, _ = reset(spec)
        state, _ = step(state, spec, Action.NOOP, Action.NOOP)
        with self.assertRaises(UsageError):
            step(state, spec, Action.NOOP, Action.NOOP)

    def test_invalid_action(self):
        with self.assertRaises(UsageError):
            step(self.state, SPEC, 6, Action.NOOP)
        with self.assertRaises(UsageError):
            step(self.state, SPEC, Action.NOOP, -1)

    def test_pure(self):
        a, ra = step(self.state, SPEC, Action.MOVE_LEFT, Action.MOVE_DOWN)
        b, rb = step(self.state, SPEC, Action.MOVE_LEFT, Action.MOVE_DOWN)
        self.assertEqual(a, b)
        np.testing.assert_array_equal(ra.obs_robot, rb.obs_robot)
        self.assertEqual(self.state.t, 0)


class ObserveTest(unittest.TestCase):
    def test_size_and_range(self):
        state, obs_robot, obs_human = reset(SPEC)
        self.assertEqual(obs_robot.shape, (OBSERVATION_SIZE,))
        self.assertEqual(obs_robot.dtype, np.float64)
        self.assertTrue(np.all(np.abs(obs_robot) <= 1.0))
        self.assertTrue(np.all(np.abs(obs_human) <= 1.0))

    def test_world_center(self):
        state = replace(reset(SPEC)[0], robot_pos=(6.0, 4.0))
        obs = observe(state, SPEC, Agent.ROBOT)
        self.assertEqual((obs[0], obs[1]), (0.0, 0.0))

    def test_scaling(self):
        state, obs_robot, _ = reset(SPEC)
        self.assertAlmostEqual(obs_robot[0], 2 * 2.5 / 12 - 1, places=15)
        self.assertEqual(obs_robot[1], 0.0)
        self.assertEqual(obs_robot[8], 2 * 1.0 / 12 - 1)
        self.assertEqual(obs_robot[9], 2 * 7.0 / 8 - 1)

    @given(st.lists(st.tuples(actions, actions), max_size=60))
    def test_egocentric_swap(self, moves):
        state, _ = play(SPEC, [m[0] for m in moves], [m[1] for m in moves])
        robot = observe(state, SPEC, Agent.ROBOT)
        human = observe(state, SPEC, Agent.HUMAN)
        np.testing.assert_array_equal(robot[2:4], human[0:2])
        np.testing.assert_array_equal(robot[0:2], human[2:4])
        np.testing.assert_array_equal(robot[4:10], human[4:10])
        self.assertEqual(robot[10], human[11])
        self.assertEqual(robot[11], human[10])


class EpisodeReturnTest(unittest.TestCase):
    def test_idle_episode(self):
        n = SPEC.max_steps
        state, trace = play(SPEC, [Action.NOOP] * n, [Action.NOOP] * n)
        self.assertEqual(len(trace), 500)
        self.assertTrue(state.truncated)
        self.assertAlmostEqual(episode_return(trace), -2.5, places=12)

    def test_one_pickup_then_frozen(self):
        state = replace(reset(SPEC)[0], robot_pos=(1.5, 1.0))
        trace = []
        state, result = step(state, SPEC, Action.INTERACT, Action.NOOP)
        trace.append(result)
        while not state.done:
            state, result = step(state, SPEC, Action.NOOP, Action.NOOP)
            trace.append(result)
        self.assertEqual(trace_counts(trace), (1, 0))
        self.assertAlmostEqual(episode_return(trace), -1.5, places=12)

    def test_scripted_delivery(self):
        state, _, _ = reset(SPEC)
        trace = []
        while not state.done:
            state, result = step(state, SPEC, greedy_action(state, SPEC), Action.NOOP)
            trace.append(result)
        self.assertTrue(state.terminated)
        self.assertEqual(trace_counts(trace), (2, 2))
        self.assertAlmostEqual(episode_return(trace), 6 - 0.005 * len(trace), places=12)
        self.assertGreaterEqual(len(trace), minimum_delivery_steps(SPEC))

    def test_minimum_delivery_steps(self):
        t_min = minimum_delivery_steps(SPEC)
        # four interactions plus the walking between spawn, boxes and cart
        self.assertGreater(t_min, 4)
        self.assertLess(t_min, SPEC.max_steps)

    def test_unreachable_level(self):
        spec = LevelSpec(max_steps=3)
        with self.assertRaises(UsageError):
            minimum_delivery_steps(spec)


class BlocklandEnvTest(unittest.TestCase):
    def test_wrapper_matches_functions(self):
        env = BlocklandEnv(SPEC)
        state, _, _ = reset(SPEC)
        for a_robot, a_human in [(Action.MOVE_LEFT, Action.MOVE_UP), (Action.INTERACT, Action.NOOP)]:
            result = env.step(a_robot, a_human)
            state, expected = step(state, SPEC, a_robot, a_human)
            self.assertEqual(env.state, state)
            np.testing.assert_array_equal(result.obs_human, expected.obs_human)
        np.testing.assert_array_equal(env.observation(Agent.HUMAN), expected.obs_human)

    def test_restore(self):
        env = BlocklandEnv(SPEC)
        env.step(Action.MOVE_DOWN, Action.MOVE_RIGHT)
        saved = env.state
        env.reset()
        env.restore(type(saved).from_dict(saved.to_dict()))
        self.assertEqual(env.state, saved)
        np.testing.assert_array_equal(env.obs_robot, observe(saved, SPEC, Agent.ROBOT))


class InvariantTest(unittest.TestCase):
    @settings(max_examples=200)
    @given(st.lists(st.tuples(actions, actions), min_size=1, max_size=300))
    def test_random_sequences(self, moves):
        state, _, _ = reset(SPEC)
        trace = []
        for a_robot, a_human in moves:
            state, result = step(state, SPEC, a_robot, a_human)
            trace.append(result)
            assert_consistent(self, state, SPEC)
            self.assertFalse(result.terminated and result.truncated)
            if state.done:
                break
        pickups, places = trace_counts(trace)
        self.assertLessEqual(places, pickups)
        self.assertLessEqual(pickups, 2)

    @unittest.skipUnless(TEST_LONG_SWEEPS, "million-step sweep disabled")
    def test_million_random_steps(self):
        rng = np.random.Generator(np.random.PCG64(20240611))
        t_min = minimum_delivery_steps(SPEC)
        n_steps = 1_000_000
        robot_actions = rng.integers(len(Action), size=n_steps)
        human_actions = rng.integers(len(Action), size=n_steps)
        low, high = SPEC.road_x_range

        state, _, _ = reset(SPEC)
        trace = []
        episodes = 0
        for a_robot, a_human in zip(robot_actions.tolist(), human_actions.tolist()):
            state, result = step(state, SPEC, a_robot, a_human)
            trace.append(result)
            for x, y in (state.robot_pos, state.human_pos):
                if low < x < high or not 0 <= x <= SPEC.x_max or not 0 <= y <= SPEC.y_max:
                    self.fail(f"agent left its side: {state}")
            held = state.held_box(Agent.ROBOT)
            if held is not None and state.boxes[held].pos != state.robot_pos:
                self.fail(f"held box does not follow the robot: {state}")
            if state.done:
                pickups, places = trace_counts(trace)
                expected = pickups * 1.0 + places * 2.0 - 0.005 * len(trace)
                self.assertAlmostEqual(episode_return(trace), expected, delta=1e-9)
                self.assertLessEqual(len(trace), SPEC.max_steps)
                self.assertLessEqual(places, pickups)
                self.assertLessEqual(pickups, 2)
                self.assertLessEqual(episode_return(trace), 6 - 0.005 * t_min + 1e-9)
                episodes += 1
                state, _, _ = reset(SPEC)
                trace = []
        self.assertGreaterEqual(episodes, n_steps // SPEC.max_steps - 1)


if __name__ == "__main__":
    unittest.main()
