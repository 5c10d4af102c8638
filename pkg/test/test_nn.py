#!/usr/bin/env python
# coding: utf-8

"""
Tests the numpy actor-critic networks: initialisation, forward passes,
the categorical head, the exact gradients of the PPO loss and the optimizer.
"""

import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from blockland import TrainingFault, UsageError
from blockland.nn import (
    ACTOR_PARAMETERS,
    CRITIC_PARAMETERS,
    ActorCriticParams,
    AdamState,
    DenseLayer,
    Gradients,
    LossSpec,
    Minibatch,
    adam_update,
    backward,
    clip_global_norm,
    forward_actor,
    forward_critic,
    global_norm,
    init_params,
    log_prob_entropy,
    log_softmax,
    normalize_advantages,
    ppo_loss,
    sample_action,
    softmax,
)
from blockland.util import make_rng

from .config import TEST_LONG_SWEEPS

finite_logits = arrays(
    np.float64, 6, elements=st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
)


def flatten(params):
    return np.concatenate([a.ravel() for a in params.arrays()])


def unflatten(params, vector):
    offset = [0]

    def take(array):
        start = offset[0]
        offset[0] += array.size
        return vector[start : offset[0]].reshape(array.shape).copy()

    return params.map(take)


def perturbed(params, rng, scale=0.3):
    return params.map(lambda a: a + scale * rng.standard_normal(a.shape))


def straight_line_value(params, obs):
    """The critic evaluated with explicit loops."""
    x = list(obs)
    for index, layer in enumerate(params.critic):
        out = []
        for row, bias in zip(layer.weights, layer.biases):
            total = bias
            for w, xi in zip(row, x):
                total += w * xi
            out.append(math.tanh(total) if index < len(params.critic) - 1 else total)
        x = out
    return x[0]


def random_minibatch(params, rng, n=16, log_ratio_spread=0.5):
    obs = rng.uniform(-1, 1, size=(n, params.obs_size))
    actions = rng.integers(params.n_actions, size=n)
    log_p, _ = log_prob_entropy(forward_actor(params, obs), actions)
    old_log_prob = log_p + rng.uniform(-log_ratio_spread, log_ratio_spread, size=n)
    return Minibatch(
        obs=obs,
        actions=actions,
        old_log_prob=old_log_prob,
        advantages=rng.standard_normal(n),
        returns=rng.standard_normal(n),
    )


def scalar_params(theta):
    """Networks with a single weight in the actor and a zero critic."""
    actor = (DenseLayer(np.array([[theta]]), np.zeros(1)),)
    critic = (DenseLayer(np.zeros((1, 1)), np.zeros(1)),)
    return ActorCriticParams(actor=actor, critic=critic)


class InitTest(unittest.TestCase):
    def test_parameter_counts(self):
        params = init_params(0)
        self.assertEqual(params.actor_parameter_count, ACTOR_PARAMETERS)
        self.assertEqual(params.critic_parameter_count, CRITIC_PARAMETERS)
        self.assertEqual(ACTOR_PARAMETERS, 12 * 64 + 64 + 64 * 64 + 64 + 64 * 6 + 6)
        self.assertEqual(CRITIC_PARAMETERS, 12 * 64 + 64 + 64 * 64 + 64 + 64 * 1 + 1)
        self.assertEqual(params.hidden_sizes, (64, 64))
        self.assertEqual(params.n_actions, 6)

    def test_orthogonal(self):
        params = init_params(4)
        gains = [math.sqrt(2), math.sqrt(2), 0.01, math.sqrt(2), math.sqrt(2), 1.0]
        for layer, gain in zip(params.actor + params.critic, gains):
            w = layer.weights
            gram = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
            identity = np.eye(len(gram)) * gain ** 2
            self.assertLess(np.max(np.abs(gram - identity)), 1e-6)

    def test_zero_biases(self):
        for layer in init_params(4).actor + init_params(4).critic:
            self.assertTrue(np.all(layer.biases == 0.0))

    def test_same_seed(self):
        self.assertTrue(init_params(7).equals(init_params(7)))
        self.assertFalse(init_params(7).equals(init_params(8)))

    def test_float64(self):
        for array in init_params(1).arrays():
            self.assertEqual(array.dtype, np.float64)

    def test_inconsistent_layers(self):
        with self.assertRaises(UsageError):
            DenseLayer(np.zeros((3, 2)), np.zeros(2))
        layer = DenseLayer(np.zeros((3, 2)), np.zeros(3))
        with self.assertRaises(UsageError):
            ActorCriticParams(actor=(layer, layer), critic=(layer,))


class ForwardTest(unittest.TestCase):
    def test_zero_params(self):
        params = init_params(0).map(np.zeros_like)
        obs = make_rng(0).uniform(-1, 1, 12)
        np.testing.assert_array_equal(forward_actor(params, obs), np.zeros(6))
        self.assertEqual(forward_critic(params, obs), 0.0)

    def test_zero_obs_gives_zero_outputs(self):
        params = init_params(3)
        np.testing.assert_array_equal(forward_actor(params, np.zeros(12)), np.zeros(6))
        self.assertEqual(forward_critic(params, np.zeros(12)), 0.0)

    def test_straight_line_oracle(self):
        rng = make_rng(5)
        params = perturbed(init_params(5), rng)
        for _ in range(10):
            obs = rng.uniform(-1, 1, 12)
            self.assertAlmostEqual(
                forward_critic(params, obs), straight_line_value(params, obs), delta=1e-12
            )

    def test_batch_matches_single(self):
        rng = make_rng(6)
        params = init_params(6)
        obs = rng.uniform(-1, 1, (5, 12))
        values = forward_critic(params, obs)
        logits = forward_actor(params, obs)
        self.assertEqual(values.shape, (5,))
        self.assertEqual(logits.shape, (5, 6))
        for i in range(5):
            self.assertAlmostEqual(values[i], forward_critic(params, obs[i]), delta=1e-12)
            np.testing.assert_allclose(logits[i], forward_actor(params, obs[i]), atol=1e-12)

    def test_pure(self):
        params = init_params(1)
        obs = make_rng(1).uniform(-1, 1, 12)
        self.assertEqual(forward_actor(params, obs).tobytes(), forward_actor(params, obs).tobytes())

    def test_dimension_mismatch(self):
        with self.assertRaises(UsageError):
            forward_actor(init_params(0), np.zeros(11))
        with self.assertRaises(UsageError):
            forward_critic(init_params(0), np.zeros((2, 13)))


class CategoricalTest(unittest.TestCase):
    def test_uniform(self):
        logits = np.zeros(6)
        np.testing.assert_allclose(softmax(logits), np.full(6, 1 / 6), atol=1e-15)
        _, entropy = log_prob_entropy(logits, 0)
        self.assertAlmostEqual(entropy, math.log(6), delta=1e-12)
        self.assertAlmostEqual(entropy, 1.791759, places=6)

    def test_no_overflow(self):
        logits = np.array([1000.0, 0, 0, 0, 0, 0])
        p = softmax(logits)
        self.assertTrue(np.all(np.isfinite(p)))
        self.assertAlmostEqual(p[0], 1.0, delta=1e-12)
        action, log_p = sample_action(logits, make_rng(0))
        self.assertEqual(action, 0)
        self.assertAlmostEqual(log_p, 0.0, delta=1e-12)

    @given(finite_logits)
    def test_softmax_sums_to_one(self, logits):
        self.assertAlmostEqual(float(np.sum(softmax(logits))), 1.0, delta=1e-12)
        self.assertTrue(np.all(log_softmax(logits) <= 0.0))

    @given(finite_logits, st.integers(min_value=0, max_value=5))
    def test_log_prob(self, logits, action):
        log_p, entropy = log_prob_entropy(logits, action)
        self.assertAlmostEqual(log_p, float(log_softmax(logits)[action]), delta=1e-12)
        self.assertGreaterEqual(entropy, -1e-12)
        self.assertLessEqual(entropy, math.log(6) + 1e-12)

    def test_sampled_log_prob_matches(self):
        rng = make_rng(2)
        logits = rng.standard_normal(6)
        for _ in range(100):
            action, log_p = sample_action(logits, rng)
            self.assertAlmostEqual(log_p, log_prob_entropy(logits, action)[0], delta=1e-12)

    @unittest.skipUnless(TEST_LONG_SWEEPS, "million-draw sweep disabled")
    def test_empirical_frequencies(self):
        rng = make_rng(12)
        logits = np.array([0.5, -1.0, 2.0, 0.0, 0.1, -0.3])
        n = 1_000_000
        counts = np.zeros(6)
        for _ in range(n):
            counts[sample_action(logits, rng)[0]] += 1
        np.testing.assert_allclose(counts / n, softmax(logits), atol=0.002)


class BackwardTest(unittest.TestCase):
    H = 1e-5

    def _check_gradients(self, params, batch, spec):
        _, grads, _ = backward(params, batch, spec)
        analytic = flatten(grads)
        base = flatten(params)
        numeric = np.empty_like(base)
        for i in range(len(base)):
            plus, minus = base.copy(), base.copy()
            plus[i] += self.H
            minus[i] -= self.H
            f_plus = ppo_loss(unflatten(params, plus), batch, spec).loss
            f_minus = ppo_loss(unflatten(params, minus), batch, spec).loss
            numeric[i] = (f_plus - f_minus) / (2 * self.H)
        error = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        self.assertTrue(
            np.all(error <= 1e-4 * scale + 1e-8),
            f"worst relative error {np.max(error / np.maximum(scale, 1e-12))}",
        )

    def test_finite_differences(self):
        rng = make_rng(21)
        for index in range(20):
            params = perturbed(init_params(index, hidden_sizes=(5, 4)), rng)
            batch = random_minibatch(params, rng, n=int(rng.integers(2, 12)))
            with self.subTest(minibatch=index):
                self._check_gradients(params, batch, LossSpec())

    def test_finite_differences_per_term(self):
        rng = make_rng(22)
        params = perturbed(init_params(0, hidden_sizes=(6,)), rng)
        batch = random_minibatch(params, rng)
        terms = {
            "policy": LossSpec(ent_coef=0.0, vf_coef=0.0),
            "value": LossSpec(ent_coef=0.0, vf_coef=1.0, clip_range=1e6),
            "entropy": LossSpec(ent_coef=1.0, vf_coef=0.0, clip_range=1e6),
            "unnormalised": LossSpec(normalize_advantage=False),
        }
        for name, spec in terms.items():
            term_batch = batch
            if name in ("value", "entropy"):
                term_batch = batch._replace(advantages=np.zeros(len(batch.actions)))
            with self.subTest(term=name):
                self._check_gradients(params, term_batch, spec)

    def test_stationary_loss(self):
        rng = make_rng(23)
        params = perturbed(init_params(1, hidden_sizes=(8, 8)), rng)
        batch = random_minibatch(params, rng)
        batch = batch._replace(
            advantages=np.zeros(len(batch.actions)),
            returns=forward_critic(params, batch.obs),
        )
        spec = LossSpec(ent_coef=0.0, normalize_advantage=False)
        _, grads, _ = backward(params, batch, spec)
        self.assertEqual(global_norm(grads), 0.0)

    def test_value_coefficient_linearity(self):
        rng = make_rng(24)
        params = perturbed(init_params(2, hidden_sizes=(8,)), rng)
        batch = random_minibatch(params, rng)
        batch = batch._replace(advantages=np.zeros(len(batch.actions)))
        spec = LossSpec(ent_coef=0.0, vf_coef=0.5, normalize_advantage=False)
        _, single, _ = backward(params, batch, spec)
        _, double, _ = backward(params, batch, spec._replace(vf_coef=1.0))
        for a, b in zip(single.critic, double.critic):
            np.testing.assert_array_equal(2 * a.weights, b.weights)
            np.testing.assert_array_equal(2 * a.biases, b.biases)

    def test_non_finite_loss(self):
        params = init_params(0)
        batch = random_minibatch(params, make_rng(0), n=4)
        batch = batch._replace(returns=np.array([np.inf, 0.0, 0.0, 0.0]))
        with self.assertRaises(TrainingFault) as cm:
            backward(params, batch, LossSpec())
        self.assertIn("value_loss", cm.exception.diagnostics)

    def test_clip_fraction_and_kl(self):
        rng = make_rng(25)
        params = init_params(3)
        batch = random_minibatch(params, rng, n=64, log_ratio_spread=0.0)
        terms = ppo_loss(params, batch, LossSpec())
        self.assertEqual(terms.clip_fraction, 0.0)
        self.assertAlmostEqual(terms.approx_kl, 0.0, delta=1e-15)
        shifted = batch._replace(old_log_prob=batch.old_log_prob - 1.0)
        terms = ppo_loss(params, shifted, LossSpec())
        self.assertEqual(terms.clip_fraction, 1.0)
        self.assertAlmostEqual(terms.approx_kl, -1.0, delta=1e-12)


class NormalizationTest(unittest.TestCase):
    @given(arrays(np.float64, st.integers(2, 64), elements=st.floats(-100, 100)))
    def test_mean_and_std(self, advantages):
        normalized = normalize_advantages(advantages)
        std = advantages.std(ddof=1)
        if std > 1e-3:
            self.assertAlmostEqual(float(np.mean(normalized)), 0.0, delta=1e-9)
            self.assertAlmostEqual(float(normalized.std(ddof=1)), std / (std + 1e-8), delta=1e-9)

    def test_single_sample(self):
        np.testing.assert_array_equal(normalize_advantages(np.array([3.0])), [3.0])


class ClipTest(unittest.TestCase):
    def _grads(self, vector):
        return Gradients.from_tree(unflatten(init_params(0, hidden_sizes=(2,)), vector))

    def test_halved(self):
        size = len(flatten(init_params(0, hidden_sizes=(2,))))
        vector = np.zeros(size)
        vector[0], vector[5] = 0.6, 0.8
        clipped = clip_global_norm(self._grads(vector), 0.5)
        np.testing.assert_allclose(flatten(clipped), vector / 2, atol=1e-16)

    def test_unchanged(self):
        size = len(flatten(init_params(0, hidden_sizes=(2,))))
        vector = np.zeros(size)
        vector[1], vector[-1] = 0.18, 0.24
        grads = self._grads(vector)
        self.assertIs(clip_global_norm(grads, 0.5), grads)

    @settings(max_examples=50)
    @given(st.integers(min_value=0, max_value=2 ** 31), st.floats(0.01, 100.0))
    def test_norm_bound(self, seed, scale):
        rng = make_rng(seed)
        size = len(flatten(init_params(0, hidden_sizes=(2,))))
        clipped = clip_global_norm(self._grads(scale * rng.standard_normal(size)), 0.5)
        self.assertLessEqual(global_norm(clipped), 0.5 * (1 + 1e-12))

    def test_non_positive_max_norm(self):
        with self.assertRaises(UsageError):
            clip_global_norm(init_params(0).zeros_like(), 0.0)


class AdamTest(unittest.TestCase):
    def test_first_step(self):
        params = scalar_params(0.0)
        grads = Gradients.from_tree(scalar_params(1.0))
        new, state = adam_update(params, grads, AdamState.zeros(params), lr=0.001)
        delta = new.actor[0].weights[0, 0]
        self.assertAlmostEqual(delta, -0.001 / (1 + 1e-5), delta=1e-15)
        self.assertAlmostEqual(delta, -9.99990e-4, delta=1e-9)
        self.assertEqual(state.step_count, 1)

    def test_zero_gradients(self):
        params = init_params(3)
        state = AdamState.zeros(params)
        new, state = adam_update(params, params.zeros_like(), state, lr=0.001)
        self.assertTrue(new.equals(params))
        self.assertEqual(state.step_count, 1)

    def test_scalar_oracle(self):
        lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-5
        theta, m, v = 1.0, 0.0, 0.0
        params = scalar_params(theta)
        state = AdamState.zeros(params)
        for t in range(1, 11):
            g = 2.0 * (theta - 3.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)

            current = params.actor[0].weights[0, 0]
            grads = Gradients.from_tree(scalar_params(2.0 * (current - 3.0)))
            params, state = adam_update(params, grads, state, lr)
            self.assertAlmostEqual(params.actor[0].weights[0, 0], theta, delta=1e-12)
        self.assertEqual(state.step_count, 10)

    def test_non_finite_parameters(self):
        params = scalar_params(0.0)
        grads = Gradients.from_tree(scalar_params(np.nan))
        with self.assertRaises(TrainingFault):
            adam_update(params, grads, AdamState.zeros(params), lr=0.001)


if __name__ == "__main__":
    unittest.main()
