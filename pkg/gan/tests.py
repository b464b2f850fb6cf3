import math
import os
import tempfile
from types import SimpleNamespace
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, override_settings

from benchmark.datasets import (
    ClassEmbeddingTable,
    GzslDataset,
    Pool,
    SyntheticSpec,
    make_synthetic,
)
from benchmark.evaluation import EvalConfig
from gan import numcore
from gan.checkpoints import load_checkpoint, save_checkpoint
from gan.exceptions import (
    ConfigError,
    DimensionError,
    NumericError,
    TrainingError,
    UsageError,
)
from gan.losses import (
    LossWeights,
    critic_loss_conditional,
    critic_loss_unconditional,
    cross_branch_generator_loss,
    cross_branch_losses,
    generator_loss_conditional,
    generator_loss_unconditional,
    gradient_penalty,
    interpolate,
    reconstruction_loss,
)
from gan.networks import (
    Layer,
    ModelDims,
    NetworkParams,
    conditional_features,
    dense_network,
    discriminate,
    generate_conditional,
    generate_unconditional,
    init_decgan,
    linear_regressor,
    parameter_count,
    regress_attributes,
    structured_prior,
    topology,
)
from gan.numcore import Rng, Tape, central_difference
from gan.optim import OptimizerState, adam_step
from gan.trainer import (
    ABLATIONS,
    StageRunner,
    Telemetry,
    TrainConfig,
    pretrain_regressor,
    run_pipeline,
    stage1,
    stage2,
    stage3,
    train_models,
)

TINY_DIMS = ModelDims(
    noise_dim=3, prior_dim=4, hidden_dim=8, feature_dim=6, embed_dim=4
)


def tiny_config(**overrides):
    values = dict(
        k=5,
        batch_size=8,
        epochs=(1, 1, 1),
        learning_rate=1e-3,
        seed=0,
        noise_dim=3,
        prior_dim=4,
        hidden_dim=8,
    )
    values.update(overrides)
    return TrainConfig(**values)


def tiny_dataset(seed=0):
    return make_synthetic(
        SyntheticSpec(
            n_seen_classes=3,
            n_unseen_classes=2,
            samples_per_class=20,
            feature_dim=6,
            embed_dim=4,
            seed=seed,
        )
    )


def tiny_models(seed=0, baseline=False, scale=0.3):
    return init_decgan(TINY_DIMS, Rng(seed), scale, baseline=baseline)


def snapshot(params):
    return [array.copy() for array in params.arrays()]


class AffineTest(SimpleTestCase):
    def test_identity_scaling(self):
        out = numcore.affine(np.eye(2), [[3.0, 0.0], [0.0, 3.0]], np.zeros((1, 2)))
        np.testing.assert_array_equal(out.value, [[3.0, 0.0], [0.0, 3.0]])

    def test_hand_sum(self):
        out = numcore.affine([[1.0, 2.0]], [[1.0], [1.0]], [[0.5]])
        np.testing.assert_array_equal(out.value, [[3.5]])

    def test_matches_naive_loop(self):
        rng = Rng(1)
        x, w, b = rng.normal(4, 512), rng.normal(512, 1024), rng.normal(1, 1024)
        out = numcore.affine(x, w, b).value
        naive = np.empty((4, 1024))
        for i in range(4):
            for j in range(1024):
                naive[i, j] = math.fsum(x[i, k] * w[k, j] for k in range(512)) + b[0, j]
        relative = np.abs(out - naive) / np.maximum(np.abs(naive), 1.0)
        self.assertLess(np.max(relative), 1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            numcore.affine(np.ones((1, 3)), np.ones((2, 2)), np.zeros((1, 2)))
        self.assertIn("(1, 3)", str(ctx.exception))
        self.assertIn("(2, 2)", str(ctx.exception))


class ActivationTest(SimpleTestCase):
    def test_leaky_relu_definition(self):
        out = numcore.leaky_relu([[-1.0, 2.0]], 0.2)
        np.testing.assert_array_equal(out.value, [[-0.2, 2.0]])

    def test_leaky_relu_identity_on_nonnegative_input(self):
        x = np.abs(Rng(0).normal(3, 5))
        np.testing.assert_array_equal(numcore.leaky_relu(x, 0.2).value, x)

    def test_leaky_relu_rejects_slope_out_of_range(self):
        for slope in (0.0, 1.0, -0.1, 1.5):
            with self.assertRaises(ConfigError):
                numcore.leaky_relu([[1.0]], slope)

    def test_leaky_relu_gradient_on_negative_branch(self):
        numeric = central_difference(
            lambda p: numcore.leaky_relu(p, 0.2).value[0, 0], np.array([[-3.0]])
        )
        self.assertAlmostEqual(numeric[0, 0], 0.2, delta=1e-6)
        tape = Tape()
        x = tape.watch([[-3.0]])
        grad = tape.backward(numcore.leaky_relu(x, 0.2), [x])[x]
        self.assertEqual(grad.value[0, 0], 0.2)

    def test_leaky_relu_uses_positive_branch_at_zero(self):
        tape = Tape()
        x = tape.watch([[0.0]])
        grad = tape.backward(numcore.leaky_relu(x, 0.2), [x])[x]
        self.assertEqual(grad.value[0, 0], 1.0)

    def test_relu(self):
        np.testing.assert_array_equal(numcore.relu([[-1.0, 2.0]]).value, [[0.0, 2.0]])
        zeros = np.zeros((2, 3))
        np.testing.assert_array_equal(numcore.relu(zeros).value, zeros)

    def test_relu_subgradient_at_zero_is_zero(self):
        tape = Tape()
        x = tape.watch([[0.0]])
        self.assertEqual(tape.backward(numcore.relu(x), [x])[x].value[0, 0], 0.0)


class ConcatTest(SimpleTestCase):
    def test_concat(self):
        joined = numcore.concat_cols([[1.0]], [[2.0]])
        np.testing.assert_array_equal(joined.value, [[1.0, 2.0]])

    def test_split_recovers_operands(self):
        a, b = Rng(0).normal(3, 2), Rng(1).normal(3, 4)
        joined = numcore.concat_cols(a, b)
        np.testing.assert_array_equal(numcore.slice_cols(joined, 0, 2).value, a)
        np.testing.assert_array_equal(numcore.slice_cols(joined, 2, 6).value, b)

    def test_backward_of_sum_gives_ones(self):
        tape = Tape()
        a, b = tape.watch(np.zeros((2, 3))), tape.watch(np.zeros((2, 1)))
        grads = tape.backward(numcore.sum_all(numcore.concat_cols(a, b)), [a, b])
        np.testing.assert_array_equal(grads[a].value, np.ones((2, 3)))
        np.testing.assert_array_equal(grads[b].value, np.ones((2, 1)))

    def test_row_mismatch(self):
        with self.assertRaises(DimensionError):
            numcore.concat_cols(np.ones((2, 1)), np.ones((3, 1)))


class BackwardTest(SimpleTestCase):
    def test_linear_weight_gradient(self):
        x = Rng(0).normal(5, 3)
        tape = Tape()
        w, b = tape.watch(Rng(1).normal(3, 2)), tape.watch(np.zeros((1, 2)))
        grads = tape.backward(numcore.sum_all(numcore.affine(x, w, b)), [w, b])
        np.testing.assert_allclose(grads[w].value, x.T @ np.ones((5, 2)))
        np.testing.assert_allclose(grads[b].value, np.full((1, 2), 5.0))

    def test_root_must_be_scalar(self):
        tape = Tape()
        x = tape.watch(np.ones((2, 2)))
        with self.assertRaises(UsageError):
            tape.backward(numcore.scale(x, 2.0), [x])

    def test_wrt_node_must_be_on_tape(self):
        tape, other = Tape(), Tape()
        x, y = tape.watch([[1.0]]), other.watch([[1.0]])
        with self.assertRaises(UsageError):
            tape.backward(numcore.square(x), [y])

    def test_operands_on_different_tapes(self):
        x, y = Tape().watch([[1.0]]), Tape().watch([[2.0]])
        with self.assertRaises(UsageError):
            numcore.add(x, y)

    def test_repeated_backward_is_identical(self):
        tape = Tape()
        x = tape.watch(Rng(0).normal(3, 3))
        root = numcore.sum_all(numcore.square(numcore.leaky_relu(x, 0.2)))
        first = tape.backward(root, [x])[x].value
        second = tape.backward(root, [x])[x].value
        np.testing.assert_array_equal(first, second)

    def test_unrelated_node_gets_zero_gradient(self):
        tape = Tape()
        x, y = tape.watch([[2.0]]), tape.watch([[5.0, 1.0]])
        grads = tape.backward(numcore.square(x), [x, y])
        np.testing.assert_array_equal(grads[y].value, np.zeros((1, 2)))

    def test_create_graph_records_gradients(self):
        tape = Tape()
        x = tape.watch([[3.0]])
        cube = numcore.mul(numcore.square(x), x)
        grad = tape.backward(cube, [x], create_graph=True)[x]
        self.assertTrue(grad.requires_grad)
        self.assertAlmostEqual(grad.value[0, 0], 27.0)
        second = tape.backward(grad, [x])[x]
        self.assertAlmostEqual(second.value[0, 0], 18.0)

    def test_two_layer_network_matches_finite_differences(self):
        rng = Rng(3)
        net = dense_network("net", [4, 5, 2], ["leaky_relu", "none"], rng, 0.5)
        x = rng.normal(3, 4)
        tape = Tape()
        bound = net.bind(tape)
        grads = tape.backward(numcore.sum_all(bound(x)), bound.nodes)
        for i, node in enumerate(bound.nodes):
            arrays = net.arrays()

            def fn(point, i=i):
                changed = arrays[:i] + [point] + arrays[i + 1 :]
                return numcore.sum_all(net.with_arrays(changed)(x)).value[0, 0]

            numeric = central_difference(fn, arrays[i])
            self.assertLess(numcore.relative_error(grads[node].value, numeric), 1e-5)


class NormTest(SimpleTestCase):
    def test_three_four_five(self):
        np.testing.assert_array_equal(numcore.l2_norm_rows([[3.0, 4.0]]).value, [[5.0]])

    def test_unit_rows(self):
        rows = np.eye(3)
        np.testing.assert_array_equal(numcore.l2_norm_rows(rows).value, np.ones((3, 1)))

    def test_gradient(self):
        numeric = central_difference(
            lambda p: numcore.l2_norm_rows(p).value[0, 0], np.array([[3.0, 4.0]])
        )
        np.testing.assert_allclose(numeric, [[0.6, 0.8]], atol=1e-6)

    def test_zero_row_has_zero_gradient(self):
        tape = Tape()
        x = tape.watch(np.zeros((1, 3)))
        grad = tape.backward(numcore.l2_norm_rows(x), [x])[x].value
        np.testing.assert_array_equal(grad, np.zeros((1, 3)))


class RngTest(SimpleTestCase):
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Rng(7).normal(4, 4), Rng(7).normal(4, 4))

    def test_normal_moments(self):
        draws = Rng(11).normal(100000, 1)
        self.assertLess(abs(draws.mean()), 0.05)
        self.assertLess(abs(draws.var() - 1.0), 0.1)

    def test_spawned_streams_differ(self):
        rng = Rng(5)
        first, second = rng.spawn(1).normal(2, 2), rng.spawn(2).normal(2, 2)
        self.assertFalse(np.array_equal(first, second))
        np.testing.assert_array_equal(first, Rng(5).spawn(1).normal(2, 2))

    def test_draw_counter(self):
        rng = Rng(0)
        rng.normal(2, 3)
        rng.permutation(4)
        self.assertEqual(rng.draws, 10)


class NetworkTest(SimpleTestCase):
    def test_topology_shapes(self):
        models = tiny_models()
        self.assertEqual(models.g1.layers[0].weight.shape, (3, 4))
        self.assertEqual(
            [layer.activation for layer in models.g2.layers], ["leaky_relu", "relu"]
        )
        self.assertEqual(models.gc.in_dim, 4 + 4)
        self.assertEqual(models.dc.in_dim, 6 + 4)
        self.assertEqual(models.d0.out_dim, 1)
        self.assertEqual(
            [layer.activation for layer in models.d0.layers], ["leaky_relu", "none"]
        )

    def test_cub_topology_widths(self):
        networks = topology(ModelDims.for_dataset("CUB"))
        self.assertEqual(networks["g1"][0], [512, 1024])
        self.assertEqual(networks["dc"][0][0], 2360)

    def test_parameter_counts_under_cub_dims(self):
        networks = topology(ModelDims.for_dataset("CUB"))
        expected = {
            "g1": 512 * 1024 + 1024,
            "g2": 1024 * 4096 + 4096 + 4096 * 2048 + 2048,
            "gc": (1024 + 312) * 4096 + 4096 + 4096 * 2048 + 2048,
            "d0": 2048 * 4096 + 4096 + 4096 + 1,
            "dc": (2048 + 312) * 4096 + 4096 + 4096 + 1,
        }
        for name, count in expected.items():
            self.assertEqual(parameter_count(networks[name][0]), count, name)

    def test_init_matches_topology_count(self):
        models = tiny_models()
        for name, (widths, _) in topology(TINY_DIMS).items():
            self.assertEqual(getattr(models, name).count(), parameter_count(widths))

    def test_biases_start_at_zero(self):
        for params in tiny_models().networks().values():
            for layer in params.layers:
                np.testing.assert_array_equal(layer.bias, np.zeros_like(layer.bias))

    def test_zero_scale_gives_zero_features(self):
        models = init_decgan(TINY_DIMS, Rng(0), 0.0)
        out = generate_unconditional(models.g1, models.g2, Rng(1).normal(5, 3))
        np.testing.assert_array_equal(out.value, np.zeros((5, 6)))

    def test_composition_identity(self):
        models = tiny_models()
        z = Rng(2).normal(7, 3)
        composed = models.g2(structured_prior(models.g1, z))
        out = generate_unconditional(models.g1, models.g2, z)
        np.testing.assert_array_equal(out.value, composed.value)

    def test_structured_prior(self):
        models = tiny_models()
        prior = structured_prior(models.g1, np.zeros((2, 3)))
        np.testing.assert_array_equal(prior.value, np.zeros((2, 4)))
        self.assertEqual(structured_prior(models.g1, Rng(0).normal(7, 3)).shape, (7, 4))

    def test_generators_are_nonnegative(self):
        models = tiny_models()
        z = Rng(3).normal(1000, 3)
        unconditional = generate_unconditional(models.g1, models.g2, z)
        self.assertGreaterEqual(unconditional.value.min(), 0.0)
        c = Rng(4).uniform(1000, 4)
        self.assertGreaterEqual(conditional_features(models, z, c).value.min(), 0.0)

    def test_conditional_rows_are_independent(self):
        models = tiny_models()
        s = np.repeat(Rng(0).normal(1, 4), 2, axis=0)
        c = np.repeat(Rng(1).uniform(1, 4), 2, axis=0)
        out = generate_conditional(models.gc, s, c).value
        np.testing.assert_array_equal(out[0], out[1])

    def test_embedding_changes_conditional_output(self):
        wide = ModelDims(
            noise_dim=3, prior_dim=4, hidden_dim=64, feature_dim=32, embed_dim=4
        )
        for seed in range(10):
            models = init_decgan(wide, Rng(seed), 0.3)
            s = Rng(seed).normal(1, 4)
            c1, c2 = Rng(100 + seed).uniform(1, 4), Rng(200 + seed).uniform(1, 4)
            first = generate_conditional(models.gc, s, c1).value
            second = generate_conditional(models.gc, s, c2).value
            self.assertFalse(np.array_equal(first, second))

    def test_discriminate_batch_of_one_matches_batch_row(self):
        models = tiny_models()
        x = Rng(0).normal(4, 6)
        batch = discriminate(models.d0, x).value
        single = discriminate(models.d0, x[2:3]).value
        np.testing.assert_allclose(single[0], batch[2], rtol=0, atol=1e-14)

    def test_regressor(self):
        regressor = linear_regressor(Rng(0).normal(6, 4))
        origin = regress_attributes(regressor, np.zeros((1, 6)))
        np.testing.assert_array_equal(origin.value, np.zeros((1, 4)))
        x1, x2 = Rng(1).normal(2, 6), Rng(2).normal(2, 6)
        np.testing.assert_allclose(
            regress_attributes(regressor, x1 + x2).value,
            regress_attributes(regressor, x1).value
            + regress_attributes(regressor, x2).value,
        )

    def test_regressor_must_be_single_affine_layer(self):
        with self.assertRaises(ConfigError):
            regress_attributes(tiny_models().d0, np.zeros((1, 6)))

    def test_layers_must_chain(self):
        with self.assertRaises(DimensionError):
            NetworkParams(
                "broken",
                (
                    Layer(np.ones((2, 3)), np.zeros((1, 3))),
                    Layer(np.ones((4, 1)), np.zeros((1, 1))),
                ),
            )

    def test_parameters_must_be_finite(self):
        with self.assertRaises(NumericError):
            NetworkParams("nan", (Layer(np.full((2, 2), np.nan), np.zeros((1, 2))),))

    def test_dims_must_be_positive(self):
        with self.assertRaises(ConfigError):
            ModelDims(noise_dim=0)

    @override_settings(DECGAN={"MODEL": {"noise_dim": 8, "prior_dim": 16}})
    def test_dims_from_settings(self):
        dims = ModelDims.from_settings(embed_dim=102)
        self.assertEqual((dims.noise_dim, dims.prior_dim, dims.embed_dim), (8, 16, 102))
        self.assertEqual(dims.feature_dim, 2048)

    def test_baseline_has_no_unconditional_generator(self):
        models = tiny_models(baseline=True)
        self.assertIsNone(models.g1)
        self.assertEqual(models.noise_width, 4)
        out = conditional_features(models, Rng(0).normal(3, 4), Rng(1).uniform(3, 4))
        self.assertEqual(out.shape, (3, 6))


class LossTest(SimpleTestCase):
    def setUp(self):
        self.weights = LossWeights()

    def linear_critic(self, w):
        w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
        return NetworkParams("d0", (Layer(w, np.zeros((1, 1)), "none"),))

    def test_linear_critic_penalty_closed_form(self):
        rng = Rng(0)
        for _ in range(5):
            w = rng.normal(5, 1)
            penalty = gradient_penalty(self.linear_critic(w), rng.normal(4, 5))
            expected = (np.linalg.norm(w) - 1.0) ** 2
            self.assertAlmostEqual(penalty.value[0, 0], expected, delta=1e-10)

    def test_unit_critic_has_zero_penalty(self):
        w = np.array([0.6, 0.8])
        penalty = gradient_penalty(self.linear_critic(w), Rng(0).normal(3, 2))
        self.assertAlmostEqual(penalty.value[0, 0], 0.0, delta=1e-15)

    def test_penalty_matches_input_gradient_norm(self):
        critic = dense_network("d0", [3, 5, 1], ["leaky_relu", "none"], Rng(1), 0.7)
        x_hat = Rng(2).normal(1, 3)
        grad = central_difference(lambda p: critic(p).value[0, 0], x_hat)
        expected = (np.linalg.norm(grad) - 1.0) ** 2
        penalty = gradient_penalty(critic, x_hat)
        self.assertAlmostEqual(penalty.value[0, 0], expected, delta=1e-6)

    def test_interpolation_endpoints_and_convexity(self):
        real, fake = Rng(0).normal(4, 3), Rng(1).normal(4, 3)
        at_real = interpolate(real, fake, None, alpha=np.ones(4))
        at_fake = interpolate(real, fake, None, alpha=np.zeros(4))
        np.testing.assert_array_equal(at_real.value, real)
        np.testing.assert_array_equal(at_fake.value, fake)
        mixed = interpolate(real, fake, Rng(2)).value
        self.assertTrue(np.all(mixed >= np.minimum(real, fake) - 1e-15))
        self.assertTrue(np.all(mixed <= np.maximum(real, fake) + 1e-15))

    def test_interpolate_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            interpolate(np.ones((2, 3)), np.ones((3, 3)), Rng(0))

    def test_zero_critic(self):
        critic = init_decgan(TINY_DIMS, Rng(0), 0.0).d0
        real, fake = Rng(1).normal(4, 6), Rng(2).normal(4, 6)
        loss = critic_loss_unconditional(critic, real, fake, self.weights, Rng(3))
        self.assertEqual(loss.wasserstein, 0.0)
        self.assertAlmostEqual(loss.total.value[0, 0], self.weights.gp_lambda)
        self.assertEqual(generator_loss_unconditional(critic, fake).value[0, 0], 0.0)

    def test_stubbed_critic_wasserstein_term(self):
        critic = self.linear_critic([1.0])
        real, fake = [[2.0], [4.0]], [[1.0], [1.0]]
        loss = critic_loss_unconditional(critic, real, fake, self.weights, Rng(0))
        self.assertEqual(loss.wasserstein, -2.0)

    def test_generator_loss_sign(self):
        critic = self.linear_critic([1.0])
        low = generator_loss_unconditional(critic, [[1.0], [1.0]]).value[0, 0]
        high = generator_loss_unconditional(critic, [[3.0], [3.0]]).value[0, 0]
        self.assertLess(high, low)

    def test_doubling_gp_lambda_doubles_penalty_contribution(self):
        critic = dense_network("d0", [6, 8, 1], ["leaky_relu", "none"], Rng(0), 0.3)
        real, fake = Rng(1).normal(4, 6), Rng(2).normal(4, 6)
        single = critic_loss_unconditional(
            critic, real, fake, LossWeights(10.0), Rng(9)
        )
        double = critic_loss_unconditional(
            critic, real, fake, LossWeights(20.0), Rng(9)
        )
        self.assertAlmostEqual(
            double.total.value[0, 0] - single.total.value[0, 0],
            10.0 * single.penalty,
            delta=1e-12,
        )

    def test_conditional_reduces_to_unconditional(self):
        critic = dense_network("d0", [6, 8, 1], ["leaky_relu", "none"], Rng(0), 0.3)
        real, fake = Rng(1).normal(4, 6), Rng(2).normal(4, 6)
        unconditional = critic_loss_unconditional(
            critic, real, fake, self.weights, Rng(5)
        )
        conditional = critic_loss_conditional(
            critic, real, fake, np.zeros((4, 0)), self.weights, Rng(5)
        )
        self.assertEqual(unconditional.total.value[0, 0], conditional.total.value[0, 0])

    def test_zero_conditional_critic(self):
        critic = init_decgan(TINY_DIMS, Rng(0), 0.0).dc
        real, fake, c = Rng(1).normal(4, 6), Rng(2).normal(4, 6), Rng(3).uniform(4, 4)
        loss = critic_loss_conditional(critic, real, fake, c, self.weights, Rng(4))
        self.assertAlmostEqual(loss.total.value[0, 0], self.weights.gp_lambda)

    def test_reconstruction(self):
        regressor = linear_regressor(np.zeros((2, 2)))
        weights = LossWeights(rec_beta=0.25)
        loss = reconstruction_loss(regressor, [[5.0, 7.0]], [[1.0, 0.0]], weights)
        self.assertEqual(loss.value[0, 0], 0.25)
        identity = linear_regressor(np.eye(2))
        loss = reconstruction_loss(identity, [[1.0, 0.0]], [[1.0, 0.0]], weights)
        self.assertEqual(loss.value[0, 0], 0.0)

    def test_reconstruction_gradient(self):
        weight = Rng(0).normal(3, 2)
        regressor = linear_regressor(weight)
        x, c = Rng(1).normal(1, 3), Rng(2).normal(1, 2)
        tape = Tape()
        point = tape.watch(x)
        loss = reconstruction_loss(regressor, point, c, self.weights)
        grad = tape.backward(loss, [point])[point].value
        expected = self.weights.rec_beta * 2.0 * (x @ weight - c) @ weight.T
        np.testing.assert_allclose(grad, expected, rtol=1e-12)

    def test_cross_branch_matches_unconditional_form(self):
        critic = dense_network("d0", [6, 8, 1], ["leaky_relu", "none"], Rng(0), 0.3)
        real, fake = Rng(1).normal(4, 6), Rng(2).normal(4, 6)
        cross = cross_branch_losses(critic, real, fake, self.weights, Rng(7))
        plain = critic_loss_unconditional(critic, real, fake, self.weights, Rng(7))
        self.assertEqual(cross.critic.total.value[0, 0], plain.total.value[0, 0])
        generator = generator_loss_unconditional(critic, fake)
        self.assertEqual(cross.generator.value[0, 0], generator.value[0, 0])

    def assert_parameter_gradients(self, network, loss):
        tape = Tape()
        bound = network.bind(tape)
        grads = bound.gradients(tape.backward(loss(bound), bound.nodes))
        arrays = network.arrays()
        for i, grad in enumerate(grads):

            def fn(point, i=i):
                changed = network.with_arrays(arrays[:i] + [point] + arrays[i + 1 :])
                return loss(changed).value[0, 0]

            numeric = central_difference(fn, arrays[i])
            self.assertLess(numcore.relative_error(grad, numeric), 1e-4)

    def test_conditional_critic_parameter_gradient(self):
        critic = dense_network("dc", [6, 5, 1], ["leaky_relu", "none"], Rng(0), 0.5)
        real, fake = np.abs(Rng(1).normal(3, 4)), np.abs(Rng(2).normal(3, 4))
        c = Rng(3).uniform(3, 2)
        self.assert_parameter_gradients(
            critic,
            lambda dc: critic_loss_conditional(
                dc, real, fake, c, self.weights, Rng(9)
            ).total,
        )

    def test_generator_parameter_gradients(self):
        gc = dense_network("gc", [5, 6, 4], ["leaky_relu", "relu"], Rng(4), 0.5)
        g2 = dense_network("g2", [3, 6, 4], ["leaky_relu", "relu"], Rng(5), 0.5)
        dc = dense_network("dc", [6, 5, 1], ["leaky_relu", "none"], Rng(6), 0.5)
        d0 = dense_network("d0", [4, 5, 1], ["leaky_relu", "none"], Rng(7), 0.5)
        regressor = linear_regressor(Rng(8).normal(4, 2))
        s, c = Rng(9).normal(3, 3), Rng(10).uniform(3, 2)
        weights = LossWeights(rec_beta=0.5)

        def conditional(network):
            fake = generate_conditional(network, s, c)
            rec = reconstruction_loss(regressor, fake, c, weights)
            return generator_loss_conditional(dc, fake, c) + rec

        def cross(network):
            fake = generate_conditional(network, s, c)
            return cross_branch_generator_loss(d0, fake)

        self.assert_parameter_gradients(gc, conditional)
        self.assert_parameter_gradients(gc, cross)
        self.assert_parameter_gradients(
            g2, lambda network: generator_loss_unconditional(d0, network(s))
        )

    def test_penalty_is_nonnegative(self):
        rng = Rng(4)
        for seed in range(5):
            critic = dense_network(
                "d0", [3, 4, 1], ["leaky_relu", "none"], Rng(seed), 0.5
            )
            penalty = gradient_penalty(critic, rng.normal(5, 3))
            self.assertGreaterEqual(penalty.value[0, 0], 0.0)

    def test_minimizing_critic_loss_widens_the_gap(self):
        # real rows around +1, fake rows around -1
        rng = Rng(0)
        critic = dense_network("d0", [2, 8, 1], ["leaky_relu", "none"], rng, 0.1)
        real, fake = rng.normal(32, 2, 0.1) + 1.0, rng.normal(32, 2, 0.1) - 1.0
        config = SimpleNamespace(
            learning_rate=1e-2, adam_beta1=0.5, adam_beta2=0.9, adam_eps=1e-8
        )
        state, gaps = OptimizerState(), []
        for _ in range(200):
            tape = Tape()
            bound = critic.bind(tape)
            loss = critic_loss_unconditional(bound, real, fake, self.weights, rng)
            grads = bound.gradients(tape.backward(loss.total, bound.nodes))
            arrays, state = adam_step(critic.arrays(), grads, state, config)
            critic = critic.with_arrays(arrays)
            gaps.append(-loss.wasserstein)
        self.assertGreater(np.mean(gaps[-20:]), np.mean(gaps[:20]))


class AdamTest(SimpleTestCase):
    config = SimpleNamespace(
        learning_rate=0.1, adam_beta1=0.5, adam_beta2=0.9, adam_eps=1e-8
    )

    def test_zero_gradient_leaves_parameters(self):
        params = [np.array([[1.0, -2.0]])]
        new, state = adam_step(
            params, [np.zeros((1, 2))], OptimizerState(), self.config
        )
        np.testing.assert_array_equal(new[0], params[0])
        self.assertEqual(state.step, 1)

    def test_first_step_moves_by_learning_rate(self):
        new, _ = adam_step(
            [np.array([[0.0]])], [np.array([[1.0]])], OptimizerState(), self.config
        )
        self.assertAlmostEqual(new[0][0, 0], -0.1, delta=1e-6)

    def test_converges_on_quadratic(self):
        w, state = [np.array([[0.0]])], OptimizerState()
        for _ in range(50):
            w, state = adam_step(w, [2.0 * (w[0] - 3.0)], state, self.config)
        self.assertLess(abs(w[0][0, 0] - 3.0), 0.1)

    def test_non_finite_gradient_names_parameter(self):
        with self.assertRaises(TrainingError) as ctx:
            adam_step(
                [np.zeros((1, 1))],
                [np.array([[np.inf]])],
                OptimizerState(),
                self.config,
                names=["gc.0.weight"],
            )
        self.assertEqual(ctx.exception.parameter, "gc.0.weight")

    def test_inputs_are_not_mutated(self):
        params = [np.ones((2, 2))]
        adam_step(params, [np.ones((2, 2))], OptimizerState(), self.config)
        np.testing.assert_array_equal(params[0], np.ones((2, 2)))


class RegressorTest(SimpleTestCase):
    def test_recovers_exact_linear_map(self):
        rng = Rng(0)
        x, m, b = rng.normal(40, 6), rng.normal(6, 4), rng.normal(1, 4)
        c = x @ m + b
        regressor = pretrain_regressor(x, c, ridge=0.0)
        np.testing.assert_allclose(regress_attributes(regressor, x).value, c, atol=1e-8)

    def test_large_ridge_shrinks_weights(self):
        rng = Rng(1)
        x = rng.normal(30, 5)
        regressor = pretrain_regressor(x, rng.normal(30, 3), ridge=1e12)
        self.assertLess(np.max(np.abs(regressor.layers[0].weight)), 1e-8)

    def test_singular_system_advises_ridge(self):
        x = Rng(2).normal(10, 3)
        x = np.hstack([x, x[:, :1]])
        with self.assertRaises(NumericError) as ctx:
            pretrain_regressor(x, Rng(3).normal(10, 2), ridge=0.0)
        self.assertIn("ridge > 0", str(ctx.exception))

    def test_matches_gradient_descent(self):
        rng = Rng(4)
        x = rng.normal(40, 3)
        c = x @ rng.normal(3, 2) + rng.normal(40, 2, 0.3)
        ridge = 0.5
        design = np.hstack([x, np.ones((40, 1))])

        def objective(weight, bias):
            return np.sum((c - x @ weight - bias) ** 2) + ridge * np.sum(weight ** 2)

        weight, bias = np.zeros((3, 2)), np.zeros((1, 2))
        step = 1.0 / (2.0 * np.linalg.norm(design, 2) ** 2 + 2.0 * ridge)
        for _ in range(5000):
            residual = x @ weight + bias - c
            weight = weight - step * (2.0 * x.T @ residual + 2.0 * ridge * weight)
            bias = bias - step * 2.0 * residual.sum(axis=0, keepdims=True)
        closed = pretrain_regressor(x, c, ridge).layers[0]
        gap = objective(closed.weight, closed.bias) - objective(weight, bias)
        self.assertLess(abs(gap), 1e-4)


class StageRunnerTest(SimpleTestCase):
    def setUp(self):
        self.config = tiny_config()
        models = tiny_models()
        self.dataset = tiny_dataset()
        seen = self.dataset.seen_train
        targets = self.dataset.embeddings.rows(seen.labels)
        regressor = pretrain_regressor(seen.features, targets, 1.0)
        self.models = models.replace(regressor=regressor)
        self.real = seen.features[:8]
        self.c = self.dataset.embeddings.rows(seen.labels[:8])

    def runner(self, stage=1, config=None):
        config = config or self.config
        return StageRunner(self.models, config, Rng(1), Telemetry(), stage)

    def assert_zero(self, grads):
        for array in grads:
            np.testing.assert_array_equal(array, np.zeros_like(array))

    def test_critic_step_leaves_generators_without_gradient(self):
        grads = self.runner().critic_step_unconditional(self.real)
        self.assert_zero(grads["g1"])
        self.assert_zero(grads["g2"])
        self.assertTrue(any(np.any(g != 0) for g in grads["d0"]))

    def test_generator_step_leaves_critic_without_gradient(self):
        grads = self.runner().generator_step_unconditional(8)
        self.assert_zero(grads["d0"])

    def test_conditional_steps_block_the_prior(self):
        runner = self.runner()
        critic_grads = runner.critic_step_conditional(self.real, self.c)
        self.assert_zero(critic_grads["gc"])
        self.assert_zero(critic_grads["g1"])
        generator_grads = runner.generator_step_conditional(self.real, self.c)
        self.assert_zero(generator_grads["dc"])
        self.assert_zero(generator_grads["g1"])

    def test_prior_gradient_switch(self):
        config = tiny_config(prior_grad_in_conditional=True)
        runner = self.runner(config=config)
        before = snapshot(self.models.g1)
        grads = runner.generator_step_conditional(self.real, self.c)
        self.assertTrue(any(np.any(g != 0) for g in grads["g1"]))
        after = runner.models.g1.arrays()
        self.assertFalse(all(np.array_equal(a, b) for a, b in zip(before, after)))

    def test_cross_generator_step_touches_only_gc(self):
        unseen = self.dataset.unseen_pool[:8]
        embeddings = self.dataset.training_view().unseen_embeddings()
        grads = self.runner(stage=3).generator_step_cross(unseen, embeddings)
        for name in ("d0", "dc", "g1"):
            self.assert_zero(grads[name])
        self.assertTrue(any(np.any(g != 0) for g in grads["gc"]))

    def test_critic_steps_keep_the_generator_off_the_tape(self):
        watched = []
        watch = Tape.watch

        def record(tape, value, name=None):
            watched.append(name or "")
            return watch(tape, value, name)

        unseen = self.dataset.unseen_pool[:8]
        embeddings = self.dataset.training_view().unseen_embeddings()
        with mock.patch.object(Tape, "watch", autospec=True, side_effect=record):
            self.runner().critic_step_conditional(self.real, self.c)
            grads = self.runner(stage=3).critic_step_cross(unseen, embeddings)
        generators = ("gc.", "g1.", "g2.")
        self.assertFalse([name for name in watched if name.startswith(generators)])
        self.assertIn("dc.0.weight", watched)
        self.assertIn("d0.0.weight", watched)
        self.assert_zero(grads["gc"])

    def test_reconstruction_targets(self):
        runner = self.runner(config=tiny_config(reconstruction_target="interpolated"))
        runner.generator_step_conditional(self.real, self.c)
        self.assertEqual(len(runner.telemetry.values(1, "gc_reconstruction")), 1)

    def test_missing_regressor(self):
        self.models = self.models.replace(regressor=None)
        with self.assertRaises(ConfigError):
            self.runner().generator_step_conditional(self.real, self.c)


class StageTest(SimpleTestCase):
    def setUp(self):
        self.config = tiny_config()
        self.dataset = tiny_dataset()
        self.view = self.dataset.training_view()
        seen = self.view.seen_pool()
        targets = self.view.embeddings.rows(seen.labels)
        regressor = pretrain_regressor(seen.features, targets, 1.0)
        self.models = tiny_models().replace(regressor=regressor)
        self.seen_data = (seen, self.view.embeddings)

    def assert_unchanged(self, trained, names):
        for name in names:
            before = getattr(self.models, name).arrays()
            for old, new in zip(before, getattr(trained, name).arrays()):
                np.testing.assert_array_equal(old, new)

    def test_stage1_update_counts(self):
        telemetry = Telemetry()
        stage1(self.models, self.seen_data, self.config, Rng(0), telemetry)
        batches = self.view.seen_train.features.shape[0] // self.config.batch_size
        self.assertEqual(telemetry.updates[(1, "d0")], 5 * batches)
        self.assertEqual(telemetry.updates[(1, "g0")], batches)
        self.assertEqual(telemetry.updates[(1, "dc")], 5 * batches)
        self.assertEqual(telemetry.updates[(1, "gc")], batches)

    def test_stage1_with_zero_learning_rate_changes_nothing(self):
        config = tiny_config(learning_rate=0.0)
        trained = stage1(self.models, self.seen_data, config, Rng(0))
        self.assert_unchanged(trained, self.models.networks())

    def test_stage1_rejects_empty_data(self):
        empty = Pool(np.zeros((0, 6)), np.zeros(0, dtype=np.int64))
        with self.assertRaises(ConfigError):
            stage1(self.models, (empty, self.view.embeddings), self.config, Rng(0))

    def test_stage2_isolation_and_counts(self):
        telemetry = Telemetry()
        trained = stage2(
            self.models, self.view.unseen_features, self.config, Rng(0), telemetry
        )
        self.assert_unchanged(trained, ("gc", "dc", "regressor"))
        self.assertFalse(
            np.array_equal(self.models.d0.arrays()[0], trained.d0.arrays()[0])
        )
        self.assertEqual(
            telemetry.updates[(2, "d0")], 5 * telemetry.updates[(2, "g0")]
        )

    def test_stage2_rejects_empty_pool(self):
        with self.assertRaises(ConfigError):
            stage2(self.models, np.zeros((0, 6)), self.config, Rng(0))

    def test_stage3_isolation_and_counts(self):
        telemetry = Telemetry()
        trained = stage3(
            self.models,
            self.view.unseen_features,
            self.view.unseen_embeddings(),
            self.config,
            Rng(0),
            telemetry,
        )
        self.assert_unchanged(trained, ("g1", "g2", "dc", "regressor"))
        self.assertFalse(
            np.array_equal(self.models.gc.arrays()[0], trained.gc.arrays()[0])
        )
        self.assertEqual(
            telemetry.updates[(3, "d0")], 5 * telemetry.updates[(3, "gc")]
        )
        self.assertGreater(telemetry.updates[(3, "gc")], 0)

    def test_stage3_needs_unseen_embeddings(self):
        with self.assertRaises(ConfigError):
            stage3(self.models, self.view.unseen_features, None, self.config, Rng(0))

    def test_baseline_skips_stage2(self):
        baseline = TrainConfig.for_ablation("baseline", self.config)
        self.assertEqual(baseline.stages(), [1, 3])
        with self.assertRaises(ConfigError):
            stage2(
                tiny_models(baseline=True),
                self.view.unseen_features,
                self.config,
                Rng(0),
            )


class TwoClusterStageTest(SimpleTestCase):
    """G0 means on two seen clusters, then on an unseen pool shifted by +2."""

    seeds = range(5)
    seen_means = np.array([[1.0, 0.5, 1.0, 0.5], [0.5, 1.0, 0.5, 1.0]])

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.runs = [cls.train(seed) for seed in cls.seeds]

    @classmethod
    def train(cls, seed):
        rng = Rng(seed)
        config = tiny_config(
            noise_dim=4,
            prior_dim=8,
            hidden_dim=16,
            epochs=(25, 20, 0),
            learning_rate=5e-3,
            init_scale=0.1,
            seed=seed,
        )
        labels = np.repeat([0, 1], 32)
        seen = cls.seen_means[labels] + rng.normal(64, 4, std=0.1)
        unseen = cls.seen_means[labels] + 2.0 + rng.normal(64, 4, std=0.1)
        table = ClassEmbeddingTable([0, 1], np.eye(2))
        models = init_decgan(config.dims_for(4, 2), rng.spawn(0), config.init_scale)
        regressor = pretrain_regressor(seen, table.rows(labels), 1.0)
        models = models.replace(regressor=regressor)
        z = rng.normal(2048, config.noise_dim)

        def generated_mean():
            return generate_unconditional(models.g1, models.g2, z).value.mean(axis=0)

        models = stage1(models, (Pool(seen, labels), table), config, rng.spawn(1))
        after_stage1 = generated_mean()
        models = stage2(models, unseen, config, rng.spawn(2))
        pooled = np.vstack([seen, unseen]).mean(axis=0)
        return seen.mean(axis=0), pooled, after_stage1, generated_mean()

    def test_stage1_matches_the_seen_mean(self):
        seen = np.mean([run[0] for run in self.runs], axis=0)
        generated = np.mean([run[2] for run in self.runs], axis=0)
        self.assertTrue(np.all(np.abs(generated - seen) <= 0.5), (generated, seen))

    def test_stage2_moves_toward_the_pooled_mean(self):
        before = np.mean([np.linalg.norm(run[2] - run[1]) for run in self.runs])
        after = np.mean([np.linalg.norm(run[3] - run[1]) for run in self.runs])
        self.assertLess(after, before)


class PipelineTest(SimpleTestCase):
    eval_config = EvalConfig(n_per_class=20, epochs=50)

    def test_every_stage_keeps_the_k_to_one_ratio(self):
        telemetry = Telemetry()
        view = tiny_dataset().training_view()
        train_models(view, tiny_config(epochs=(2, 2, 2)), telemetry)
        pairs = ((1, "d0", "g0"), (1, "dc", "gc"), (2, "d0", "g0"), (3, "d0", "gc"))
        for stage, critic, generator in pairs:
            generator_updates = telemetry.updates[(stage, generator)]
            self.assertGreater(generator_updates, 0)
            self.assertEqual(telemetry.updates[(stage, critic)], 5 * generator_updates)

    def test_training_never_reads_unseen_labels(self):
        dataset = tiny_dataset()
        view = dataset.training_view()
        self.assertFalse(hasattr(view, "unseen_pool_labels"))
        with mock.patch.object(
            GzslDataset,
            "unseen_pool_labels",
            new_callable=mock.PropertyMock,
            side_effect=AssertionError("unseen labels read during training"),
        ) as guard:
            train_models(view, tiny_config())
        guard.assert_not_called()

    def test_stage_mask_selects_stages(self):
        seen = []
        train_models(
            tiny_dataset().training_view(),
            TrainConfig.for_ablation("-Stg2", tiny_config()),
            on_stage_end=lambda stage, models: seen.append(stage),
        )
        self.assertEqual(seen, [1, 3])

    def test_ablation_table(self):
        self.assertEqual(ABLATIONS["Stg1"], (frozenset({1}), False))
        self.assertEqual(ABLATIONS["-Stg1"], (frozenset({2, 3}), False))
        self.assertEqual(ABLATIONS["baseline"][1], True)
        with self.assertRaises(ConfigError):
            TrainConfig.for_ablation("Stg2")

    def test_fixed_seed_is_deterministic(self):
        first = run_pipeline(tiny_dataset(), tiny_config(), self.eval_config)
        second = run_pipeline(tiny_dataset(), tiny_config(), self.eval_config)
        self.assertEqual(first.metrics.per_class_acc, second.metrics.per_class_acc)
        self.assertEqual(first.telemetry.records, second.telemetry.records)

    def test_baseline_pipeline_runs(self):
        config = TrainConfig.for_ablation("baseline", tiny_config())
        result = run_pipeline(tiny_dataset(), config, self.eval_config)
        self.assertIsNone(result.models.g1)
        self.assertEqual(result.telemetry.updates[(2, "d0")], 0)
        self.assertGreaterEqual(result.metrics.H, 0.0)

    def test_critic_penalty_stays_bounded(self):
        telemetry = Telemetry()
        config = tiny_config(epochs=(3, 0, 0), stage_mask={1})
        train_models(tiny_dataset().training_view(), config, telemetry)
        penalties = telemetry.values(1, "d0_penalty")
        estimates = telemetry.values(1, "d0_wasserstein")
        self.assertTrue(np.all(np.isfinite(estimates)))
        self.assertLess(np.mean(penalties[-50:]), 5 * 10.0)


class TrainConfigTest(SimpleTestCase):
    def test_validation(self):
        for bad in (
            dict(k=0),
            dict(batch_size=0),
            dict(stage_mask=set()),
            dict(stage_mask={4}),
            dict(leaky_slope=1.0),
        ):
            with self.assertRaises(ConfigError):
                TrainConfig(**bad)

    def test_zero_learning_rate_is_accepted(self):
        self.assertEqual(tiny_config(learning_rate=0.0).learning_rate, 0.0)
        message = "0 is accepted for null-update runs"
        with self.assertRaisesMessage(ConfigError, message):
            tiny_config(learning_rate=-1e-4)

    def test_digest_follows_configuration(self):
        self.assertEqual(tiny_config().digest(), tiny_config().digest())
        self.assertNotEqual(tiny_config().digest(), tiny_config(seed=1).digest())

    @override_settings(
        DECGAN={
            "TRAIN": {"k": 3, "stages": [1, 3], "epochs": [2, 1, 1]},
            "LOSS": {"gp_lambda": 5.0},
        }
    )
    def test_from_settings(self):
        config = TrainConfig.from_settings(seed=9)
        self.assertEqual(config.k, 3)
        self.assertEqual(config.stage_mask, frozenset({1, 3}))
        self.assertEqual(config.epochs, (2, 1, 1))
        self.assertEqual(config.loss_weights.gp_lambda, 5.0)
        self.assertEqual(config.loss_weights.rec_beta, 0.01)
        self.assertEqual(config.seed, 9)


class CheckpointTest(SimpleTestCase):
    def test_round_trip_is_bitwise(self):
        regressor = linear_regressor(Rng(1).normal(6, 4), Rng(2).normal(1, 4))
        models = tiny_models().replace(regressor=regressor)
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "checkpoint_stage1.npz")
            save_checkpoint(path, models, seed=42)
            loaded, seed = load_checkpoint(path)
        self.assertEqual(seed, 42)
        self.assertEqual(loaded.dims, models.dims)
        self.assertEqual(set(loaded.networks()), set(models.networks()))
        for name, params in models.networks().items():
            for before, after in zip(params.arrays(), getattr(loaded, name).arrays()):
                np.testing.assert_array_equal(before, after)

    def test_baseline_round_trip(self):
        models = tiny_models(baseline=True)
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "baseline.npz")
            save_checkpoint(path, models, seed=0)
            loaded, _ = load_checkpoint(path)
        self.assertTrue(loaded.baseline)
        self.assertIsNone(loaded.g1)
