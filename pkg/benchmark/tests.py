import csv
import json
import os
import tempfile
import time
from io import StringIO
from unittest import mock, skipUnless

import numpy as np
from django.contrib import admin
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from benchmark.admin import RunAdmin
from benchmark.cli import label_for, translate_errors
from benchmark.datasets import (
    ClassEmbeddingTable,
    DatasetValidationError,
    GzslDataset,
    LabeledSplit,
    Pool,
    SyntheticSpec,
    batch_iter,
    load_dataset,
    make_synthetic,
    save_dataset,
    synthetic_class_means,
    synthetic_ground_truth,
)
from benchmark.evaluation import (
    EvalConfig,
    GzslMetrics,
    SoftmaxClassifier,
    evaluate_gzsl,
    harmonic_mean,
    per_class_top1,
    pooled_top1,
    softmax_loss_and_grad,
    synthesize_unseen,
    train_softmax,
)
from benchmark.forms import RunManifestForm, SyntheticSpecForm, TrainConfigForm
from benchmark.gradcheck import (
    loss_checks,
    primitive_checks,
    run_first_order,
    run_gradient_penalty_check,
    run_parameter_check,
    run_suite,
)
from benchmark.models import ClassAccuracy, Run
from benchmark.reports import (
    aggregate_ablation,
    write_ablation_csv,
    write_metrics,
    write_run_record,
)
from gan.checkpoints import load_checkpoint
from gan.exceptions import ConfigError, NumericError
from gan.networks import ModelDims, init_decgan
from gan.numcore import Rng, central_difference, relative_error
from gan.trainer import ABLATIONS, TrainConfig, run_pipeline

TINY_SPEC = SyntheticSpec(
    n_seen_classes=3,
    n_unseen_classes=2,
    samples_per_class=20,
    feature_dim=6,
    embed_dim=4,
)
TINY_CONFIG = {
    "noise_dim": 3,
    "prior_dim": 4,
    "hidden_dim": 8,
    "batch_size": 8,
    "epochs": [1, 1, 1],
    "learning_rate": 0.001,
    "eval": {"n_per_class": 10, "epochs": 20},
}

# (configuration, dataset, a_u, a_s, reported H, whether H follows from a_u and a_s)
REPORTED_ROWS = [
    ("DecGAN", "FLO", 73.0, 92.2, 81.5, True),
    ("DecGAN", "SUN", 57.2, 44.3, 49.9, True),
    ("DecGAN", "CUB", 59.1, 68.4, 63.4, True),
    ("Stg1", "FLO", 58.1, 79.8, 67.2, True),
    ("Stg1", "SUN", 45.0, 34.5, 39.1, True),
    ("Stg1", "CUB", 44.1, 56.7, 49.8, False),
    ("Stg3", "FLO", 4.7, 82.2, 8.9, True),
    ("Stg3", "SUN", 1.2, 30.1, 2.3, True),
    ("Stg3", "CUB", 2.0, 35.3, 3.8, True),
    ("-Stg1", "FLO", 5.8, 73.9, 10.1, False),
    ("-Stg1", "SUN", 1.3, 39.1, 2.5, True),
    ("-Stg1", "CUB", 1.7, 35.3, 3.2, True),
    ("-Stg2", "FLO", 71.1, 50.5, 80.1, False),
    ("-Stg2", "SUN", 53.2, 44.2, 48.2, True),
    ("-Stg2", "CUB", 55.1, 66.6, 60.3, True),
    ("-Stg3", "FLO", 50.5, 80.1, 62.0, True),
    ("-Stg3", "SUN", 44.5, 34.7, 38.3, False),
    ("-Stg3", "CUB", 45.3, 53.8, 49.1, True),
    ("baseline", "FLO", 69.5, 91.4, 79.0, True),
    ("baseline", "SUN", 52.7, 44.3, 48.1, True),
    ("baseline", "CUB", 54.3, 66.7, 59.9, True),
]


def doubled_negative_slope(values, slope):
    return np.where(values >= 0, 1.0, 2 * slope)


def minimal_dataset():
    return GzslDataset(
        seen_train=LabeledSplit([[0.5, 1.25]], [0]),
        seen_test=LabeledSplit([[0.1, 2.0 / 3.0]], [0]),
        unseen_pool=[[3.0, 0.0], [1e-17, 7.5]],
        unseen_pool_labels=[1, 1],
        embeddings=ClassEmbeddingTable([0, 1], [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]),
        seen_classes=[0],
        unseen_classes=[1],
    )


def metrics(per_class, seen, unseen):
    a_s = float(np.mean([per_class[c] for c in seen]))
    a_u = float(np.mean([per_class[c] for c in unseen]))
    h = harmonic_mean(a_s, a_u)
    return GzslMetrics(per_class, a_s, a_u, h, tuple(seen), tuple(unseen))


class WorkspaceMixin:
    def setUp(self):
        super().setUp()
        workspace = tempfile.TemporaryDirectory()
        self.addCleanup(workspace.cleanup)
        self.workspace = workspace.name

    def path(self, *parts):
        return os.path.join(self.workspace, *parts)

    def write_json(self, name, data):
        with open(self.path(name), "w") as file:
            json.dump(data, file)
        return self.path(name)

    def assert_same_bytes(self, first, second):
        with open(first, "rb") as a, open(second, "rb") as b:
            self.assertEqual(a.read(), b.read(), os.path.basename(first))


class SyntheticDataTest(SimpleTestCase):
    def test_shapes_and_splits(self):
        dataset = make_synthetic(TINY_SPEC)
        self.assertEqual(dataset.seen_classes, (0, 1, 2))
        self.assertEqual(dataset.unseen_classes, (3, 4))
        self.assertEqual(dataset.seen_train.features.shape, (48, 6))
        self.assertEqual(dataset.seen_test.features.shape, (12, 6))
        self.assertEqual(dataset.unseen_pool.shape, (40, 6))
        self.assertEqual(dataset.embeddings.width, 4)
        self.assertGreaterEqual(dataset.unseen_pool.min(), 0.0)

    def test_same_spec_is_bitwise_identical(self):
        first, second = make_synthetic(TINY_SPEC), make_synthetic(TINY_SPEC)
        np.testing.assert_array_equal(
            first.seen_train.features, second.seen_train.features
        )
        np.testing.assert_array_equal(first.unseen_pool, second.unseen_pool)
        np.testing.assert_array_equal(
            first.embeddings.matrix, second.embeddings.matrix
        )

    def test_tiny_noise_collapses_to_class_means(self):
        mixing = Rng(1).normal(4, 6)
        dataset = make_synthetic(
            SyntheticSpec(
                n_seen_classes=3,
                n_unseen_classes=2,
                samples_per_class=5,
                feature_dim=6,
                embed_dim=4,
                mixing=mixing,
                cluster_std=1e-12,
            )
        )
        embeddings = dataset.embeddings.rows(dataset.unseen_pool_labels)
        means = synthetic_class_means(embeddings, mixing)
        np.testing.assert_allclose(dataset.unseen_pool, means, rtol=0, atol=1e-10)

    def test_identical_embeddings_give_identical_means(self):
        c = Rng(0).uniform(1, 4)
        means = synthetic_class_means(np.vstack([c, c]), Rng(1).normal(4, 6))
        np.testing.assert_array_equal(means[0], means[1])

    def test_nearest_class_mean_oracle_on_default_benchmark(self):
        dataset = make_synthetic(SyntheticSpec())
        features = np.vstack(
            [
                dataset.seen_train.features,
                dataset.seen_test.features,
                dataset.unseen_pool,
            ]
        )
        labels = np.concatenate(
            [
                dataset.seen_train.labels,
                dataset.seen_test.labels,
                dataset.unseen_pool_labels,
            ]
        )
        classes = np.unique(labels)
        means = np.vstack([features[labels == c].mean(axis=0) for c in classes])
        distances = ((features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        nearest = classes[np.argmin(distances, axis=1)]
        accuracy = per_class_top1(nearest, labels, classes)
        self.assertGreaterEqual(min(accuracy.values()), 0.99)

    def test_ground_truth_matches_the_generated_dataset(self):
        embeddings, mixing, _ = synthetic_ground_truth(TINY_SPEC)
        dataset = make_synthetic(TINY_SPEC)
        np.testing.assert_array_equal(dataset.embeddings.matrix, embeddings)
        self.assertEqual(mixing.shape, (4, 6))
        fixed = Rng(3).normal(4, 6)
        spec = SyntheticSpec(embed_dim=4, feature_dim=6, mixing=fixed)
        _, returned, _ = synthetic_ground_truth(spec)
        np.testing.assert_array_equal(returned, fixed)

    def test_spec_validation(self):
        for bad in (
            dict(n_seen_classes=0),
            dict(cluster_std=0.0),
            dict(train_fraction=1.0),
            dict(mixing=np.ones((2, 2))),
        ):
            with self.assertRaises(ConfigError):
                SyntheticSpec(**bad)


class DatasetValidationTest(SimpleTestCase):
    def test_overlapping_classes(self):
        message = "disjointness violated"
        with self.assertRaisesMessage(DatasetValidationError, message):
            GzslDataset(
                seen_train=LabeledSplit([[1.0]], [0]),
                seen_test=LabeledSplit([[1.0]], [0]),
                unseen_pool=[[2.0]],
                unseen_pool_labels=[0],
                embeddings=ClassEmbeddingTable([0], [[1.0]]),
                seen_classes=[0],
                unseen_classes=[0],
            )

    def test_label_outside_its_class_set(self):
        with self.assertRaises(DatasetValidationError) as ctx:
            GzslDataset(
                seen_train=LabeledSplit([[1.0]], [1]),
                seen_test=LabeledSplit([[1.0]], [0]),
                unseen_pool=[[2.0]],
                unseen_pool_labels=[1],
                embeddings=ClassEmbeddingTable([0, 1], [[1.0], [2.0]]),
                seen_classes=[0],
                unseen_classes=[1],
            )
        self.assertEqual(ctx.exception.code, "label")

    def test_class_without_embedding(self):
        with self.assertRaises(DatasetValidationError) as ctx:
            GzslDataset(
                seen_train=LabeledSplit([[1.0]], [0]),
                seen_test=LabeledSplit([[1.0]], [0]),
                unseen_pool=[[2.0]],
                unseen_pool_labels=[1],
                embeddings=ClassEmbeddingTable([0], [[1.0]]),
                seen_classes=[0],
                unseen_classes=[1],
            )
        self.assertEqual(ctx.exception.code, "embedding")

    def test_width_mismatch(self):
        with self.assertRaises(DatasetValidationError) as ctx:
            GzslDataset(
                seen_train=LabeledSplit([[1.0, 2.0]], [0]),
                seen_test=LabeledSplit([[1.0]], [0]),
                unseen_pool=[[2.0, 1.0]],
                unseen_pool_labels=[1],
                embeddings=ClassEmbeddingTable([0, 1], [[1.0], [2.0]]),
                seen_classes=[0],
                unseen_classes=[1],
            )
        self.assertEqual(ctx.exception.code, "width")

    def test_cub_shaped_dataset_validates(self):
        rng = Rng(0)
        seen, unseen = list(range(150)), list(range(150, 200))
        dataset = GzslDataset(
            seen_train=LabeledSplit(rng.uniform(150, 2048), seen),
            seen_test=LabeledSplit(rng.uniform(150, 2048), seen),
            unseen_pool=rng.uniform(50, 2048),
            unseen_pool_labels=unseen,
            embeddings=ClassEmbeddingTable(range(200), rng.uniform(200, 312)),
            seen_classes=seen,
            unseen_classes=unseen,
        )
        self.assertEqual((dataset.feature_dim, dataset.embed_dim), (2048, 312))

    def test_training_view_hides_unseen_labels(self):
        dataset = make_synthetic(TINY_SPEC)
        view = dataset.training_view()
        self.assertFalse(hasattr(view, "unseen_pool_labels"))
        self.assertNotIn("_unseen_pool_labels", vars(view))
        np.testing.assert_array_equal(view.unseen_features, dataset.unseen_pool)

    def test_unseen_evaluation_falls_back_to_the_pool(self):
        dataset = make_synthetic(TINY_SPEC)
        np.testing.assert_array_equal(
            dataset.unseen_evaluation().labels, dataset.unseen_pool_labels
        )


class ManifestTest(WorkspaceMixin, SimpleTestCase):
    def test_round_trip_is_bitwise(self):
        original = minimal_dataset()
        loaded = load_dataset(save_dataset(original, self.workspace))
        pairs = [
            (loaded.seen_train.features, original.seen_train.features),
            (loaded.seen_test.features, original.seen_test.features),
            (loaded.unseen_pool, original.unseen_pool),
            (loaded.unseen_pool_labels, original.unseen_pool_labels),
            (loaded.embeddings.matrix, original.embeddings.matrix),
        ]
        for actual, expected in pairs:
            np.testing.assert_array_equal(actual, expected)
        self.assertEqual(loaded.seen_classes, (0,))
        self.assertEqual(loaded.unseen_classes, (1,))

    def test_overlap_in_splits_file(self):
        save_dataset(minimal_dataset(), self.workspace)
        with open(self.path("splits.json")) as file:
            splits = json.load(file)
        splits["unseen_classes"] = [0, 1]
        self.write_json("splits.json", splits)
        message = "disjointness violated"
        with self.assertRaisesMessage(DatasetValidationError, message):
            load_dataset(self.path("manifest.json"))

    def test_declared_width_is_checked(self):
        manifest_path = save_dataset(minimal_dataset(), self.workspace)
        with open(manifest_path) as file:
            manifest = json.load(file)
        manifest["feature_dim"] = 3
        self.write_json("manifest.json", manifest)
        with self.assertRaises(DatasetValidationError) as ctx:
            load_dataset(manifest_path)
        self.assertEqual(ctx.exception.code, "width")

    def test_missing_embedding_row(self):
        save_dataset(minimal_dataset(), self.workspace)
        with open(self.path("embeddings.csv")) as file:
            first_row = file.readline()
        with open(self.path("embeddings.csv"), "w") as file:
            file.write(first_row)
        with self.assertRaises(DatasetValidationError) as ctx:
            load_dataset(self.path("manifest.json"))
        self.assertEqual(ctx.exception.code, "embedding")

    def test_non_numeric_cell(self):
        manifest_path = save_dataset(minimal_dataset(), self.workspace)
        with open(self.path("features.csv"), "a") as file:
            file.write("3.0,abc\n")
        with self.assertRaises(DatasetValidationError) as ctx:
            load_dataset(manifest_path)
        self.assertEqual(ctx.exception.code, "parse")
        self.assertIn("features.csv", ctx.exception.message)

    def test_missing_file(self):
        manifest_path = save_dataset(minimal_dataset(), self.workspace)
        os.remove(self.path("labels.csv"))
        with self.assertRaises(FileNotFoundError):
            load_dataset(manifest_path)

    def test_missing_manifest_key(self):
        self.write_json("manifest.json", {"features": "features.csv"})
        with self.assertRaises(DatasetValidationError) as ctx:
            load_dataset(self.path("manifest.json"))
        self.assertEqual(ctx.exception.code, "manifest")


class BatchIterTest(SimpleTestCase):
    def setUp(self):
        self.pool = Pool(Rng(0).normal(130, 3), np.arange(130) % 10)

    def test_partial_batch_is_dropped(self):
        batches = list(batch_iter(self.pool, 64, Rng(1)))
        self.assertEqual(len(batches), 2)
        self.assertEqual(batches[0].features.shape, (64, 3))

    def test_same_seed_same_batches(self):
        first = [b.labels for b in batch_iter(self.pool, 16, Rng(2))]
        second = [b.labels for b in batch_iter(self.pool, 16, Rng(2))]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_batch_larger_than_pool(self):
        with self.assertRaises(ConfigError):
            list(batch_iter(self.pool, 131, Rng(0)))

    def test_balanced_mode_is_class_uniform(self):
        # class c holds 20 * (c + 1) rows
        labels = np.concatenate([np.full(20 * (c + 1), c) for c in range(10)])
        pool = Pool(np.zeros((labels.size, 1)), labels)
        rng, drawn = Rng(3), []
        for _ in range(10):
            drawn.extend(b.labels for b in batch_iter(pool, 100, rng, balanced=True))
        drawn = np.concatenate(drawn)
        expected = drawn.size / 10
        sigma = np.sqrt(drawn.size * 0.1 * 0.9)
        counts = np.bincount(drawn, minlength=10)
        self.assertTrue(np.all(np.abs(counts - expected) <= 3 * sigma), counts)

    def test_balanced_mode_needs_labels(self):
        with self.assertRaises(ConfigError):
            list(batch_iter(Pool(np.zeros((10, 1))), 5, Rng(0), balanced=True))


class HarmonicMeanTest(SimpleTestCase):
    def test_reference_values(self):
        self.assertAlmostEqual(harmonic_mean(0.922, 0.730), 0.815, delta=0.0005)
        self.assertAlmostEqual(harmonic_mean(0.353, 0.020), 0.0379, delta=0.0005)

    def test_equal_arguments(self):
        for v in (0.0, 0.3, 1.0):
            self.assertAlmostEqual(harmonic_mean(v, v), v)

    def test_zero_when_one_side_is_zero(self):
        self.assertEqual(harmonic_mean(0.0, 0.0), 0.0)
        self.assertEqual(harmonic_mean(1.0, 0.0), 0.0)

    def test_bounds(self):
        values = Rng(0).uniform(500, 2)
        for a_s, a_u in values:
            h = harmonic_mean(a_s, a_u)
            self.assertLessEqual(min(a_s, a_u), h + 1e-15)
            self.assertLessEqual(h, 2 * min(a_s, a_u) + 1e-15)

    def test_out_of_range(self):
        for a_s, a_u in ((1.2, 0.5), (0.5, -0.1)):
            with self.assertRaises(ValidationError):
                harmonic_mean(a_s, a_u)

    def test_reported_table_arithmetic(self):
        for configuration, dataset, a_u, a_s, reported, consistent in REPORTED_ROWS:
            computed = 100.0 * harmonic_mean(a_s / 100.0, a_u / 100.0)
            label = f"{configuration} {dataset}"
            if consistent:
                self.assertLessEqual(abs(computed - reported), 0.1, label)
            else:
                self.assertGreater(abs(computed - reported), 0.1, label)


class PerClassTop1Test(SimpleTestCase):
    def test_all_correct(self):
        labels = [0, 1, 1, 2]
        self.assertEqual(
            per_class_top1(labels, labels, [0, 1, 2]), {0: 1.0, 1: 1.0, 2: 1.0}
        )

    def test_partial_class(self):
        accuracy = per_class_top1([3, 3, 3, 0], [3, 3, 3, 3], [3])
        self.assertEqual(accuracy[3], 0.75)

    def test_class_without_samples_is_left_out(self):
        self.assertEqual(per_class_top1([0, 0], [0, 0], [0, 5]), {0: 1.0})

    def test_mean_ignores_class_imbalance(self):
        predictions, labels = [0, 1, 1, 0], [0, 0, 1, 1]
        before = per_class_top1(predictions, labels, [0, 1])
        after = per_class_top1(predictions + [0, 1], labels + [0, 0], [0, 1])
        self.assertEqual(
            np.mean(list(before.values())), np.mean(list(after.values()))
        )
        self.assertNotEqual(
            pooled_top1(predictions, labels),
            pooled_top1(predictions + [0, 0, 0], labels + [0, 0, 1]),
        )

    def test_order_does_not_matter(self):
        rng = Rng(0)
        predictions, labels = rng.integers(4, 50), rng.integers(4, 50)
        order = rng.permutation(50)
        self.assertEqual(
            per_class_top1(predictions, labels, range(4)),
            per_class_top1(predictions[order], labels[order], range(4)),
        )

    def test_misaligned(self):
        with self.assertRaises(ValidationError):
            per_class_top1([0, 1], [0], [0, 1])

    def test_prediction_outside_universe(self):
        with self.assertRaises(ValidationError):
            per_class_top1([0, 9], [0, 1], [0, 1], universe=[0, 1])


class SoftmaxTest(SimpleTestCase):
    def test_gradient_matches_finite_differences(self):
        rng = Rng(0)
        features, labels = rng.normal(6, 2), np.array([0, 1, 2, 0, 1, 2])
        weight, bias = rng.normal(2, 3), rng.normal(1, 3)
        _, grad_w, grad_b = softmax_loss_and_grad(weight, bias, features, labels, 0.1)
        numeric_w = central_difference(
            lambda w: softmax_loss_and_grad(w, bias, features, labels, 0.1)[0], weight
        )
        numeric_b = central_difference(
            lambda b: softmax_loss_and_grad(weight, b, features, labels, 0.1)[0], bias
        )
        self.assertLess(relative_error(grad_w, numeric_w), 1e-6)
        self.assertLess(relative_error(grad_b, numeric_b), 1e-6)

    def test_separable_clusters(self):
        rng = Rng(1)
        features = np.vstack(
            [rng.normal(50, 2, 0.3) - 2.0, rng.normal(50, 2, 0.3) + 2.0]
        )
        labels = np.repeat([0, 1], 50)
        classifier = train_softmax(
            features, labels, 2, lr=1.0, epochs=200, l2=0.0, rng=rng
        )
        self.assertEqual(pooled_top1(classifier.predict(features), labels), 1.0)

    def test_large_l2_shrinks_weights(self):
        rng = Rng(2)
        classifier = train_softmax(
            rng.normal(40, 3), np.arange(40) % 4, 4, lr=1.0, epochs=50, l2=1e9, rng=rng
        )
        self.assertLess(np.max(np.abs(classifier.weight)), 1e-6)

    def test_ties_go_to_the_lowest_class(self):
        classifier = SoftmaxClassifier(np.zeros((3, 4)), np.zeros((1, 4)))
        predictions = classifier.predict(Rng(0).normal(5, 3))
        np.testing.assert_array_equal(predictions, np.zeros(5))

    def test_empty_class_is_reported(self):
        rng = Rng(3)
        with self.assertLogs("benchmark.evaluation", level="WARNING") as logs:
            classifier = train_softmax(
                rng.normal(10, 2),
                np.arange(10) % 2,
                3,
                lr=1.0,
                epochs=5,
                l2=0.0,
                rng=rng,
            )
        self.assertEqual(classifier.empty_classes, (2,))
        self.assertEqual(classifier.weight.shape, (2, 3))
        self.assertIn("[2]", logs.output[0])

    def test_labels_out_of_range(self):
        with self.assertRaises(ValidationError):
            train_softmax(
                np.zeros((2, 1)), [0, 3], 3, lr=1.0, epochs=1, l2=0.0, rng=Rng(0)
            )


class SynthesizeUnseenTest(SimpleTestCase):
    def setUp(self):
        self.dims = ModelDims(
            noise_dim=3, prior_dim=4, hidden_dim=8, feature_dim=6, embed_dim=4
        )
        self.table = ClassEmbeddingTable(range(5), Rng(0).uniform(5, 4))

    def test_counts_and_labels(self):
        models = init_decgan(self.dims, Rng(1), 0.3)
        features, labels = synthesize_unseen(
            models.g1, models.gc, self.table, range(5), 400, Rng(2)
        )
        self.assertEqual(features.shape, (2000, 6))
        np.testing.assert_array_equal(np.bincount(labels), np.full(5, 400))
        self.assertGreaterEqual(features.min(), 0.0)

    def test_zero_generator_gives_zero_features(self):
        models = init_decgan(self.dims, Rng(1), 0.0)
        features, _ = synthesize_unseen(
            models.g1, models.gc, self.table, [0, 3], 7, Rng(2)
        )
        np.testing.assert_array_equal(features, np.zeros((14, 6)))

    def test_baseline_reads_noise_directly(self):
        models = init_decgan(self.dims, Rng(1), 0.3, baseline=True)
        features, _ = synthesize_unseen(
            None, models.gc, self.table, [1], 3, Rng(2), baseline=True
        )
        self.assertEqual(features.shape, (3, 6))

    def test_class_without_embedding(self):
        models = init_decgan(self.dims, Rng(1), 0.3)
        with self.assertRaises(DatasetValidationError):
            synthesize_unseen(models.g1, models.gc, self.table, [7], 3, Rng(2))


class EvaluateGzslTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.mixing = Rng(7).normal(16, 64, std=0.25)
        cls.dataset = make_synthetic(SyntheticSpec(mixing=cls.mixing))

    def oracle(self, classes, n_per_class, rng):
        embeddings = self.dataset.embeddings.rows(classes)
        means = synthetic_class_means(embeddings, self.mixing)
        labels = np.repeat(np.asarray(classes), n_per_class)
        return np.repeat(means, n_per_class, axis=0), labels

    def zeros(self, classes, n_per_class, rng):
        labels = np.repeat(np.asarray(classes), n_per_class)
        return np.zeros((len(classes) * n_per_class, 64)), labels

    def evaluate(self, config, generator):
        return evaluate_gzsl(None, self.dataset, config, Rng(0), generator=generator)

    def test_oracle_generator(self):
        result = self.evaluate(EvalConfig(), self.oracle)
        self.assertGreaterEqual(result.H, 0.95)
        self.assertEqual(set(result.per_class_acc), set(range(15)))

    def test_zero_generator_is_near_chance(self):
        result = self.evaluate(EvalConfig(), self.zeros)
        self.assertLessEqual(result.a_u, 2 / 5)

    def test_metrics_follow_their_definitions(self):
        result = self.evaluate(EvalConfig(epochs=50), self.oracle)
        accuracy = result.per_class_acc
        self.assertAlmostEqual(result.a_s, np.mean([accuracy[c] for c in range(10)]))
        self.assertAlmostEqual(
            result.a_u, np.mean([accuracy[c] for c in range(10, 15)])
        )
        self.assertEqual(result.H, harmonic_mean(result.a_s, result.a_u))

    def test_deterministic_under_fixed_seed(self):
        dataset = make_synthetic(TINY_SPEC)
        models = init_decgan(ModelDims(3, 4, 8, 6, 4), Rng(0), 0.3)
        config = EvalConfig(n_per_class=20, epochs=30)
        first = evaluate_gzsl(models, dataset, config, Rng(5))
        second = evaluate_gzsl(models, dataset, config, Rng(5))
        self.assertEqual(first, second)

    def test_pooled_accuracy_switch(self):
        result = self.evaluate(EvalConfig(epochs=50, per_class=False), self.oracle)
        self.assertGreaterEqual(result.a_s, 0.0)
        self.assertLessEqual(result.a_s, 1.0)


class FormsTest(SimpleTestCase):
    def test_train_config_split(self):
        form = TrainConfigForm(
            {"k": 3, "stages": [1, 3], "gp_lambda": 5.0, "eval": {"epochs": 10}}
        )
        self.assertTrue(form.is_valid(), form.errors)
        train, loss, evaluation = form.split()
        self.assertEqual(train, {"k": 3, "stage_mask": [1, 3]})
        self.assertEqual(loss, {"gp_lambda": 5.0})
        self.assertEqual(evaluation, {"epochs": 10})

    def test_train_config_rejections(self):
        cases = {
            "leaky_slope": {"leaky_slope": 1.5},
            "stages": {"stages": []},
            "epochs": {"epochs": [1, 2]},
            "eval": {"eval": {"epochs": -1}},
            "k": {"k": 0},
        }
        for field, data in cases.items():
            form = TrainConfigForm(data)
            self.assertFalse(form.is_valid())
            self.assertIn(field, form.errors)
        self.assertIn("stages", TrainConfigForm({"stages": [4]}).errors)

    def test_zero_learning_rate(self):
        form = TrainConfigForm({"learning_rate": 0})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.split()[0], {"learning_rate": 0.0})
        self.assertIn("0 is accepted", str(form.fields["learning_rate"].help_text))
        self.assertFalse(TrainConfigForm({"learning_rate": -0.1}).is_valid())

    def test_unknown_keys(self):
        form = TrainConfigForm({"k": 2, "bogus": 1})
        self.assertFalse(form.is_valid())
        self.assertIn("bogus", str(form.non_field_errors()))

    def test_synthetic_spec_form(self):
        form = SyntheticSpecForm({"n_seen_classes": 4, "seed": 3})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.overrides(), {"n_seen_classes": 4, "seed": 3})
        for data in (
            {"cluster_std": 0},
            {"train_fraction": 1.0},
            {"mixing": [[1, 2], [3]]},
            {"n_unseen_classes": 0},
        ):
            self.assertFalse(SyntheticSpecForm(data).is_valid())

    def test_run_manifest_form(self):
        matching = RunManifestForm({"ablation": "-Stg2", "stages": [3, 1]})
        conflicting = RunManifestForm({"ablation": "-Stg2", "stages": [1, 2]})
        self.assertTrue(matching.is_valid())
        self.assertFalse(conflicting.is_valid())
        self.assertFalse(RunManifestForm({"ablation": "Stg2"}).is_valid())
        self.assertIn("seeds", RunManifestForm({"seeds": []}).errors)
        self.assertTrue(RunManifestForm({"seeds": "0,1,2"}).is_valid())


class ReportsTest(WorkspaceMixin, SimpleTestCase):
    def test_write_metrics(self):
        result = metrics({0: 1.0, 1: 0.5, 2: 0.25}, [0, 1], [2])
        path = write_metrics(result, self.workspace)
        with open(path) as file:
            rows = list(csv.reader(file))
        self.assertEqual(rows[0], ["class", "split", "accuracy"])
        self.assertEqual(
            rows[1:],
            [["0", "seen", "1.0"], ["1", "seen", "0.5"], ["2", "unseen", "0.25"]],
        )
        with open(self.path("summary.txt")) as file:
            self.assertEqual(file.read(), "a_u=0.2500 a_s=0.7500 H=0.3750\n")

    def test_run_record(self):
        config = TrainConfig(seed=4)
        write_run_record(self.workspace, config, "full", {"seen_classes": 3})
        with open(self.path("run.json")) as file:
            record = json.load(file)
        self.assertEqual(record["seed"], 4)
        self.assertEqual(record["config_hash"], config.digest())
        self.assertEqual(record["config"]["stage_mask"], [1, 2, 3])
        self.assertIn("numpy", record["versions"])

    def test_aggregate_averages_per_run_h(self):
        first = metrics({0: 1.0, 1: 0.2}, [0], [1])
        second = metrics({0: 0.6, 1: 0.6}, [0], [1])
        rows = aggregate_ablation(
            {"full": [first, second, None], "Stg1": [None]}, ["full", "Stg1", "Stg3"]
        )
        full, stg1, stg3 = rows
        self.assertEqual((full.runs, full.failed), (3, 1))
        self.assertAlmostEqual(full.a_s, 0.8)
        self.assertAlmostEqual(full.a_u, 0.4)
        self.assertAlmostEqual(full.H, (first.H + second.H) / 2)
        self.assertAlmostEqual(full.H_of_means, harmonic_mean(0.8, 0.4))
        self.assertNotAlmostEqual(full.H, full.H_of_means)
        self.assertEqual((stg1.runs, stg1.failed, stg1.H), (1, 1, None))
        self.assertEqual((stg3.runs, stg3.H), (0, None))

    def test_ablation_csv(self):
        full = metrics({0: 1.0, 1: 0.5}, [0], [1])
        rows = aggregate_ablation({"full": [full], "Stg1": [None]}, ["full", "Stg1"])
        path = write_ablation_csv(rows, self.path("ablation.csv"))
        with open(path) as file:
            table = list(csv.reader(file))
        self.assertEqual(
            table[0],
            ["configuration", "runs", "failed", "a_u", "a_s", "H", "H_of_means"],
        )
        self.assertEqual(table[1][:5], ["full", "1", "0", "0.5", "1.0"])
        self.assertEqual(table[2], ["Stg1", "1", "1", "", "", "", ""])


class GradCheckTest(SimpleTestCase):
    def test_suite_passes_and_reports_every_op(self):
        results = run_suite(seed=0, points=3)
        failed = [str(r) for r in results if not r.passed]
        self.assertEqual(failed, [])
        ops = [r.op for r in results]
        for op in (
            "affine",
            "leaky_relu",
            "relu",
            "concat_cols",
            "l2_norm_rows",
            "critic_network",
            "gradient_penalty",
            "critic_loss_conditional",
            "generator_loss_conditional",
            "cross_generator_loss",
            "generator_loss_unconditional",
        ):
            self.assertIn(op, ops)
        self.assertEqual(len(ops), len(set(ops)))
        self.assertEqual([r.order for r in results if r.op == "gradient_penalty"], [2])

    def test_corrupted_backward_rule_is_detected(self):
        check = next(c for c in primitive_checks(Rng(0)) if c.op == "leaky_relu")
        self.assertTrue(run_first_order(check, Rng(1), points=3).passed)
        with mock.patch(
            "gan.numcore._leaky_relu_slopes", side_effect=doubled_negative_slope
        ):
            result = run_first_order(check, Rng(1), points=3)
        self.assertFalse(result.passed)
        self.assertIn("FAIL", str(result))

    def test_second_order_penalty_check(self):
        result = run_gradient_penalty_check(Rng(4), points=3)
        self.assertTrue(result.passed, str(result))

    def test_loss_parameter_gradients(self):
        checks = {check.op: check for check in loss_checks()}
        self.assertEqual(checks["critic_loss_conditional"].order, 2)
        for check in checks.values():
            result = run_parameter_check(check, Rng(5), points=2)
            self.assertTrue(result.passed, str(result))
            self.assertLessEqual(result.tolerance, 1e-4)


class CliHelpersTest(SimpleTestCase):
    def test_error_translation(self):
        cases = [
            (NumericError("diverged"), 4),
            (ConfigError("bad k"), 2),
            (ValidationError("bad manifest"), 2),
            (json.JSONDecodeError("bad json", "{", 0), 2),
            (FileNotFoundError("missing.csv"), 3),
        ]
        for error, code in cases:
            with self.assertRaises(CommandError) as ctx:
                with translate_errors():
                    raise error
            self.assertEqual(ctx.exception.returncode, code, repr(error))

    def test_label_for(self):
        self.assertEqual(label_for(TrainConfig()), "full")
        self.assertEqual(label_for(TrainConfig.for_ablation("-Stg2")), "-Stg2")
        self.assertEqual(label_for(TrainConfig(stage_mask={2})), "custom")
        self.assertEqual(label_for(TrainConfig(), "baseline"), "baseline")


class RunModelTest(TestCase):
    def setUp(self):
        self.run = Run.objects.create(
            label="full", seed=0, stages="1,2,3", config_hash="abc"
        )

    def test_mark_completed(self):
        self.run.mark_completed(metrics({0: 1.0, 1: 0.5, 2: 0.25}, [0, 1], [2]))
        self.run.refresh_from_db()
        self.assertEqual(self.run.status, "completed")
        self.assertEqual(self.run.a_u, 0.25)
        self.assertAlmostEqual(self.run.harmonic_mean, 0.375)
        self.assertEqual(self.run.class_accuracies.count(), 3)
        self.assertEqual(self.run.class_accuracies.get(class_id=2).split, "unseen")

    def test_mark_failed(self):
        error = NumericError("non-finite gradient for parameter gc.0.weight")
        self.run.mark_failed(error)
        self.run.refresh_from_db()
        self.assertEqual(self.run.status, "failed")
        self.assertIn("gc.0.weight", self.run.error)

    def test_admin_action(self):
        RunAdmin(Run, admin.site).mark_as_failed(None, Run.objects.all())
        self.assertEqual(Run.objects.get().status, "failed")


class SynthDataCommandTest(WorkspaceMixin, SimpleTestCase):
    def test_writes_a_loadable_dataset(self):
        out = StringIO()
        call_command("synth_data", out=self.path("data"), seed=3, stdout=out)
        self.assertIn("Dataset written to", out.getvalue())
        loaded = load_dataset(self.path("data", "manifest.json"))
        original = make_synthetic(SyntheticSpec.from_settings(seed=3))
        np.testing.assert_array_equal(
            loaded.seen_train.features, original.seen_train.features
        )
        np.testing.assert_array_equal(
            loaded.unseen_pool_labels, original.unseen_pool_labels
        )

    def test_same_seed_same_bytes(self):
        config = self.write_json(
            "spec.json",
            {"n_seen_classes": 3, "n_unseen_classes": 2, "samples_per_class": 10},
        )
        for name in ("a", "b"):
            call_command(
                "synth_data", config=config, out=self.path(name), stdout=StringIO()
            )
        for file_name in (
            "features.csv",
            "labels.csv",
            "embeddings.csv",
            "splits.json",
            "manifest.json",
        ):
            self.assert_same_bytes(self.path("a", file_name), self.path("b", file_name))

    def test_invalid_spec(self):
        config = self.write_json("spec.json", {"n_unseen_classes": 0})
        with self.assertRaises(CommandError) as ctx:
            call_command(
                "synth_data", config=config, out=self.path("data"), stdout=StringIO()
            )
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn("n_unseen_classes", str(ctx.exception))

    def test_unwritable_output(self):
        with open(self.path("file"), "w") as file:
            file.write("not a directory")
        with self.assertRaises(CommandError) as ctx:
            call_command(
                "synth_data", out=self.path("file", "data"), stdout=StringIO()
            )
        self.assertEqual(ctx.exception.returncode, 3)


class TrainCommandTest(WorkspaceMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.data = save_dataset(make_synthetic(TINY_SPEC), self.path("data"))
        self.config = self.write_json("config.json", TINY_CONFIG)

    def train(self, out, **options):
        options.setdefault("config", self.config)
        options.setdefault("data", self.data)
        call_command("train", out=self.path(out), seed=0, stdout=StringIO(), **options)
        return self.path(out)

    def test_full_run_writes_every_artifact(self):
        out = self.train("full")
        for name in (
            "run.json",
            "checkpoint_stage1.npz",
            "checkpoint_stage2.npz",
            "checkpoint_stage3.npz",
            "telemetry.csv",
            "metrics.csv",
            "summary.txt",
        ):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        models, seed = load_checkpoint(os.path.join(out, "checkpoint_stage3.npz"))
        self.assertEqual((seed, models.dims.feature_dim), (0, 6))
        with open(os.path.join(out, "telemetry.csv")) as file:
            self.assertEqual(file.readline().strip(), "step,stage,loss,value")

        run = Run.objects.get()
        self.assertEqual(
            (run.label, run.stages, run.status), ("full", "1,2,3", "completed")
        )
        self.assertEqual(run.class_accuracies.count(), 5)
        with open(os.path.join(out, "run.json")) as file:
            self.assertEqual(json.load(file)["config_hash"], run.config_hash)

    def test_ablation_selects_stages(self):
        out = self.train("no-stage2", ablation="-Stg2")
        self.assertFalse(os.path.exists(os.path.join(out, "checkpoint_stage2.npz")))
        self.assertTrue(os.path.exists(os.path.join(out, "checkpoint_stage3.npz")))
        run = Run.objects.get()
        self.assertEqual((run.label, run.stages), ("-Stg2", "1,3"))

    def test_baseline(self):
        out = self.train("baseline", ablation="baseline")
        models, _ = load_checkpoint(os.path.join(out, "checkpoint_stage3.npz"))
        self.assertIsNone(models.g1)
        self.assertTrue(Run.objects.get().baseline)

    def test_stages_flag(self):
        self.train("stage1", stages="1", no_record=True)
        self.assertFalse(Run.objects.exists())
        self.assertFalse(os.path.exists(self.path("stage1", "checkpoint_stage2.npz")))

    def test_identical_runs_give_identical_metrics(self):
        self.train("a", no_record=True)
        self.train("b", no_record=True)
        self.assert_same_bytes(
            self.path("a", "metrics.csv"), self.path("b", "metrics.csv")
        )

    def test_manifest_file(self):
        manifest = self.write_json(
            "run.json",
            {
                "config": self.config,
                "data": self.data,
                "out": self.path("from-manifest"),
                "ablation": "Stg1",
            },
        )
        call_command("train", manifest=manifest, stdout=StringIO())
        self.assertTrue(
            os.path.exists(self.path("from-manifest", "checkpoint_stage1.npz"))
        )
        self.assertEqual(Run.objects.get().label, "Stg1")

    def assert_exit(self, code, **options):
        with self.assertRaises(CommandError) as ctx:
            self.train("failed", **options)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception

    def test_validation_failures(self):
        self.assert_exit(2, stages="4")
        self.assert_exit(2, ablation="-Stg2", stages="1,2")
        self.assert_exit(2, config=self.write_json("bogus.json", {"bogus": 1}))
        with open(self.path("broken.json"), "w") as file:
            file.write("{not json")
        self.assert_exit(2, config=self.path("broken.json"))

    def test_missing_data(self):
        self.assert_exit(3, data=self.path("nowhere", "manifest.json"))

    def test_malformed_csv(self):
        with open(self.path("data", "labels.csv"), "a") as file:
            file.write("x\n")
        self.assert_exit(2)
        self.assertFalse(Run.objects.exists())

    def test_numeric_failure(self):
        # fewer seen rows than feature columns: the unridged regressor is singular
        spec = SyntheticSpec(
            n_seen_classes=3,
            n_unseen_classes=2,
            samples_per_class=4,
            feature_dim=20,
            embed_dim=4,
        )
        data = save_dataset(make_synthetic(spec), self.path("narrow"))
        config = self.write_json("ridge0.json", dict(TINY_CONFIG, ridge=0.0))
        error = self.assert_exit(4, data=data, config=config)
        self.assertIn("ridge > 0", str(error))
        self.assertFalse(Run.objects.exists())


class AblateCommandTest(WorkspaceMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.data = save_dataset(make_synthetic(TINY_SPEC), self.path("data"))
        self.config = self.write_json("config.json", TINY_CONFIG)

    def ablate(self, seeds="0"):
        out = StringIO()
        call_command(
            "ablate",
            config=self.config,
            data=self.data,
            out=self.path("sweep"),
            seeds=seeds,
            deterministic=True,
            stdout=out,
        )
        with open(self.path("sweep", "ablation.csv")) as file:
            return list(csv.DictReader(file)), out.getvalue()

    def test_every_configuration_is_run_and_recorded(self):
        rows, _ = self.ablate()
        self.assertEqual([row["configuration"] for row in rows], list(ABLATIONS))
        self.assertEqual(Run.objects.count(), len(ABLATIONS))
        self.assertEqual(Run.objects.values("sweep").distinct().count(), 1)
        self.assertFalse(Run.objects.filter(status="failed").exists())
        self.assertEqual(ClassAccuracy.objects.count(), 5 * len(ABLATIONS))

    def test_five_seeds(self):
        rows, output = self.ablate(seeds="0,1,2,3,4")
        self.assertEqual(Run.objects.count(), 35)
        self.assertEqual(len(rows), 7)
        self.assertEqual({row["runs"] for row in rows}, {"5"})
        seeds = Run.objects.filter(label="full").values_list("seed", flat=True)
        self.assertEqual(sorted(seeds), [0, 1, 2, 3, 4])
        self.assertIn("35 runs (7 configurations x 5 seeds)", output)

    def test_failed_runs_are_recorded_and_the_sweep_continues(self):
        with mock.patch("gan.trainer.stage2", side_effect=NumericError("diverged")):
            rows, output = self.ablate()
        failed = {row["configuration"] for row in rows if row["failed"] == "1"}
        self.assertEqual(failed, {"full", "-Stg1", "-Stg3"})
        self.assertEqual(Run.objects.filter(status="failed").count(), 3)
        by_name = {row["configuration"]: row for row in rows}
        self.assertEqual(by_name["full"]["H"], "")
        self.assertNotEqual(by_name["-Stg2"]["H"], "")
        self.assertIn("diverged", output)

    def test_empty_seed_list(self):
        with self.assertRaises(CommandError) as ctx:
            call_command(
                "ablate",
                seeds=",",
                data=self.data,
                out=self.path("sweep"),
                stdout=StringIO(),
            )
        self.assertEqual(ctx.exception.returncode, 2)


class GradCheckCommandTest(SimpleTestCase):
    def test_passes(self):
        out = StringIO()
        call_command("gradcheck", points=2, stdout=out)
        self.assertIn("gradient checks passed", out.getvalue())
        self.assertIn("max_rel_error", out.getvalue())

    def test_corrupted_rule_fails_with_numeric_exit(self):
        with mock.patch(
            "gan.numcore._leaky_relu_slopes", side_effect=doubled_negative_slope
        ):
            with self.assertRaises(CommandError) as ctx:
                call_command("gradcheck", points=2, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 4)
        self.assertIn("leaky_relu", str(ctx.exception))


class DefaultBenchmarkTest(SimpleTestCase):
    """The shipped settings on the shipped synthetic benchmark, one seed."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = SyntheticSpec.from_settings()
        cls.dataset = make_synthetic(cls.spec)
        cls.eval_config = EvalConfig.from_settings()

    def run_ablation(self, name):
        config = TrainConfig.for_ablation(name, TrainConfig.from_settings(seed=0))
        return run_pipeline(self.dataset, config, self.eval_config).metrics

    def test_oracle_generator(self):
        _, mixing, _ = synthetic_ground_truth(self.spec)

        def oracle(classes, n_per_class, rng):
            embeddings = self.dataset.embeddings.rows(classes)
            means = synthetic_class_means(embeddings, mixing)
            labels = np.repeat(np.asarray(classes), n_per_class)
            return np.repeat(means, n_per_class, axis=0), labels

        result = evaluate_gzsl(
            None, self.dataset, self.eval_config, Rng(0), generator=oracle
        )
        self.assertGreaterEqual(result.H, 0.99)

    def test_full_pipeline(self):
        result = self.run_ablation("full")
        self.assertGreaterEqual(result.H, 0.5)

    def test_stage3_only_is_near_chance(self):
        # five unseen classes
        self.assertLessEqual(self.run_ablation("Stg3").a_u, 2 / 5)


@skipUnless(
    os.environ.get("DGZSL_ACCEPTANCE"),
    "set DGZSL_ACCEPTANCE=1 to run the synthetic benchmark sweep",
)
class SyntheticBenchmarkAcceptanceTest(SimpleTestCase):
    seeds = range(5)

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.dataset = make_synthetic(SyntheticSpec.from_settings())
        cls.eval_config = EvalConfig.from_settings()
        cls.h, cls.seconds = {}, {}
        for name in ("full", "Stg1", "Stg3", "-Stg3", "baseline"):
            started = time.perf_counter()
            runs = []
            for seed in cls.seeds:
                base = TrainConfig.from_settings(seed=seed)
                config = TrainConfig.for_ablation(name, base)
                runs.append(run_pipeline(cls.dataset, config, cls.eval_config))
            cls.seconds[name] = time.perf_counter() - started
            cls.h[name] = float(np.mean([run.metrics.H for run in runs]))

    def test_full_pipeline(self):
        self.assertGreaterEqual(self.h["full"], 0.85)
        self.assertLess(self.seconds["full"], 300)

    def test_ablation_ordering(self):
        self.assertGreater(self.h["full"] - self.h["Stg1"], 0.02)
        self.assertGreater(self.h["full"] - self.h["-Stg3"], 0.02)
        self.assertLess(self.h["Stg3"], 0.2 * self.h["full"])
        self.assertGreaterEqual(self.h["full"], self.h["baseline"])
