"""
GZSL evaluation: synthesize unseen-class features, fit a softmax classifier on
real seen plus synthetic unseen features and score it with per-class top-1
accuracy and the harmonic mean of seen and unseen accuracy.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

from benchmark.datasets import DatasetValidationError
from gan.exceptions import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    n_per_class: int = 400
    lr: float = 1.0
    epochs: int = 300
    l2: float = 1e-4
    per_class: bool = True

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.lr <= 0 or self.epochs < 0 or self.l2 < 0:
            raise ConfigError(f"invalid classifier settings: {self}")

    @classmethod
    def from_settings(cls, **overrides):
        values = dict(settings.DECGAN["EVAL"])
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class GzslMetrics:
    per_class_acc: Dict[int, float]
    a_s: float
    a_u: float
    H: float
    seen_classes: Tuple[int, ...] = field(default=())
    unseen_classes: Tuple[int, ...] = field(default=())

    def rows(self):
        """``(class, split, accuracy)`` rows, seen classes first."""
        out = []
        splits = (("seen", self.seen_classes), ("unseen", self.unseen_classes))
        for split, classes in splits:
            for c in classes:
                if c in self.per_class_acc:
                    out.append((c, split, self.per_class_acc[c]))
        return out

    def summary(self):
        return f"a_u={self.a_u:.4f} a_s={self.a_s:.4f} H={self.H:.4f}"


def harmonic_mean(a_s, a_u):
    for name, value in (("a_s", a_s), ("a_u", a_u)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(
                f"{name} must lie in [0, 1], got {value}", code="range"
            )
    if a_s + a_u == 0:
        return 0.0
    return 2.0 * a_s * a_u / (a_s + a_u)


def per_class_top1(predictions, labels, class_set, universe=None):
    """
    Fraction of correct predictions for every class of ``class_set`` that has
    samples; classes without samples are left out.
    """
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.shape != labels.shape:
        raise ValidationError(
            f"{predictions.shape[0]} predictions for {labels.shape[0]} labels",
            code="alignment",
        )
    if universe is not None:
        stray = sorted(set(predictions.tolist()) - set(int(c) for c in universe))
        if stray:
            raise ValidationError(
                f"predictions {stray} are outside the label universe",
                code="prediction",
            )
    accuracies = {}
    for c in class_set:
        members = labels == c
        if members.any():
            accuracies[int(c)] = float(np.mean(predictions[members] == c))
    return accuracies


def pooled_top1(predictions, labels):
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.asarray(predictions).reshape(-1) == labels))


def synthesize_unseen(
    g1, gc, embeddings, classes, n_per_class, rng, slope=0.2, baseline=False
):
    """
    ``n_per_class`` synthetic features per class, drawn as ``Gc(G1(z), c(y))``
    (``Gc(z, c(y))`` for the baseline, where ``g1`` is None).
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    missing = [c for c in classes if c not in embeddings]
    if missing:
        raise DatasetValidationError(
            f"classes {missing} have no embedding", code="embedding"
        )
    width = gc.in_dim - embeddings.width if baseline else g1.in_dim
    features, labels = [], []
    for c in classes:
        z = rng.normal(n_per_class, width)
        rows = np.repeat(embeddings.row(c)[None, :], n_per_class, axis=0)
        if baseline:
            out = gc(np.hstack([z, rows]), slope)
        else:
            out = gc(np.hstack([g1(z, slope).value, rows]), slope)
        features.append(out.value)
        labels.append(np.full(n_per_class, int(c)))
    return np.vstack(features), np.concatenate(labels)


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


@dataclass
class SoftmaxClassifier:
    weight: np.ndarray
    bias: np.ndarray
    empty_classes: Tuple[int, ...] = ()

    def logits(self, features):
        return np.asarray(features) @ self.weight + self.bias

    def predict(self, features):
        # argmax keeps the first maximum, so ties go to the lowest class index
        return np.argmax(self.logits(features), axis=1)


def softmax_loss_and_grad(weight, bias, features, labels, l2):
    """Mean cross-entropy plus ``l2 / 2 * ||W||^2`` and its gradients."""
    n = features.shape[0]
    probs = _softmax(features @ weight + bias)
    picked = np.maximum(probs[np.arange(n), labels], 1e-300)
    loss = -np.mean(np.log(picked)) + 0.5 * l2 * np.sum(weight * weight)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return loss, features.T @ delta + l2 * weight, delta.sum(axis=0, keepdims=True)


def train_softmax(features, labels, n_classes, lr, epochs, l2, rng):
    """
    Multinomial logistic regression fit by full-batch gradient descent. The
    step is ``lr`` divided by the smoothness constant of the objective, so
    ``lr`` in (0, 2) is stable regardless of the feature scale.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})", code="label")
    empty = tuple(int(c) for c in np.setdiff1d(np.arange(n_classes), labels))
    if empty:
        logger.warning(
            "softmax training: classes %s have no training rows", list(empty)
        )

    n, d = features.shape
    weight = rng.normal(d, n_classes, std=0.01)
    bias = np.zeros((1, n_classes))
    design = np.hstack([features, np.ones((n, 1))])
    design_norm = np.linalg.norm(design, 2) ** 2 / max(n, 1)
    step = lr / (0.5 * design_norm + l2 + 1e-12)
    for _ in range(epochs):
        _, grad_w, grad_b = softmax_loss_and_grad(weight, bias, features, labels, l2)
        weight = weight - step * grad_w
        bias = bias - step * grad_b
    return SoftmaxClassifier(weight, bias, empty)


def evaluate_gzsl(models, dataset, config, rng, generator=None):
    """
    Train the final classifier on real seen features plus synthetic unseen
    features and score it on the seen test split and the unseen evaluation
    split. ``generator(classes, n_per_class, rng) -> (features, labels)``
    replaces the trained generator when given.
    """
    if generator is None:

        def generator(classes, n_per_class, rng):
            return synthesize_unseen(
                models.g1,
                models.gc,
                dataset.embeddings,
                classes,
                n_per_class,
                rng,
                models.slope,
                models.baseline,
            )

    classes = list(dataset.seen_classes) + list(dataset.unseen_classes)
    index = {c: i for i, c in enumerate(classes)}
    synthetic, synthetic_labels = generator(
        dataset.unseen_classes, config.n_per_class, rng
    )
    train_features = np.vstack([dataset.seen_train.features, synthetic])
    all_labels = np.concatenate([dataset.seen_train.labels, synthetic_labels])
    train_labels = np.array([index[c] for c in all_labels])
    classifier = train_softmax(
        train_features,
        train_labels,
        len(classes),
        config.lr,
        config.epochs,
        config.l2,
        rng,
    )

    unseen_split = dataset.unseen_evaluation()
    per_class = {}
    split_scores = {}
    for name, split, class_set in (
        ("seen", dataset.seen_test, dataset.seen_classes),
        ("unseen", unseen_split, dataset.unseen_classes),
    ):
        predictions = np.asarray(classes)[classifier.predict(split.features)]
        accuracies = per_class_top1(
            predictions, split.labels, class_set, universe=classes
        )
        per_class.update(accuracies)
        if config.per_class:
            values = list(accuracies.values())
            split_scores[name] = float(np.mean(values)) if values else 0.0
        else:
            split_scores[name] = pooled_top1(predictions, split.labels)

    a_s, a_u = split_scores["seen"], split_scores["unseen"]
    return GzslMetrics(
        per_class_acc=per_class,
        a_s=a_s,
        a_u=a_u,
        H=harmonic_mean(a_s, a_u),
        seen_classes=tuple(dataset.seen_classes),
        unseen_classes=tuple(dataset.unseen_classes),
    )
