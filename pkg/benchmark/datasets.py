"""
Transductive GZSL datasets: the in-memory model, the manifest-based on-disk
format and a synthetic benchmark whose ground truth is known.

On disk a dataset is a directory holding ``manifest.json`` which names:

* ``features`` - headerless CSV, one sample per row, ``feature_dim`` floats
* ``labels`` - headerless CSV, one integer class id per row
* ``embeddings`` - headerless CSV, class id followed by ``embed_dim`` floats
* ``splits`` - JSON with ``seen_classes``, ``unseen_classes`` and row index
  lists ``train``, ``test``, ``unseen_pool`` and optionally ``unseen_test``
  and ``validation``

The manifest also declares ``feature_dim`` and ``embed_dim``; widths are
validated against them, never inferred.
"""
import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

from gan.exceptions import ConfigError
from gan.numcore import Rng

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_KEYS = (
    "features",
    "labels",
    "embeddings",
    "splits",
    "feature_dim",
    "embed_dim",
)


class DatasetValidationError(ValidationError):
    pass


class Pool(NamedTuple):
    features: np.ndarray
    labels: Optional[np.ndarray] = None


class Batch(NamedTuple):
    features: np.ndarray
    labels: Optional[np.ndarray] = None


class ClassEmbeddingTable:
    """Class id -> embedding row, all rows of the same width."""

    def __init__(self, class_ids, matrix):
        self.class_ids = tuple(int(c) for c in class_ids)
        matrix = np.array(matrix, dtype=np.float64)
        self.matrix = matrix.reshape(len(self.class_ids), -1)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DatasetValidationError(
                "duplicate class ids in the embedding table", code="embedding"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise DatasetValidationError(
                "class embeddings contain non-finite entries", code="finite"
            )
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    def __contains__(self, class_id):
        return int(class_id) in self._index

    def __len__(self):
        return len(self.class_ids)

    @property
    def width(self):
        return self.matrix.shape[1]

    def row(self, class_id):
        return self.matrix[self._index[int(class_id)]]

    def rows(self, labels):
        try:
            return self.matrix[[self._index[int(label)] for label in labels]]
        except KeyError as exc:
            raise DatasetValidationError(
                f"class {exc.args[0]} has no embedding", code="embedding"
            ) from exc


@dataclass(frozen=True, eq=False)
class LabeledSplit:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]


class TransductiveView:
    """
    The training-facing surface of a dataset: labeled seen data, unlabeled
    unseen features and the class embeddings. It holds no reference to the
    unseen labels.
    """

    def __init__(
        self, seen_train, unseen_features, embeddings, seen_classes, unseen_classes
    ):
        self.seen_train = seen_train
        self.unseen_features = unseen_features
        self.embeddings = embeddings
        self.seen_classes = seen_classes
        self.unseen_classes = unseen_classes

    @property
    def feature_dim(self):
        return self.seen_train.features.shape[1]

    @property
    def embed_dim(self):
        return self.embeddings.width

    def seen_pool(self):
        return Pool(self.seen_train.features, self.seen_train.labels)

    def unseen_embeddings(self):
        return self.embeddings.rows(self.unseen_classes)


class GzslDataset:
    def __init__(
        self,
        seen_train,
        seen_test,
        unseen_pool,
        unseen_pool_labels,
        embeddings,
        seen_classes,
        unseen_classes,
        unseen_test=None,
        validation=None,
    ):
        self.seen_train = seen_train
        self.seen_test = seen_test
        self.unseen_pool = np.asarray(unseen_pool, dtype=np.float64)
        pool_labels = np.asarray(unseen_pool_labels, dtype=np.int64)
        self._unseen_pool_labels = pool_labels.reshape(-1)
        self.embeddings = embeddings
        self.seen_classes = tuple(int(c) for c in seen_classes)
        self.unseen_classes = tuple(int(c) for c in unseen_classes)
        self.unseen_test = unseen_test
        self.validation = validation
        self.validate()

    def __repr__(self):
        return (
            f"GzslDataset(seen={len(self.seen_classes)}, "
            f"unseen={len(self.unseen_classes)}, "
            f"train={len(self.seen_train)}, test={len(self.seen_test)}, "
            f"pool={self.unseen_pool.shape[0]})"
        )

    @property
    def unseen_pool_labels(self):
        """Evaluation-only: the true classes of the transductive pool."""
        return self._unseen_pool_labels

    @property
    def feature_dim(self):
        return self.seen_train.features.shape[1]

    @property
    def embed_dim(self):
        return self.embeddings.width

    def training_view(self):
        return TransductiveView(
            self.seen_train,
            self.unseen_pool,
            self.embeddings,
            self.seen_classes,
            self.unseen_classes,
        )

    def unseen_evaluation(self):
        """Unseen split for a_u: the disjoint split if present, else the pool."""
        if self.unseen_test is not None:
            return self.unseen_test
        return LabeledSplit(self.unseen_pool, self._unseen_pool_labels)

    def summary(self):
        return {
            "seen_classes": len(self.seen_classes),
            "unseen_classes": len(self.unseen_classes),
            "seen_train": len(self.seen_train),
            "seen_test": len(self.seen_test),
            "unseen_pool": int(self.unseen_pool.shape[0]),
            "feature_dim": self.feature_dim,
            "embed_dim": self.embed_dim,
        }

    def validate(self):
        overlap = sorted(set(self.seen_classes) & set(self.unseen_classes))
        if overlap:
            raise DatasetValidationError(
                f"disjointness violated: classes {overlap} are both seen and unseen",
                code="disjointness",
            )
        if not self.seen_classes or not self.unseen_classes:
            raise DatasetValidationError(
                "both seen and unseen classes are required", code="classes"
            )
        known = self.seen_classes + self.unseen_classes
        missing = [c for c in known if c not in self.embeddings]
        if missing:
            raise DatasetValidationError(
                f"classes {missing} have no embedding", code="embedding"
            )

        train = self.seen_train.features
        width = train.shape[1] if train.ndim == 2 else None
        pool = LabeledSplit(self.unseen_pool, self._unseen_pool_labels)
        splits = [
            ("seen_train", self.seen_train, self.seen_classes),
            ("seen_test", self.seen_test, self.seen_classes),
            ("unseen_pool", pool, self.unseen_classes),
        ]
        if self.unseen_test is not None:
            splits.append(("unseen_test", self.unseen_test, self.unseen_classes))
        if self.validation is not None:
            splits.append(("validation", self.validation, self.seen_classes))
        for name, split, classes in splits:
            if split.features.ndim != 2 or split.features.shape[1] != width:
                raise DatasetValidationError(
                    f"{name}: feature width {split.features.shape} "
                    f"does not match {width}",
                    code="width",
                )
            if split.features.shape[0] != split.labels.shape[0]:
                raise DatasetValidationError(
                    f"{name}: {split.features.shape[0]} rows "
                    f"but {split.labels.shape[0]} labels",
                    code="alignment",
                )
            stray = sorted(set(split.labels.tolist()) - set(classes))
            if stray:
                raise DatasetValidationError(
                    f"{name}: labels {stray} are outside its class set", code="label"
                )
            if not np.all(np.isfinite(split.features)):
                raise DatasetValidationError(
                    f"{name}: non-finite features", code="finite"
                )


@dataclass(frozen=True, eq=False)
class SyntheticSpec:
    n_seen_classes: int = 10
    n_unseen_classes: int = 5
    samples_per_class: int = 200
    feature_dim: int = 64
    embed_dim: int = 16
    mixing: Optional[np.ndarray] = None
    cluster_std: float = 0.1
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n_seen_classes < 1 or self.n_unseen_classes < 1:
            raise ConfigError(
                "synthetic spec needs at least one seen and one unseen class"
            )
        if self.samples_per_class < 2:
            raise ConfigError("synthetic spec needs at least two samples per class")
        if self.feature_dim < 1 or self.embed_dim < 1:
            raise ConfigError("synthetic widths must be positive")
        if not self.cluster_std > 0:
            raise ConfigError(f"cluster_std must be > 0, got {self.cluster_std}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )
        if self.mixing is not None:
            mixing = np.asarray(self.mixing, dtype=np.float64)
            if mixing.shape != (self.embed_dim, self.feature_dim):
                raise ConfigError(
                    f"mixing must be {self.embed_dim}x{self.feature_dim}, "
                    f"got {mixing.shape}"
                )
            object.__setattr__(self, "mixing", mixing)

    @classmethod
    def from_settings(cls, **overrides):
        values = dict(settings.DECGAN["SYNTHETIC"])
        values.update(overrides)
        return cls(**values)

    def as_dict(self):
        values = dataclasses.asdict(self)
        if self.mixing is not None:
            values["mixing"] = self.mixing.tolist()
        return values


def synthetic_class_means(embeddings, mixing):
    """Visual class means ``relu(c(y) . mixing)``."""
    return np.maximum(np.asarray(embeddings) @ np.asarray(mixing), 0.0)


def synthetic_ground_truth(spec):
    """
    Class embeddings and mixing matrix of ``spec``, plus the generator that
    continues the same stream for the samples.
    """
    rng = Rng(spec.seed)
    n_classes = spec.n_seen_classes + spec.n_unseen_classes
    embeddings = rng.uniform(n_classes, spec.embed_dim)
    mixing = spec.mixing
    if mixing is None:
        mixing = rng.normal(
            spec.embed_dim, spec.feature_dim, std=1.0 / np.sqrt(spec.embed_dim)
        )
    return embeddings, mixing, rng


def make_synthetic(spec):
    """
    Seen classes are ``0 .. n_seen - 1``, unseen classes follow. Seen samples
    are split per class into train/test by ``train_fraction``; unseen samples
    form the transductive pool.
    """
    embeddings, mixing, rng = synthetic_ground_truth(spec)
    n_classes = spec.n_seen_classes + spec.n_unseen_classes
    means = synthetic_class_means(embeddings, mixing)

    n_train = int(round(spec.train_fraction * spec.samples_per_class))
    n_train = min(max(n_train, 1), spec.samples_per_class - 1)
    parts = {"train": ([], []), "test": ([], []), "pool": ([], [])}
    for y in range(n_classes):
        noise = rng.normal(
            spec.samples_per_class, spec.feature_dim, std=spec.cluster_std
        )
        samples = np.maximum(means[y] + noise, 0.0)
        labels = np.full(spec.samples_per_class, y)
        if y < spec.n_seen_classes:
            order = rng.permutation(spec.samples_per_class)
            train, test = order[:n_train], order[n_train:]
            parts["train"][0].append(samples[train])
            parts["train"][1].append(labels[train])
            parts["test"][0].append(samples[test])
            parts["test"][1].append(labels[test])
        else:
            parts["pool"][0].append(samples)
            parts["pool"][1].append(labels)

    def stack(name):
        features, labels = parts[name]
        return np.vstack(features), np.concatenate(labels)

    pool_features, pool_labels = stack("pool")
    return GzslDataset(
        seen_train=LabeledSplit(*stack("train")),
        seen_test=LabeledSplit(*stack("test")),
        unseen_pool=pool_features,
        unseen_pool_labels=pool_labels,
        embeddings=ClassEmbeddingTable(range(n_classes), embeddings),
        seen_classes=range(spec.n_seen_classes),
        unseen_classes=range(spec.n_seen_classes, n_classes),
    )


def batch_iter(pool, batch_size, rng, balanced=False):
    """
    Yield ``len(pool) // batch_size`` batches; the last partial batch is
    dropped. Plain mode shuffles the pool once per call. Balanced mode draws
    a class uniformly for every row, then a row uniformly within that class.
    """
    n = pool.features.shape[0]
    if n == 0:
        raise ConfigError("cannot draw batches from an empty pool")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds the pool size {n}")
    n_batches = n // batch_size

    if not balanced:
        order = rng.permutation(n)
        for b in range(n_batches):
            idx = order[b * batch_size : (b + 1) * batch_size]
            labels = None if pool.labels is None else pool.labels[idx]
            yield Batch(pool.features[idx], labels)
        return

    if pool.labels is None:
        raise ConfigError("balanced batches need labels")
    classes = np.unique(pool.labels)
    members = [np.flatnonzero(pool.labels == c) for c in classes]
    sizes = np.array([len(m) for m in members])
    for _ in range(n_batches):
        picks = rng.integers(len(classes), batch_size)
        offsets = rng.integers(sizes[picks], batch_size)
        idx = np.array([members[p][o] for p, o in zip(picks, offsets)], dtype=np.int64)
        yield Batch(pool.features[idx], pool.labels[idx])


def _read_csv(path, dtype=np.float64):
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    try:
        return np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)
    except ValueError as exc:
        raise DatasetValidationError(
            f"{os.path.basename(path)}: {exc}", code="parse"
        ) from exc


def _read_json(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path) as file:
        return json.load(file)


def load_dataset(manifest_path):
    manifest = _read_json(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    for key in MANIFEST_KEYS:
        if key not in manifest:
            raise DatasetValidationError(
                f"manifest is missing {key!r}", code="manifest"
            )

    features = _read_csv(os.path.join(root, manifest["features"]))
    labels = _read_csv(os.path.join(root, manifest["labels"]), dtype=np.int64)
    labels = labels.reshape(-1)
    table = _read_csv(os.path.join(root, manifest["embeddings"]))
    splits = _read_json(os.path.join(root, manifest["splits"]))

    if features.shape[1] != manifest["feature_dim"]:
        raise DatasetValidationError(
            f"features have width {features.shape[1]}, "
            f"manifest declares {manifest['feature_dim']}",
            code="width",
        )
    if table.shape[1] - 1 != manifest["embed_dim"]:
        raise DatasetValidationError(
            f"embeddings have width {table.shape[1] - 1}, "
            f"manifest declares {manifest['embed_dim']}",
            code="width",
        )
    if features.shape[0] != labels.shape[0]:
        raise DatasetValidationError(
            f"{features.shape[0]} feature rows but {labels.shape[0]} labels",
            code="alignment",
        )
    embeddings = ClassEmbeddingTable(table[:, 0].astype(np.int64), table[:, 1:])

    def split(name, required=True):
        if name not in splits:
            if required:
                raise DatasetValidationError(
                    f"splits file is missing {name!r}", code="manifest"
                )
            return None
        idx = np.asarray(splits[name], dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= features.shape[0]):
            raise DatasetValidationError(
                f"split {name!r} indexes past the feature rows", code="alignment"
            )
        return LabeledSplit(features[idx].reshape(-1, features.shape[1]), labels[idx])

    pool = split("unseen_pool")
    return GzslDataset(
        seen_train=split("train"),
        seen_test=split("test"),
        unseen_pool=pool.features,
        unseen_pool_labels=pool.labels,
        embeddings=embeddings,
        seen_classes=splits.get("seen_classes", []),
        unseen_classes=splits.get("unseen_classes", []),
        unseen_test=split("unseen_test", required=False),
        validation=split("validation", required=False),
    )


def save_dataset(dataset, directory):
    """Write ``dataset`` in the manifest format; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    parts = [
        ("train", dataset.seen_train),
        ("test", dataset.seen_test),
        (
            "unseen_pool",
            LabeledSplit(dataset.unseen_pool, dataset.unseen_pool_labels),
        ),
    ]
    if dataset.unseen_test is not None:
        parts.append(("unseen_test", dataset.unseen_test))
    if dataset.validation is not None:
        parts.append(("validation", dataset.validation))

    splits = {
        "seen_classes": list(dataset.seen_classes),
        "unseen_classes": list(dataset.unseen_classes),
    }
    features, labels, start = [], [], 0
    for name, part in parts:
        splits[name] = list(range(start, start + len(part)))
        features.append(part.features)
        labels.append(part.labels)
        start += len(part)

    def path(name):
        return os.path.join(directory, name)

    np.savetxt(path("features.csv"), np.vstack(features), delimiter=",", fmt="%.17g")
    np.savetxt(path("labels.csv"), np.concatenate(labels), fmt="%d")
    ids = np.asarray(dataset.embeddings.class_ids, dtype=np.float64)[:, None]
    table = np.hstack([ids, dataset.embeddings.matrix])
    np.savetxt(path("embeddings.csv"), table, delimiter=",", fmt="%.17g")
    with open(path("splits.json"), "w") as file:
        json.dump(splits, file)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "features": "features.csv",
        "labels": "labels.csv",
        "embeddings": "embeddings.csv",
        "splits": "splits.json",
        "feature_dim": dataset.feature_dim,
        "embed_dim": dataset.embed_dim,
    }
    manifest_path = path("manifest.json")
    with open(manifest_path, "w") as file:
        json.dump(manifest, file, indent=2)
    logger.info("dataset written to %s: %s", directory, dataset.summary())
    return manifest_path
