"""
Three-stage training of the decoupled generator.

Stage 1 alternates the unconditional game (D0 against G0 = G2 . G1) and the
conditional game (Dc against Gc) on labeled seen data. Stage 2 fine-tunes D0
and G0 on the unlabeled unseen pool. Stage 3 fine-tunes Gc through the cross
branch, where D0 judges features generated from unseen-class embeddings.
Every generator update follows ``k`` critic updates on the same real batch.
"""
import csv
import dataclasses
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import FrozenSet, Tuple

import numpy as np
from django.conf import settings

from benchmark.datasets import Pool, batch_iter
from benchmark.evaluation import EvalConfig, evaluate_gzsl
from gan.exceptions import ConfigError, NumericError
from gan.losses import (
    RECONSTRUCTION_TARGETS,
    LossWeights,
    critic_loss_conditional,
    critic_loss_unconditional,
    cross_branch_critic_loss,
    cross_branch_generator_loss,
    generator_loss_conditional,
    generator_loss_unconditional,
    interpolate,
    reconstruction_loss,
)
from gan.networks import (
    ModelDims,
    conditional_features,
    generate_unconditional,
    init_decgan,
    linear_regressor,
)
from gan.numcore import Rng, Tape, detach
from gan.optim import OptimizerState, adam_step

logger = logging.getLogger(__name__)

STAGES = (1, 2, 3)

# Stage masks of the ablation configurations; "baseline" is the non-decoupled
# model with a single conditional generator, trained in two stages.
ABLATIONS = {
    "full": (frozenset({1, 2, 3}), False),
    "Stg1": (frozenset({1}), False),
    "Stg3": (frozenset({3}), False),
    "-Stg1": (frozenset({2, 3}), False),
    "-Stg2": (frozenset({1, 3}), False),
    "-Stg3": (frozenset({1, 2}), False),
    "baseline": (frozenset({1, 3}), True),
}


@dataclass(frozen=True)
class TrainConfig:
    k: int = 5
    batch_size: int = 64
    epochs: Tuple[int, int, int] = (30, 10, 10)
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    stage_mask: FrozenSet[int] = frozenset(STAGES)
    baseline_mode: bool = False
    noise_dim: int = 512
    prior_dim: int = 1024
    hidden_dim: int = 4096
    leaky_slope: float = 0.2
    init_scale: float = 0.02
    ridge: float = 1.0
    regressor_bias: bool = True
    prior_grad_in_conditional: bool = False
    reconstruction_target: str = "generated"

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        stage_mask = frozenset(int(s) for s in self.stage_mask)
        object.__setattr__(self, "stage_mask", stage_mask)
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(
                "learning_rate must be >= 0 (0 is accepted for null-update runs), "
                f"got {self.learning_rate}"
            )
        if len(self.epochs) != 3 or min(self.epochs) < 0:
            raise ConfigError(
                f"epochs must be three non-negative counts, got {self.epochs}"
            )
        if not self.stage_mask or not self.stage_mask <= set(STAGES):
            raise ConfigError(
                f"stage_mask must be a nonempty subset of {STAGES}, "
                f"got {sorted(self.stage_mask)}"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(
                f"leaky_slope must lie in (0, 1), got {self.leaky_slope}"
            )
        if self.ridge < 0:
            raise ConfigError(f"ridge must be >= 0, got {self.ridge}")
        if self.reconstruction_target not in RECONSTRUCTION_TARGETS:
            raise ConfigError(
                f"reconstruction_target must be one of {RECONSTRUCTION_TARGETS}"
            )

    @classmethod
    def from_settings(cls, **overrides):
        train = dict(settings.DECGAN["TRAIN"])
        if "stages" in train:
            train["stage_mask"] = train.pop("stages")
        names = {f.name for f in dataclasses.fields(cls)}
        values = {key: value for key, value in train.items() if key in names}
        values["loss_weights"] = LossWeights.from_settings()
        values.update(overrides)
        return cls(**values)

    @classmethod
    def for_ablation(cls, name, base=None):
        if name not in ABLATIONS:
            raise ConfigError(
                f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}"
            )
        stage_mask, baseline = ABLATIONS[name]
        return dataclasses.replace(
            base or cls(), stage_mask=stage_mask, baseline_mode=baseline
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def stages(self):
        """Stages to run, in order. The baseline never runs stage 2."""
        stages = [s for s in STAGES if s in self.stage_mask]
        if self.baseline_mode:
            stages = [s for s in stages if s != 2]
        return stages

    def dims_for(self, feature_dim, embed_dim):
        return ModelDims(
            self.noise_dim, self.prior_dim, self.hidden_dim, feature_dim, embed_dim
        )

    def as_dict(self):
        values = dataclasses.asdict(self)
        values["stage_mask"] = sorted(self.stage_mask)
        values["epochs"] = list(self.epochs)
        return values

    def digest(self):
        encoded = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(encoded).hexdigest()


class Telemetry:
    """Loss values per step plus update counts per (stage, network group)."""

    FIELDS = ["step", "stage", "loss", "value"]

    def __init__(self):
        self.records = []
        self.updates = Counter()
        self.step = 0

    def count(self, stage, group):
        self.updates[(stage, group)] += 1
        self.step += 1

    def log(self, stage, name, value):
        self.records.append((self.step, stage, name, float(value)))

    def values(self, stage, name):
        return [value for _, s, n, value in self.records if s == stage and n == name]

    def write_csv(self, path):
        with open(path, "w", newline="") as file:
            writer = csv.writer(file)
            writer.writerow(self.FIELDS)
            for step, stage, name, value in self.records:
                writer.writerow([step, stage, name, repr(value)])


def pretrain_regressor(seen_features, seen_embeddings, ridge, bias=True):
    """
    Closed-form ridge regression from features to class embeddings, solved
    through the normal equations. The bias is not penalized.
    """
    features = np.asarray(seen_features, dtype=np.float64)
    targets = np.asarray(seen_embeddings, dtype=np.float64)
    if features.shape[0] != targets.shape[0]:
        raise ConfigError(
            f"regressor: {features.shape[0]} feature rows "
            f"but {targets.shape[0]} embedding rows"
        )
    if ridge < 0:
        raise ConfigError(f"ridge must be >= 0, got {ridge}")
    design = features
    if bias:
        design = np.hstack([features, np.ones((features.shape[0], 1))])
    penalty = np.eye(design.shape[1]) * ridge
    if bias:
        penalty[-1, -1] = 0.0
    normal = design.T @ design + penalty
    if np.linalg.matrix_rank(normal) < normal.shape[0]:
        raise NumericError("normal equations are singular; use ridge > 0")
    try:
        solution = np.linalg.solve(normal, design.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise NumericError("normal equations are singular; use ridge > 0") from exc
    if bias:
        return linear_regressor(solution[:-1], solution[-1:])
    return linear_regressor(solution)


class StageRunner:
    """
    Owns the models and one optimizer state per network while a stage runs.
    Step methods return the gradients of every network taking part, frozen
    ones included (as zeros).
    """

    def __init__(self, models, config, rng, telemetry, stage):
        self.models = models
        self.config = config
        self.rng = rng
        self.telemetry = telemetry
        self.stage = stage
        self.optimizers = {}

    @property
    def weights(self):
        return self.config.loss_weights

    @property
    def slope(self):
        return self.models.slope

    def noise(self, rows):
        return self.rng.normal(rows, self.models.noise_width)

    def _update(self, group, grads):
        for name, network_grads in grads.items():
            params = getattr(self.models, name)
            state = self.optimizers.get(name, OptimizerState())
            arrays, state = adam_step(
                params.arrays(),
                network_grads,
                state,
                self.config,
                names=params.parameter_names(),
            )
            self.optimizers[name] = state
            self.models = self.models.replace(**{name: params.with_arrays(arrays)})
        self.telemetry.count(self.stage, group)

    def _log_critic(self, prefix, loss):
        self.telemetry.log(self.stage, f"{prefix}_wasserstein", -loss.wasserstein)
        self.telemetry.log(self.stage, f"{prefix}_penalty", loss.penalty)
        self.telemetry.log(self.stage, f"{prefix}_critic", loss.total.value[0, 0])

    def critic_step_unconditional(self, real):
        tape = Tape()
        g1 = self.models.g1.bind(tape)
        g2 = self.models.g2.bind(tape)
        critic = self.models.d0.bind(tape)
        noise = self.noise(real.shape[0])
        fake = detach(generate_unconditional(g1, g2, noise, self.slope))
        loss = critic_loss_unconditional(
            critic, real, fake, self.weights, self.rng, self.slope
        )
        grad_map = tape.backward(loss.total, critic.nodes + g1.nodes + g2.nodes)
        grads = {net.name: net.gradients(grad_map) for net in (critic, g1, g2)}
        self._update("d0", {"d0": grads["d0"]})
        self._log_critic("d0", loss)
        return grads

    def generator_step_unconditional(self, rows):
        tape = Tape()
        g1 = self.models.g1.bind(tape)
        g2 = self.models.g2.bind(tape)
        critic = self.models.d0.bind(tape, trainable=False)
        fake = generate_unconditional(g1, g2, self.noise(rows), self.slope)
        loss = generator_loss_unconditional(critic, fake, self.slope)
        grad_map = tape.backward(loss, g1.nodes + g2.nodes)
        grads = {net.name: net.gradients(grad_map) for net in (g1, g2, critic)}
        self._update("g0", {"g1": grads["g1"], "g2": grads["g2"]})
        self.telemetry.log(self.stage, "g0_generator", loss.value[0, 0])
        return grads

    def _bound_generator(self, tape, prior_trainable, trainable=True):
        gc = self.models.gc.bind(tape, trainable=trainable)
        if self.models.baseline:
            return gc, None
        return gc, self.models.g1.bind(tape, trainable=prior_trainable)

    def critic_step_conditional(self, real, embeddings):
        tape = Tape()
        gc, g1 = self._bound_generator(tape, prior_trainable=False, trainable=False)
        critic = self.models.dc.bind(tape)
        noise = self.noise(real.shape[0])
        fake = detach(
            conditional_features(self.models, noise, embeddings, g1=g1, gc=gc)
        )
        loss = critic_loss_conditional(
            critic, real, fake, embeddings, self.weights, self.rng, self.slope
        )
        networks = [net for net in (critic, gc, g1) if net is not None]
        grad_map = tape.backward(loss.total, _trainable_nodes(networks))
        grads = {net.name: net.gradients(grad_map) for net in networks}
        self._update("dc", {"dc": grads["dc"]})
        self._log_critic("dc", loss)
        return grads

    def _reconstruction(self, real, fake, embeddings):
        if self.weights.rec_beta == 0:
            return None
        if self.models.regressor is None:
            raise ConfigError(
                "the reconstruction loss needs a pretrained attribute regressor"
            )
        target = fake
        if self.config.reconstruction_target == "interpolated":
            target = interpolate(real, fake, self.rng)
        regressor = self.models.regressor
        return reconstruction_loss(regressor, target, embeddings, self.weights)

    def generator_step_conditional(self, real, embeddings):
        tape = Tape()
        trains_prior = self.config.prior_grad_in_conditional
        gc, g1 = self._bound_generator(tape, prior_trainable=trains_prior)
        critic = self.models.dc.bind(tape, trainable=False)
        noise = self.noise(real.shape[0])
        fake = conditional_features(self.models, noise, embeddings, g1=g1, gc=gc)
        loss = generator_loss_conditional(critic, fake, embeddings, self.slope)
        rec = self._reconstruction(real, fake, embeddings)
        total = loss if rec is None else loss + rec
        networks = [net for net in (gc, g1, critic) if net is not None]
        grad_map = tape.backward(total, _trainable_nodes(networks))
        grads = {net.name: net.gradients(grad_map) for net in networks}
        update = {"gc": grads["gc"]}
        if g1 is not None and trains_prior:
            update["g1"] = grads["g1"]
        self._update("gc", update)
        self.telemetry.log(self.stage, "gc_generator", loss.value[0, 0])
        if rec is not None:
            self.telemetry.log(self.stage, "gc_reconstruction", rec.value[0, 0])
        return grads

    def _unseen_embeddings(self, unseen_embeddings, rows):
        picks = self.rng.integers(unseen_embeddings.shape[0], rows)
        return unseen_embeddings[picks]

    def critic_step_cross(self, real_unseen, unseen_embeddings):
        tape = Tape()
        gc, g1 = self._bound_generator(tape, prior_trainable=False, trainable=False)
        critic = self.models.d0.bind(tape)
        rows = real_unseen.shape[0]
        c = self._unseen_embeddings(unseen_embeddings, rows)
        fake = detach(
            conditional_features(self.models, self.noise(rows), c, g1=g1, gc=gc)
        )
        loss = cross_branch_critic_loss(
            critic, real_unseen, fake, self.weights, self.rng, self.slope
        )
        networks = [net for net in (critic, gc, g1) if net is not None]
        grad_map = tape.backward(loss.total, _trainable_nodes(networks))
        grads = {net.name: net.gradients(grad_map) for net in networks}
        self._update("d0", {"d0": grads["d0"]})
        self._log_critic("cross", loss)
        return grads

    def generator_step_cross(self, real_unseen, unseen_embeddings):
        tape = Tape()
        gc, g1 = self._bound_generator(tape, prior_trainable=False)
        critic = self.models.d0.bind(tape, trainable=False)
        dc = self.models.dc.bind(tape, trainable=False)
        rows = real_unseen.shape[0]
        c = self._unseen_embeddings(unseen_embeddings, rows)
        fake = conditional_features(self.models, self.noise(rows), c, g1=g1, gc=gc)
        loss = cross_branch_generator_loss(critic, fake, self.slope)
        rec = self._reconstruction(real_unseen, fake, c)
        total = loss if rec is None else loss + rec
        networks = [net for net in (gc, g1, critic, dc) if net is not None]
        grad_map = tape.backward(total, gc.nodes)
        grads = {net.name: net.gradients(grad_map) for net in networks}
        self._update("gc", {"gc": grads["gc"]})
        self.telemetry.log(self.stage, "cross_generator", loss.value[0, 0])
        if rec is not None:
            self.telemetry.log(self.stage, "cross_reconstruction", rec.value[0, 0])
        return grads

    def end_epoch(self, epoch, epochs):
        summary = {}
        for name in ("d0_wasserstein", "dc_wasserstein", "cross_wasserstein"):
            values = self.telemetry.values(self.stage, name)
            if values:
                summary[name] = float(np.mean(values[-50:]))
        logger.info(
            "stage %s epoch %s/%s %s", self.stage, epoch + 1, epochs, summary
        )


def _trainable_nodes(networks):
    return [node for net in networks for node in net.nodes if node.requires_grad]


def _runner(models, config, rng, telemetry, stage):
    telemetry = telemetry if telemetry is not None else Telemetry()
    return StageRunner(models, config, rng, telemetry, stage)


def stage1(models, seen_data, config, rng, telemetry=None):
    """
    Alternate the unconditional and the conditional game on labeled seen
    data. ``seen_data`` is a ``Pool`` of seen features and labels, plus the
    class-embedding table to look labels up in.
    """
    pool, table = seen_data
    if pool.features.shape[0] == 0:
        raise ConfigError("stage 1 needs labeled seen data")
    runner = _runner(models, config, rng, telemetry, 1)
    epochs = config.epochs[0]
    for epoch in range(epochs):
        for batch in batch_iter(pool, config.batch_size, rng, balanced=True):
            embeddings = table.rows(batch.labels)
            if not models.baseline:
                for _ in range(config.k):
                    runner.critic_step_unconditional(batch.features)
                runner.generator_step_unconditional(batch.features.shape[0])
            for _ in range(config.k):
                runner.critic_step_conditional(batch.features, embeddings)
            runner.generator_step_conditional(batch.features, embeddings)
        runner.end_epoch(epoch, epochs)
    return runner.models


def stage2(models, unseen_features, config, rng, telemetry=None):
    """Fine-tune D0 and G0 on the unlabeled unseen pool."""
    if models.baseline:
        raise ConfigError(
            "stage 2 fine-tunes the unconditional generator, "
            "which the baseline does not have"
        )
    if unseen_features.shape[0] == 0:
        raise ConfigError("stage 2 needs unlabeled unseen features")
    runner = _runner(models, config, rng, telemetry, 2)
    epochs = config.epochs[1]
    for epoch in range(epochs):
        for batch in batch_iter(Pool(unseen_features), config.batch_size, rng):
            for _ in range(config.k):
                runner.critic_step_unconditional(batch.features)
            runner.generator_step_unconditional(batch.features.shape[0])
        runner.end_epoch(epoch, epochs)
    return runner.models


def stage3(models, unseen_features, unseen_embeddings, config, rng, telemetry=None):
    """Fine-tune Gc through the cross branch; G1, G2 and Dc stay frozen."""
    if unseen_embeddings is None or len(unseen_embeddings) == 0:
        raise ConfigError("stage 3 needs the unseen class embeddings")
    if unseen_features.shape[0] == 0:
        raise ConfigError("stage 3 needs unlabeled unseen features")
    unseen_embeddings = np.asarray(unseen_embeddings, dtype=np.float64)
    runner = _runner(models, config, rng, telemetry, 3)
    epochs = config.epochs[2]
    for epoch in range(epochs):
        for batch in batch_iter(Pool(unseen_features), config.batch_size, rng):
            for _ in range(config.k):
                runner.critic_step_cross(batch.features, unseen_embeddings)
            runner.generator_step_cross(batch.features, unseen_embeddings)
        runner.end_epoch(epoch, epochs)
    return runner.models


@dataclass
class PipelineResult:
    models: object
    metrics: object
    telemetry: Telemetry


def train_models(view, config, telemetry=None, on_stage_end=None):
    """
    Run the configured stages on the training-facing view of a dataset. The
    view never exposes the labels of the unseen pool.
    """
    telemetry = telemetry if telemetry is not None else Telemetry()
    rng = Rng(config.seed)
    dims = config.dims_for(view.feature_dim, view.embed_dim)
    models = init_decgan(
        dims,
        rng.spawn(0),
        config.init_scale,
        baseline=config.baseline_mode,
        slope=config.leaky_slope,
    )
    seen = view.seen_pool()
    regressor = pretrain_regressor(
        seen.features,
        view.embeddings.rows(seen.labels),
        config.ridge,
        config.regressor_bias,
    )
    models = models.replace(regressor=regressor)

    for stage in config.stages():
        stage_rng = rng.spawn(stage)
        logger.info(
            "stage %s started (seed %s, baseline=%s)",
            stage,
            config.seed,
            config.baseline_mode,
        )
        if stage == 1:
            seen_data = (seen, view.embeddings)
            models = stage1(models, seen_data, config, stage_rng, telemetry)
        elif stage == 2:
            unseen = view.unseen_features
            models = stage2(models, unseen, config, stage_rng, telemetry)
        else:
            models = stage3(
                models,
                view.unseen_features,
                view.unseen_embeddings(),
                config,
                stage_rng,
                telemetry,
            )
        if on_stage_end is not None:
            on_stage_end(stage, models)
    return models, telemetry


def run_pipeline(dataset, config, eval_config=None, on_stage_end=None):
    telemetry = Telemetry()
    models, telemetry = train_models(
        dataset.training_view(), config, telemetry, on_stage_end
    )
    eval_config = eval_config or EvalConfig.from_settings()
    eval_rng = Rng(config.seed).spawn(len(STAGES) + 1)
    metrics = evaluate_gzsl(models, dataset, eval_config, rng=eval_rng)
    logger.info("run finished: %s", metrics.summary())
    return PipelineResult(models, metrics, telemetry)
