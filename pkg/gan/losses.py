"""
Training objectives of the three branches.

Critic losses are returned in minimization form,
``-(mean D(real) - mean D(fake)) + gp_lambda * penalty``, together with their
two terms so the trainer can log them separately.
"""
import dataclasses
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from gan.exceptions import ConfigError, DimensionError
from gan.networks import BoundNetwork, regress_attributes
from gan.numcore import (
    DEFAULT_SLOPE,
    Node,
    Tape,
    as_matrix,
    concat_cols,
    detach,
    l2_norm_rows,
    mean_all,
    mul_cols,
    row_sums,
    scale,
    square,
    sub,
    sum_all,
)

RECONSTRUCTION_TARGETS = ("generated", "interpolated")


@dataclass(frozen=True)
class LossWeights:
    gp_lambda: float = 10.0
    rec_beta: float = 0.01

    def __post_init__(self):
        if self.gp_lambda < 0 or self.rec_beta < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self}")

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            field.name: settings.DECGAN["LOSS"][field.name]
            for field in dataclasses.fields(cls)
            if field.name in settings.DECGAN["LOSS"]
        }
        values.update(overrides)
        return cls(**values)


@dataclass
class CriticLoss:
    total: Node
    wasserstein: float
    penalty: float


@dataclass
class CrossBranchLosses:
    critic: CriticLoss
    generator: Node


def _value(x):
    return x.value if isinstance(x, Node) else as_matrix(x)


def interpolate(real, fake, rng, alpha=None):
    """Row-wise ``alpha * real + (1 - alpha) * fake`` with alpha ~ U(0, 1)."""
    real_shape, fake_shape = _value(real).shape, _value(fake).shape
    if real_shape != fake_shape:
        raise DimensionError(
            "interpolate: real and fake batches differ", real_shape, fake_shape
        )
    if alpha is None:
        alpha = rng.uniform(real_shape[0], 1)
    alpha = as_matrix(alpha).reshape(-1, 1)
    alpha = np.broadcast_to(alpha, (real_shape[0], 1)).copy()
    return mul_cols(real, alpha) + mul_cols(fake, 1.0 - alpha)


def gradient_penalty(critic, x_hat, slope=DEFAULT_SLOPE):
    """
    Mean over rows of ``(||grad_input D(input)||_2 - 1)^2``. The input
    gradient is built with ``create_graph`` so the penalty stays
    differentiable with respect to the critic's parameters.
    """
    tape = critic.tape if isinstance(critic, BoundNetwork) else Tape()
    if isinstance(x_hat, Node) and x_hat.tape is tape:
        point = x_hat
    else:
        point = tape.watch(_value(x_hat), "x_hat")
    scores = critic(point, slope)
    input_grad = tape.backward(sum_all(scores), [point], create_graph=True)[point]
    norms = l2_norm_rows(input_grad)
    return mean_all(square(sub(norms, np.ones(norms.shape))))


def wasserstein_estimate(critic, real, fake, slope=DEFAULT_SLOPE):
    """``mean D(real) - mean D(fake)``, the quantity the critic maximizes."""
    return sub(mean_all(critic(real, slope)), mean_all(critic(fake, slope)))


def _critic_loss(critic, real, fake, x_hat, weights, slope):
    estimate = wasserstein_estimate(critic, real, fake, slope)
    penalty = gradient_penalty(critic, x_hat, slope)
    total = scale(estimate, -1.0) + scale(penalty, weights.gp_lambda)
    return CriticLoss(total, -float(estimate.value[0, 0]), float(penalty.value[0, 0]))


def critic_loss_unconditional(
    critic, real, fake, weights, rng, slope=DEFAULT_SLOPE
):
    fake = detach(fake)
    x_hat = interpolate(real, fake, rng)
    return _critic_loss(critic, real, fake, x_hat, weights, slope)


def generator_loss_unconditional(critic, fake, slope=DEFAULT_SLOPE):
    return scale(mean_all(critic(fake, slope)), -1.0)


def critic_loss_conditional(
    critic, real_x, fake_x, c, weights, rng, slope=DEFAULT_SLOPE
):
    """
    Conditional critic loss on ``feature || embedding`` inputs. Only the
    feature block is interpolated; the embedding block stays at ``c`` since
    real and fake rows share their class.
    """
    fake_x = detach(fake_x)
    x_hat = interpolate(real_x, fake_x, rng)
    return _critic_loss(
        critic,
        concat_cols(real_x, c),
        concat_cols(fake_x, c),
        concat_cols(x_hat, c),
        weights,
        slope,
    )


def generator_loss_conditional(critic, fake_x, c, slope=DEFAULT_SLOPE):
    return generator_loss_unconditional(critic, concat_cols(fake_x, c), slope)


def reconstruction_loss(regressor, x_gen, c, weights):
    """``rec_beta`` times the mean squared distance of ``A(x_gen)`` to ``c``."""
    predicted = regress_attributes(regressor, x_gen)
    if predicted.shape != _value(c).shape:
        raise DimensionError(
            "reconstruction_loss: regressed embeddings do not match targets",
            predicted.shape,
            _value(c).shape,
        )
    distances = row_sums(square(sub(predicted, c)))
    return scale(mean_all(distances), weights.rec_beta)


def cross_branch_critic_loss(
    critic, real_unseen, fake_cond, weights, rng, slope=DEFAULT_SLOPE
):
    """The unconditional critic on unseen features against Gc output."""
    return critic_loss_unconditional(
        critic, real_unseen, fake_cond, weights, rng, slope
    )


def cross_branch_generator_loss(critic, fake_cond, slope=DEFAULT_SLOPE):
    return generator_loss_unconditional(critic, fake_cond, slope)


def cross_branch_losses(
    critic, real_unseen, fake_cond, weights, rng, slope=DEFAULT_SLOPE
):
    """
    Both sides of the cross-branch game. The reconstruction term on the
    unseen embeddings is added to the generator side by the caller.
    """
    return CrossBranchLosses(
        critic=cross_branch_critic_loss(
            critic, real_unseen, fake_cond, weights, rng, slope
        ),
        generator=cross_branch_generator_loss(critic, fake_cond, slope),
    )
