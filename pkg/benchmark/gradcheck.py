"""
Finite-difference verification of the reverse-mode tape.

Every check compares analytic gradients with central differences at several
random points. Points are resampled until every activation input is at least
``KINK_MARGIN`` away from zero, so piecewise-linear ops are compared where
they are differentiable.
"""
import logging
from dataclasses import dataclass

import numpy as np

from gan import numcore
from gan.exceptions import NumericError
from gan.losses import (
    LossWeights,
    critic_loss_conditional,
    cross_branch_generator_loss,
    generator_loss_conditional,
    generator_loss_unconditional,
    gradient_penalty,
    reconstruction_loss,
)
from gan.networks import dense_network, generate_conditional, linear_regressor
from gan.numcore import Node, Rng, Tape, central_difference, relative_error

logger = logging.getLogger(__name__)

FIRST_ORDER_TOLERANCE = 1e-5
SECOND_ORDER_TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
STEP = 1e-5

CRITIC = ["leaky_relu", "none"]
GENERATOR = ["leaky_relu", "relu"]


@dataclass
class CheckResult:
    op: str
    order: int
    max_error: float
    worst_point: int
    tolerance: float
    points: int

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.op:<28} order={self.order} max_rel_error={self.max_error:.3e} "
            f"tol={self.tolerance:.0e} worst_point={self.worst_point} {status}"
        )


@dataclass
class GradCheck:
    """
    ``build(inputs) -> scalar Node`` over a list of input Nodes; ``sample(rng)``
    draws the input arrays of one point. ``kinks(arrays)`` returns the
    activation inputs that must stay away from zero.
    """

    op: str
    build: object
    sample: object
    kinks: object = None


@dataclass
class ParameterCheck:
    """
    Gradient of ``loss(network, context)`` with respect to the parameters of
    ``template``. ``sample(rng)`` draws ``(parameter arrays, context)``.
    """

    op: str
    order: int
    template: object
    loss: object
    sample: object
    kinks: object = None
    tolerance: float = SECOND_ORDER_TOLERANCE


def _projection(rng, shape):
    weights = rng.normal(*shape)
    return lambda out: numcore.sum_all(numcore.mask(out, weights))


def _away_from_kinks(values):
    return all(np.min(np.abs(v)) > KINK_MARGIN for v in values)


def _draw(check, rng, attempts=200):
    for _ in range(attempts):
        arrays = check.sample(rng)
        if check.kinks is None or _away_from_kinks(check.kinks(arrays)):
            return arrays
    raise NumericError(
        f"{check.op}: could not sample a point away from activation kinks"
    )


def _scalar(check, arrays):
    return float(check.build([Node(numcore.as_matrix(a)) for a in arrays]).value[0, 0])


def run_first_order(check, rng, points=10, h=STEP, tolerance=FIRST_ORDER_TOLERANCE):
    errors = []
    for _ in range(points):
        arrays = _draw(check, rng)
        tape = Tape()
        leaves = [tape.watch(a) for a in arrays]
        grads = tape.backward(check.build(leaves), leaves)
        worst = 0.0
        for i, leaf in enumerate(leaves):

            def fn(point, i=i):
                return _scalar(check, arrays[:i] + [point] + arrays[i + 1 :])

            numeric = central_difference(fn, arrays[i], h)
            worst = max(worst, relative_error(grads[leaf].value, numeric))
        errors.append(worst)
    worst_point = int(np.argmax(errors))
    return CheckResult(check.op, 1, max(errors), worst_point, tolerance, points)


def primitive_checks(rng):
    """One check per differentiable primitive."""
    n, d, m = 3, 4, 2
    proj_nd = _projection(rng, (n, d))
    proj_nm = _projection(rng, (n, m))
    proj_n1 = _projection(rng, (n, 1))
    proj_cat = _projection(rng, (n, d + m))
    proj_dn = _projection(rng, (d, n))
    proj_slice = _projection(rng, (n, 2))
    proj_1d = _projection(rng, (1, d))

    def signed(r, rows, cols, low=0.1):
        values = r.uniform(rows, cols, low, low + 1.0)
        return values * np.where(r.uniform(rows, cols) < 0.5, -1.0, 1.0)

    def single(r):
        return [r.normal(n, d)]

    def pair(r):
        return [r.normal(n, d), r.normal(n, d)]

    return [
        GradCheck(
            "affine",
            lambda x: proj_nm(numcore.affine(x[0], x[1], x[2])),
            lambda r: [r.normal(n, d), r.normal(d, m), r.normal(1, m)],
        ),
        GradCheck(
            "matmul",
            lambda x: proj_nm(numcore.matmul(x[0], x[1])),
            lambda r: [r.normal(n, d), r.normal(d, m)],
        ),
        GradCheck("transpose", lambda x: proj_dn(numcore.transpose(x[0])), single),
        GradCheck("add", lambda x: proj_nd(numcore.add(x[0], x[1])), pair),
        GradCheck("sub", lambda x: proj_nd(numcore.sub(x[0], x[1])), pair),
        GradCheck("mul", lambda x: proj_nd(numcore.mul(x[0], x[1])), pair),
        GradCheck("square", lambda x: proj_nd(numcore.square(x[0])), single),
        GradCheck(
            "mul_cols",
            lambda x: proj_nd(numcore.mul_cols(x[0], x[1])),
            lambda r: [r.normal(n, d), r.normal(n, 1)],
        ),
        GradCheck(
            "reciprocal",
            lambda x: proj_nd(numcore.reciprocal(x[0])),
            lambda r: [signed(r, n, d, low=0.5)],
        ),
        GradCheck("sum_rows", lambda x: proj_1d(numcore.sum_rows(x[0])), single),
        GradCheck("row_sums", lambda x: proj_n1(numcore.row_sums(x[0])), single),
        GradCheck(
            "mean_all",
            lambda x: numcore.mean_all(numcore.square(x[0])),
            lambda r: [r.normal(n, d)],
        ),
        GradCheck(
            "leaky_relu",
            lambda x: proj_nd(numcore.leaky_relu(x[0], 0.2)),
            lambda r: [signed(r, n, d)],
            kinks=lambda a: [a[0]],
        ),
        GradCheck(
            "relu",
            lambda x: proj_nd(numcore.relu(x[0])),
            lambda r: [signed(r, n, d)],
            kinks=lambda a: [a[0]],
        ),
        GradCheck(
            "concat_cols",
            lambda x: proj_cat(numcore.concat_cols(x[0], x[1])),
            lambda r: [r.normal(n, d), r.normal(n, m)],
        ),
        GradCheck(
            "slice_cols",
            lambda x: proj_slice(numcore.slice_cols(x[0], 1, 3)),
            lambda r: [r.normal(n, d)],
        ),
        GradCheck(
            "l2_norm_rows",
            lambda x: proj_n1(numcore.l2_norm_rows(x[0])),
            lambda r: [r.normal(n, d)],
        ),
    ]


def _forward(x, params, activations):
    """NumPy forward pass of a dense network; returns ``(output, pre-activations)``."""
    out, pre = x, []
    for i, activation in enumerate(activations):
        z = out @ params[2 * i] + params[2 * i + 1]
        if activation == "leaky_relu":
            pre.append(z)
            out = np.maximum(z, 0.2 * z)
        elif activation == "relu":
            pre.append(z)
            out = np.maximum(z, 0.0)
        else:
            out = z
    return out, pre


def _network_kinks(activations):
    """Pre-activations of a dense network given ``[x, w0, b0, w1, b1, ...]``."""

    def kinks(arrays):
        return _forward(arrays[0], arrays[1:], activations)[1]

    return kinks


def _network_build(activations, project):
    def build(x):
        out = x[0]
        for i, activation in enumerate(activations):
            out = numcore.affine(out, x[1 + 2 * i], x[2 + 2 * i])
            if activation == "leaky_relu":
                out = numcore.leaky_relu(out, 0.2)
            elif activation == "relu":
                out = numcore.relu(out)
        return project(out)

    return build


def _draw_params(r, widths):
    arrays = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        arrays.append(r.normal(fan_in, fan_out, std=1.0 / np.sqrt(fan_in)))
        arrays.append(r.normal(1, fan_out, std=0.1))
    return arrays


def _network_sample(widths, rows):
    def sample(r):
        return [r.normal(rows, widths[0])] + _draw_params(r, widths)

    return sample


def composite_checks(rng):
    """Two-layer networks and a depth-4 chain of mixed primitives."""
    rows = 3
    generator = ([5, 6, 4], GENERATOR)
    critic = ([4, 6, 1], CRITIC)
    checks = []
    networks = (("generator_network", generator), ("critic_network", critic))
    for op, (widths, activations) in networks:
        checks.append(
            GradCheck(
                op,
                _network_build(activations, _projection(rng, (rows, widths[-1]))),
                _network_sample(widths, rows),
                kinks=_network_kinks(activations),
            )
        )
    proj = _projection(rng, (rows, 1))

    def composed(x):
        left = numcore.mul(x[0], x[1])
        right = numcore.matmul(x[0], x[2])
        return proj(numcore.l2_norm_rows(numcore.concat_cols(left, right)))

    checks.append(
        GradCheck(
            "composed_depth4",
            composed,
            lambda r: [r.normal(rows, 3), r.normal(rows, 3), r.normal(3, 2)],
        )
    )
    return checks


def run_parameter_check(check, rng, points=10, h=STEP):
    errors = []
    for _ in range(points):
        params, context = _draw(check, rng)
        tape = Tape()
        bound = check.template.with_arrays(params).bind(tape)
        grads = tape.backward(check.loss(bound, context), bound.nodes)

        worst = 0.0
        for i, node in enumerate(bound.nodes):

            def fn(point, i=i):
                arrays = params[:i] + [point] + params[i + 1 :]
                network = check.template.with_arrays(arrays)
                return float(check.loss(network, context).value[0, 0])

            numeric = central_difference(fn, params[i], h)
            worst = max(worst, relative_error(grads[node].value, numeric))
        errors.append(worst)
    worst_point = int(np.argmax(errors))
    return CheckResult(
        check.op, check.order, max(errors), worst_point, check.tolerance, points
    )


def run_gradient_penalty_check(
    rng, points=10, h=STEP, tolerance=SECOND_ORDER_TOLERANCE
):
    """
    Parameter gradient of the gradient penalty of a small leaky-ReLU critic,
    which needs a backward pass through a recorded backward pass, against
    central differences of the penalty value.
    """
    widths, rows = [4, 5, 1], 3

    def sample(r):
        return _draw_params(r, widths), {"x_hat": r.normal(rows, widths[0])}

    check = ParameterCheck(
        "gradient_penalty",
        2,
        dense_network("critic", widths, CRITIC, Rng(0), 1.0),
        lambda critic, context: gradient_penalty(critic, context["x_hat"]),
        sample,
        kinks=lambda point: _forward(point[1]["x_hat"], point[0], CRITIC)[1],
        tolerance=tolerance,
    )
    return run_parameter_check(check, rng, points, h)


def loss_checks(feature_dim=4, embed_dim=2, prior_dim=3, rows=3, hidden=5):
    """
    Parameter gradients of the training objectives: the conditional critic
    loss (penalty included) with respect to the critic, and each generator
    objective with respect to its generator.
    """
    weights = LossWeights(gp_lambda=10.0, rec_beta=0.5)
    critic_widths = [feature_dim + embed_dim, hidden, 1]
    d0_widths = [feature_dim, hidden, 1]
    gc_widths = [prior_dim + embed_dim, hidden + 1, feature_dim]
    g2_widths = [prior_dim, hidden + 1, feature_dim]

    def critic_sample(r):
        context = {
            "real": np.abs(r.normal(rows, feature_dim)),
            "fake": np.abs(r.normal(rows, feature_dim)),
            "c": r.uniform(rows, embed_dim),
            "seed": int(r.integers(2**31, 1)[0]),
        }
        return _draw_params(r, critic_widths), context

    def critic_loss(critic, context):
        real, fake, c = context["real"], context["fake"], context["c"]
        return critic_loss_conditional(
            critic, real, fake, c, weights, Rng(context["seed"])
        ).total

    def critic_kinks(point):
        params, context = point
        alpha = Rng(context["seed"]).uniform(rows, 1)
        x_hat = alpha * context["real"] + (1.0 - alpha) * context["fake"]
        pre = []
        for x in (context["real"], context["fake"], x_hat):
            pre.extend(_forward(np.hstack([x, context["c"]]), params, CRITIC)[1])
        return pre

    def conditional_sample(r):
        context = {
            "s": r.normal(rows, prior_dim),
            "c": r.uniform(rows, embed_dim),
            "critic": _draw_params(r, critic_widths),
            "d0": _draw_params(r, d0_widths),
            "regressor": r.normal(feature_dim, embed_dim),
        }
        return _draw_params(r, gc_widths), context

    def conditional_loss(cross):
        def loss(gc, context):
            fake = generate_conditional(gc, context["s"], context["c"])
            if cross:
                critic = dense_network("d0", d0_widths, CRITIC, Rng(0), 1.0)
                adversarial = cross_branch_generator_loss(
                    critic.with_arrays(context["d0"]), fake
                )
            else:
                critic = dense_network("dc", critic_widths, CRITIC, Rng(0), 1.0)
                adversarial = generator_loss_conditional(
                    critic.with_arrays(context["critic"]), fake, context["c"]
                )
            regressor = linear_regressor(context["regressor"])
            rec = reconstruction_loss(regressor, fake, context["c"], weights)
            return adversarial + rec

        return loss

    def conditional_kinks(cross):
        def kinks(point):
            params, context = point
            inputs = np.hstack([context["s"], context["c"]])
            fake, pre = _forward(inputs, params, GENERATOR)
            if cross:
                pre.extend(_forward(fake, context["d0"], CRITIC)[1])
            else:
                critic_input = np.hstack([fake, context["c"]])
                pre.extend(_forward(critic_input, context["critic"], CRITIC)[1])
            return pre

        return kinks

    def unconditional_sample(r):
        return _draw_params(r, g2_widths), {
            "s": r.normal(rows, prior_dim),
            "d0": _draw_params(r, d0_widths),
        }

    def unconditional_loss(g2, context):
        template = dense_network("d0", d0_widths, CRITIC, Rng(0), 1.0)
        critic = template.with_arrays(context["d0"])
        return generator_loss_unconditional(critic, g2(context["s"]))

    def unconditional_kinks(point):
        params, context = point
        fake, pre = _forward(context["s"], params, GENERATOR)
        return pre + _forward(fake, context["d0"], CRITIC)[1]

    return [
        ParameterCheck(
            "critic_loss_conditional",
            2,
            dense_network("dc", critic_widths, CRITIC, Rng(0), 1.0),
            critic_loss,
            critic_sample,
            kinks=critic_kinks,
        ),
        ParameterCheck(
            "generator_loss_conditional",
            1,
            dense_network("gc", gc_widths, GENERATOR, Rng(0), 1.0),
            conditional_loss(cross=False),
            conditional_sample,
            kinks=conditional_kinks(cross=False),
        ),
        ParameterCheck(
            "cross_generator_loss",
            1,
            dense_network("gc", gc_widths, GENERATOR, Rng(0), 1.0),
            conditional_loss(cross=True),
            conditional_sample,
            kinks=conditional_kinks(cross=True),
        ),
        ParameterCheck(
            "generator_loss_unconditional",
            1,
            dense_network("g2", g2_widths, GENERATOR, Rng(0), 1.0),
            unconditional_loss,
            unconditional_sample,
            kinks=unconditional_kinks,
        ),
    ]


def run_suite(seed=0, points=10):
    """Run every check; returns the list of ``CheckResult`` in a fixed order."""
    rng = Rng(seed)
    results = []
    for check in primitive_checks(rng.spawn(0)) + composite_checks(rng.spawn(1)):
        result = run_first_order(check, rng.spawn(len(results) + 2), points)
        logger.debug("%s", result)
        results.append(result)
    results.append(run_gradient_penalty_check(rng.spawn(len(results) + 2), points))
    for check in loss_checks():
        results.append(run_parameter_check(check, rng.spawn(len(results) + 2), points))
    failed = [r.op for r in results if not r.passed]
    if failed:
        logger.warning("gradient check failed for %s", ", ".join(failed))
    return results
