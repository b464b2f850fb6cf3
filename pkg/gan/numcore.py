"""
Dense float64 matrices, seeded random streams and a reverse-mode tape.

Every differentiable primitive records a ``Node`` on the tape of its inputs.
Backward rules are written with the same primitives, so a backward pass run
with ``create_graph=True`` is recorded too and can be differentiated again.
Gradient penalties rely on this to differentiate an input gradient with
respect to the critic's parameters.
"""
import itertools
from contextlib import contextmanager

import numpy as np

from gan.exceptions import ConfigError, DimensionError, NumericError, UsageError

DEFAULT_SLOPE = 0.2


def as_matrix(values):
    """Copy ``values`` into a 2-D float64 array (scalars become 1x1, vectors a row)."""
    matrix = np.array(values, dtype=np.float64)
    if matrix.ndim == 0:
        return matrix.reshape(1, 1)
    if matrix.ndim == 1:
        return matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got {matrix.ndim} dimensions")
    return matrix


def check_finite(matrix, what="matrix"):
    if not np.all(np.isfinite(matrix)):
        raise NumericError(f"{what} contains non-finite entries")
    return matrix


class Rng:
    """
    Seeded random stream. Identical seeds give identical sequences of draws;
    ``draws`` counts how many scalars have been produced so far.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.draws = 0
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"Rng(seed={self.seed}, draws={self.draws})"

    def normal(self, rows, cols, std=1.0):
        self.draws += rows * cols
        return self._generator.standard_normal((rows, cols)) * std

    def uniform(self, rows, cols, low=0.0, high=1.0):
        self.draws += rows * cols
        return self._generator.uniform(low, high, size=(rows, cols))

    def integers(self, high, size):
        self.draws += int(size)
        return self._generator.integers(0, high, size=size)

    def permutation(self, n):
        self.draws += n
        return self._generator.permutation(n)

    def spawn(self, key):
        """Independent child stream derived from this seed and an integer key."""
        state = np.random.SeedSequence([self.seed, int(key)]).generate_state(1)
        return Rng(int(state[0]))


class Node:
    __slots__ = ("value", "tape", "index", "op", "parents", "vjp", "name")

    def __init__(
        self,
        value,
        tape=None,
        index=None,
        op="constant",
        parents=(),
        vjp=None,
        name=None,
    ):
        self.value = value
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.name = name

    def __repr__(self):
        where = "constant"
        if self.tape is not None:
            where = f"tape {self.tape.id}#{self.index}"
        return f"Node({self.op}, shape={self.shape}, {where})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self):
        return self.tape is not None

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """
    Ordered record of primitive applications. Nodes are appended as they are
    computed, so every node's inputs precede it.
    """

    _ids = itertools.count()

    def __init__(self):
        self.id = next(self._ids)
        self.nodes = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"Tape(id={self.id}, nodes={len(self.nodes)})"

    def watch(self, value, name=None):
        """Register ``value`` as a differentiable leaf."""
        node = Node(as_matrix(value), self, len(self.nodes), "leaf", name=name)
        self.nodes.append(node)
        return node

    def record(self, value, op, parents, vjp):
        node = Node(value, self, len(self.nodes), op, parents, vjp)
        self.nodes.append(node)
        return node

    @contextmanager
    def recording_as(self, flag):
        previous = self.recording
        self.recording = flag
        try:
            yield self
        finally:
            self.recording = previous

    def backward(self, root, wrt, create_graph=False):
        """
        Return ``{node: d root / d node}`` for every node in ``wrt``.

        With ``create_graph`` the gradient computation is itself recorded, so
        the returned gradients can be differentiated again. Nodes that do not
        influence ``root`` get a zero gradient.
        """
        wrt = list(wrt)
        if root.shape != (1, 1):
            raise UsageError(
                f"backward root must be a 1x1 scalar, got shape {root.shape}"
            )
        for node in wrt:
            if not isinstance(node, Node) or node.tape is not self:
                raise UsageError(f"{node!r} is not recorded on {self!r}")
        if root.tape is None:
            return {node: Node(np.zeros_like(node.value)) for node in wrt}
        if root.tape is not self:
            raise UsageError(f"root {root!r} belongs to another tape")

        targets = {node.index for node in wrt}
        active = self.nodes[: root.index + 1]
        relevant = [False] * len(active)
        for node in active:
            relevant[node.index] = node.index in targets or any(
                parent.tape is self and relevant[parent.index]
                for parent in node.parents
            )

        grads = {root.index: Node(np.ones((1, 1)))}
        with self.recording_as(create_graph):
            for node in reversed(active):
                grad = grads.get(node.index)
                if grad is None or node.vjp is None or not relevant[node.index]:
                    continue
                for parent, parent_grad in zip(node.parents, node.vjp(grad)):
                    if parent_grad is None or parent.tape is not self:
                        continue
                    if not relevant[parent.index]:
                        continue
                    previous = grads.get(parent.index)
                    if previous is not None:
                        parent_grad = add(previous, parent_grad)
                    grads[parent.index] = parent_grad

        result = {}
        for node in wrt:
            grad = grads.get(node.index)
            if grad is None:
                grad = Node(np.zeros_like(node.value))
            result[node] = grad
        return result


def backward(tape, root, wrt, create_graph=False):
    return tape.backward(root, wrt, create_graph=create_graph)


def constant(value):
    return Node(as_matrix(value))


def detach(node):
    return Node(_node(node).value)


def _node(x):
    return x if isinstance(x, Node) else Node(as_matrix(x))


def _apply(op, value, parents, vjp):
    check_finite(value, f"output of {op}")
    tapes = {parent.tape for parent in parents if parent.tape is not None}
    if not tapes:
        return Node(value, op=op)
    if len(tapes) > 1:
        raise UsageError(f"{op}: operands are recorded on different tapes")
    tape = tapes.pop()
    if not tape.recording:
        return Node(value, op=op)
    return tape.record(value, op, parents, vjp)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch", a.shape, b.shape)


def add(a, b):
    a, b = _node(a), _node(b)
    _same_shape("add", a, b)
    return _apply("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _node(a), _node(b)
    _same_shape("sub", a, b)
    return _apply("sub", a.value - b.value, (a, b), lambda g: (g, scale(g, -1.0)))


def scale(a, factor):
    a = _node(a)
    factor = float(factor)
    return _apply("scale", a.value * factor, (a,), lambda g: (scale(g, factor),))


def mul(a, b):
    a, b = _node(a), _node(b)
    _same_shape("mul", a, b)
    return _apply("mul", a.value * b.value, (a, b), lambda g: (mul(g, b), mul(g, a)))


def square(a):
    return mul(a, a)


def mask(a, weights):
    """Elementwise product with a constant array; used by piecewise-linear rules."""
    a = _node(a)
    if a.shape != weights.shape:
        raise DimensionError("mask: shape mismatch", a.shape, weights.shape)
    return _apply("mask", a.value * weights, (a,), lambda g: (mask(g, weights),))


def transpose(a):
    a = _node(a)
    return _apply("transpose", a.value.T.copy(), (a,), lambda g: (transpose(g),))


def matmul(a, b):
    a, b = _node(a), _node(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul: inner dimensions differ", a.shape, b.shape)
    return _apply(
        "matmul",
        a.value @ b.value,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def affine(x, weight, bias):
    """``x @ weight + bias`` with the bias row added to every row."""
    x, weight, bias = _node(x), _node(weight), _node(bias)
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            "affine: input width does not match weight rows", x.shape, weight.shape
        )
    if bias.shape != (1, weight.shape[1]):
        raise DimensionError(
            "affine: bias must be a single row matching weight columns",
            bias.shape,
            weight.shape,
        )

    def vjp(g):
        return matmul(g, transpose(weight)), matmul(transpose(x), g), sum_rows(g)

    return _apply("affine", x.value @ weight.value + bias.value, (x, weight, bias), vjp)


def sum_rows(a):
    """Column sums as a single row (1 x cols)."""
    a = _node(a)
    rows = a.shape[0]
    value = a.value.sum(axis=0, keepdims=True)
    return _apply("sum_rows", value, (a,), lambda g: (repeat_rows(g, rows),))


def repeat_rows(a, rows):
    a = _node(a)
    value = np.repeat(a.value, rows, axis=0)
    return _apply("repeat_rows", value, (a,), lambda g: (sum_rows(g),))


def row_sums(a):
    """Row sums as a single column (rows x 1)."""
    a = _node(a)
    cols = a.shape[1]
    value = a.value.sum(axis=1, keepdims=True)
    return _apply("row_sums", value, (a,), lambda g: (repeat_cols(g, cols),))


def repeat_cols(a, cols):
    a = _node(a)
    value = np.repeat(a.value, cols, axis=1)
    return _apply("repeat_cols", value, (a,), lambda g: (row_sums(g),))


def sum_all(a):
    return row_sums(sum_rows(a))


def mean_all(a):
    a = _node(a)
    return scale(sum_all(a), 1.0 / max(a.value.size, 1))


def mul_cols(a, column):
    """Scale every row of ``a`` by the matching entry of an ``rows x 1`` column."""
    a, column = _node(a), _node(column)
    if column.shape != (a.shape[0], 1):
        raise DimensionError("mul_cols: column must be rows x 1", a.shape, column.shape)
    return _apply(
        "mul_cols",
        a.value * column.value,
        (a, column),
        lambda g: (mul_cols(g, column), row_sums(mul(g, a))),
    )


def reciprocal(a):
    """Elementwise ``1 / v``; zero entries map to zero."""
    a = _node(a)
    nonzero = a.value != 0
    value = np.divide(1.0, a.value, out=np.zeros_like(a.value), where=nonzero)
    out = None

    def vjp(g):
        return (scale(mul(g, mul(out, out)), -1.0),)

    out = _apply("reciprocal", value, (a,), vjp)
    return out


def _leaky_relu_slopes(values, slope):
    return np.where(values >= 0, 1.0, slope)


def leaky_relu(x, slope=DEFAULT_SLOPE):
    """``max(v, slope * v)``; the positive branch is used at exactly zero."""
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky ReLU slope must lie in (0, 1), got {slope}")
    x = _node(x)
    slopes = _leaky_relu_slopes(x.value, slope)
    value = np.maximum(x.value, slope * x.value)
    return _apply("leaky_relu", value, (x,), lambda g: (mask(g, slopes),))


def _relu_slopes(values):
    return (values > 0).astype(np.float64)


def relu(x):
    """``max(v, 0)``; the subgradient at exactly zero is 0."""
    x = _node(x)
    slopes = _relu_slopes(x.value)
    return _apply("relu", np.maximum(x.value, 0.0), (x,), lambda g: (mask(g, slopes),))


def concat_cols(a, b):
    a, b = _node(a), _node(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError("concat_cols: row counts differ", a.shape, b.shape)
    left, right = a.shape[1], b.shape[1]
    return _apply(
        "concat_cols",
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        lambda g: (slice_cols(g, 0, left), slice_cols(g, left, left + right)),
    )


def slice_cols(a, start, stop):
    a = _node(a)
    total = a.shape[1]
    if not 0 <= start <= stop <= total:
        raise DimensionError(f"slice_cols: [{start}, {stop}) outside {total} columns")
    value = a.value[:, start:stop].copy()
    return _apply("slice_cols", value, (a,), lambda g: (pad_cols(g, start, total),))


def pad_cols(a, start, total):
    a = _node(a)
    width = a.shape[1]
    value = np.zeros((a.shape[0], total))
    value[:, start : start + width] = a.value
    return _apply(
        "pad_cols", value, (a,), lambda g: (slice_cols(g, start, start + width),)
    )


def l2_norm_rows(a):
    """Euclidean norm of every row (rows x 1); a zero row has a zero gradient."""
    a = _node(a)
    out = None

    def vjp(g):
        unit = mul_cols(a, reciprocal(out))
        return (mul_cols(unit, g),)

    value = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    out = _apply("l2_norm_rows", value, (a,), vjp)
    return out


def central_difference(fn, point, h=1e-5):
    """Central finite-difference gradient of a scalar-valued ``fn`` at ``point``."""
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        upper = float(fn(point))
        flat[i] = saved - h
        lower = float(fn(point))
        flat[i] = saved
        grad_flat[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale_)
