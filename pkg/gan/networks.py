"""
The six networks of the decoupled generator: the structured-prior network G1,
the feature head G2 (G0 = G2 . G1), the conditional generator Gc, the critics
D0 and Dc, and the frozen attribute regressor A.
"""
import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from django.conf import settings

from gan.exceptions import ConfigError, DimensionError
from gan.numcore import (
    DEFAULT_SLOPE,
    Node,
    affine,
    as_matrix,
    check_finite,
    concat_cols,
    leaky_relu,
    relu,
)

ACTIVATIONS = ("leaky_relu", "relu", "none")

# Class-embedding widths of the benchmark datasets.
EMBED_DIMS = {"CUB": 312, "SUN": 102, "FLO": 1024}


@dataclass(frozen=True)
class ModelDims:
    noise_dim: int = 512
    prior_dim: int = 1024
    hidden_dim: int = 4096
    feature_dim: int = 2048
    embed_dim: int = 312

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if int(value) != value or value <= 0:
                raise ConfigError(
                    f"{field.name} must be a positive integer, got {value}"
                )

    @classmethod
    def from_settings(cls, **overrides):
        model = settings.DECGAN["MODEL"]
        names = [field.name for field in dataclasses.fields(cls)]
        values = {name: model[name] for name in names if name in model}
        values.update(overrides)
        return cls(**values)

    @classmethod
    def for_dataset(cls, name, **overrides):
        return cls(embed_dim=EMBED_DIMS[name.upper()], **overrides)


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """
    Parameters of one fully connected network. Instances are never mutated;
    training produces new instances through ``with_arrays``.
    """

    name: str
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError(f"network {self.name} has no layers")
        previous = None
        for i, layer in enumerate(self.layers):
            where = f"{self.name}.{i}"
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(
                    f"{where}: unknown activation {layer.activation!r}"
                )
            if layer.bias.shape != (1, layer.out_dim):
                raise DimensionError(
                    f"{where}: bias does not match weight",
                    layer.bias.shape,
                    layer.weight.shape,
                )
            if previous is not None and previous.out_dim != layer.in_dim:
                raise DimensionError(
                    f"{where}: layers do not chain",
                    previous.weight.shape,
                    layer.weight.shape,
                )
            check_finite(layer.weight, f"{where}.weight")
            check_finite(layer.bias, f"{where}.bias")
            previous = layer

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def arrays(self):
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def parameter_names(self):
        names = []
        for i in range(len(self.layers)):
            names.extend((f"{self.name}.{i}.weight", f"{self.name}.{i}.bias"))
        return names

    def count(self):
        return sum(array.size for array in self.arrays())

    def with_arrays(self, arrays):
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise DimensionError(
                f"{self.name}: expected {2 * len(self.layers)} arrays, "
                f"got {len(arrays)}"
            )
        layers = tuple(
            Layer(arrays[2 * i], arrays[2 * i + 1], layer.activation)
            for i, layer in enumerate(self.layers)
        )
        return NetworkParams(self.name, layers)

    def bind(self, tape, trainable=True):
        return BoundNetwork(self, tape, trainable)

    def __call__(self, x, slope=DEFAULT_SLOPE):
        pairs = [(Node(layer.weight), Node(layer.bias)) for layer in self.layers]
        return _forward(self.layers, pairs, x, slope)


class BoundNetwork:
    """Parameters bound as tape leaves, or as constants when frozen."""

    def __init__(self, params, tape, trainable=True):
        self.params = params
        self.tape = tape
        self.trainable = trainable
        self.nodes = []
        for name, array in zip(params.parameter_names(), params.arrays()):
            if trainable:
                self.nodes.append(tape.watch(array, name))
            else:
                self.nodes.append(Node(array, name=name))

    def __repr__(self):
        return f"BoundNetwork({self.params.name}, trainable={self.trainable})"

    @property
    def name(self):
        return self.params.name

    @property
    def in_dim(self):
        return self.params.in_dim

    def __call__(self, x, slope=DEFAULT_SLOPE):
        pairs = list(zip(self.nodes[0::2], self.nodes[1::2]))
        return _forward(self.params.layers, pairs, x, slope)

    def gradients(self, grad_map):
        """Parameter gradients as arrays; a frozen network reports zeros."""
        if not self.trainable:
            return [np.zeros_like(node.value) for node in self.nodes]
        return [grad_map[node].value for node in self.nodes]


def _forward(layers, pairs, x, slope):
    out = x
    for layer, (weight, bias) in zip(layers, pairs):
        out = affine(out, weight, bias)
        if layer.activation == "leaky_relu":
            out = leaky_relu(out, slope)
        elif layer.activation == "relu":
            out = relu(out)
    return out


def dense_network(name, widths, activations, rng, scale):
    """Weights drawn i.i.d. from normal(0, scale^2), biases zero."""
    if len(widths) != len(activations) + 1:
        raise ConfigError(
            f"{name}: {len(widths)} widths do not fit {len(activations)} layers"
        )
    layers = []
    for fan_in, fan_out, activation in zip(widths[:-1], widths[1:], activations):
        weight = rng.normal(fan_in, fan_out, std=scale)
        layers.append(Layer(weight, np.zeros((1, fan_out)), activation))
    return NetworkParams(name, tuple(layers))


@dataclass(frozen=True, eq=False)
class DecGan:
    """
    Parameter bundle of one model. In baseline mode there is no unconditional
    generator: Gc reads noise of width ``prior_dim`` in place of the
    structured prior.
    """

    dims: ModelDims
    gc: NetworkParams
    d0: NetworkParams
    dc: NetworkParams
    g1: Optional[NetworkParams] = None
    g2: Optional[NetworkParams] = None
    regressor: Optional[NetworkParams] = None
    slope: float = DEFAULT_SLOPE
    baseline: bool = False

    NETWORKS = ("g1", "g2", "gc", "d0", "dc", "regressor")

    def networks(self):
        return {
            name: getattr(self, name)
            for name in self.NETWORKS
            if getattr(self, name) is not None
        }

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def noise_width(self):
        return self.dims.prior_dim if self.baseline else self.dims.noise_dim


def topology(dims, baseline=False):
    """Layer widths and activations of every network, keyed by network name."""
    generator = ["leaky_relu", "relu"]
    critic = ["leaky_relu", "none"]
    hidden, feature, embed = dims.hidden_dim, dims.feature_dim, dims.embed_dim
    networks = {}
    if not baseline:
        networks["g1"] = ([dims.noise_dim, dims.prior_dim], ["leaky_relu"])
        networks["g2"] = ([dims.prior_dim, hidden, feature], generator)
    networks["gc"] = ([dims.prior_dim + embed, hidden, feature], generator)
    networks["d0"] = ([feature, hidden, 1], critic)
    networks["dc"] = ([feature + embed, hidden, 1], critic)
    return networks


def parameter_count(widths):
    pairs = zip(widths[:-1], widths[1:])
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in pairs)


def init_decgan(dims, rng, scale=0.02, baseline=False, slope=DEFAULT_SLOPE):
    if scale < 0:
        raise ConfigError(f"initialization scale must be >= 0, got {scale}")
    networks = {
        name: dense_network(name, widths, activations, rng, scale)
        for name, (widths, activations) in topology(dims, baseline).items()
    }
    return DecGan(dims=dims, slope=slope, baseline=baseline, **networks)


def sample_noise(rng, rows, width):
    return rng.normal(rows, width)


def structured_prior(g1, z, slope=DEFAULT_SLOPE):
    return g1(z, slope)


def generate_unconditional(g1, g2, z, slope=DEFAULT_SLOPE):
    return g2(structured_prior(g1, z, slope), slope)


def generate_conditional(gc, s, c, slope=DEFAULT_SLOPE):
    return gc(concat_cols(s, c), slope)


def discriminate(d, x, slope=DEFAULT_SLOPE):
    return d(x, slope)


def regress_attributes(regressor, x):
    if len(regressor.layers) != 1 or regressor.layers[0].activation != "none":
        raise ConfigError(
            "the attribute regressor must be a single affine layer "
            "without activation"
        )
    return regressor(x)


def conditional_features(models, z, c, g1=None, gc=None):
    """
    Gc(G1(z), c) for the decoupled model or Gc(z, c) for the baseline. ``g1``
    and ``gc`` default to the bundle's (constant) parameters and may be bound
    networks when gradients are needed.
    """
    gc = gc if gc is not None else models.gc
    if models.baseline:
        return generate_conditional(gc, z, c, models.slope)
    g1 = g1 if g1 is not None else models.g1
    prior = structured_prior(g1, z, models.slope)
    return generate_conditional(gc, prior, c, models.slope)


def linear_regressor(weight, bias=None):
    weight = as_matrix(weight)
    if bias is None:
        bias = np.zeros((1, weight.shape[1]))
    return NetworkParams("regressor", (Layer(weight, as_matrix(bias), "none"),))
