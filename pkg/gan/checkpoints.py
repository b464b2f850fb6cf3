"""
Model checkpoints: one ``.npz`` archive with a version tag, the model dims,
the seed, network metadata as JSON and every parameter matrix under
``<network>.<layer>.<weight|bias>``. Arrays are stored in binary, so a
save/load round trip is bitwise exact.
"""
import dataclasses
import json

import numpy as np

from gan.exceptions import ConfigError
from gan.networks import DecGan, Layer, ModelDims, NetworkParams

CHECKPOINT_VERSION = "decgan-checkpoint/1"


def save_checkpoint(path, models, seed):
    meta = {
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "dims": dataclasses.asdict(models.dims),
        "slope": models.slope,
        "baseline": models.baseline,
        "networks": {
            name: [layer.activation for layer in params.layers]
            for name, params in models.networks().items()
        },
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for params in models.networks().values():
        arrays.update(zip(params.parameter_names(), params.arrays()))
    with open(path, "wb") as file:
        np.savez(file, **arrays)


def load_checkpoint(path):
    """Return ``(models, seed)`` stored by ``save_checkpoint``."""
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            version = meta.get("version")
            raise ConfigError(f"{path}: unsupported checkpoint version {version!r}")
        networks = {}
        for name, activations in meta["networks"].items():
            layers = tuple(
                Layer(
                    archive[f"{name}.{i}.weight"].copy(),
                    archive[f"{name}.{i}.bias"].copy(),
                    activation,
                )
                for i, activation in enumerate(activations)
            )
            networks[name] = NetworkParams(name, layers)
    models = DecGan(
        dims=ModelDims(**meta["dims"]),
        slope=meta["slope"],
        baseline=meta["baseline"],
        **networks,
    )
    return models, meta["seed"]
