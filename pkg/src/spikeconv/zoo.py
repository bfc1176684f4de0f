"""Bundled architectures with seeded random weights.

Trained weights are not shipped; these builders exist so that the conversion
pipeline can be exercised end to end.
"""

from __future__ import annotations

import json
from dataclasses import replace
from importlib import resources

import numpy as np

from .model import DnnModel, LayerKind, LayerSpec, infer_output_shape, param_shapes


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


def random_parameters(layers, input_shape, rng: np.random.Generator, bias_std: float = 0.05):
    """He-normal weights and small Gaussian biases for every weighted layer."""
    weights, biases = [], []
    shape = tuple(input_shape)
    for spec in layers:
        want_w, want_b = param_shapes(spec, shape)
        if spec.kind == LayerKind.BATCH_NORM:
            c = shape[-1]
            stats = np.stack([rng.uniform(0.5, 1.5, c), rng.normal(0, 0.1, c),
                              rng.normal(0, 0.1, c), rng.uniform(0.5, 1.5, c)])
            weights.append(stats)
            biases.append(None)
        elif want_w is not None:
            # depthwise kernels have no c_out axis, so this is kh*kw for them
            fan_in = int(np.prod(want_w[:-1]))
            weights.append(_he_normal(rng, want_w, fan_in))
            biases.append(rng.normal(0.0, bias_std, size=want_b))
        else:
            weights.append(None)
            biases.append(None)
        shape = infer_output_shape(spec, shape)
    return weights, biases


def cnet_layers(input_shape=(28, 28, 1), classes: int = 10) -> tuple[tuple[int, ...], list[LayerSpec]]:
    """cNet layer chain; the bundled descriptor targets 28x28x1 inputs and 10 classes."""
    doc = json.loads(resources.files("spikeconv").joinpath("data/cnet.json").read_text())
    layers = []
    shape = tuple(input_shape)
    for entry in doc["layers"]:
        spec = LayerSpec.from_dict({k: v for k, v in entry.items() if k != "output_shape"})
        if spec.kind == LayerKind.DENSE:
            spec = replace(spec, features=classes)
        shape = infer_output_shape(spec, shape)
        layers.append(replace(spec, output_shape=shape))
    return tuple(input_shape), layers


def cnet(seed: int = 0, input_shape=(28, 28, 1), classes: int = 10) -> DnnModel:
    rng = np.random.default_rng(seed)
    in_shape, layers = cnet_layers(input_shape, classes)
    weights, biases = random_parameters(layers, in_shape, rng)
    return DnnModel(in_shape, tuple(layers), tuple(weights), tuple(biases))


def random_conv_net(rng: np.random.Generator, max_side: int = 8) -> DnnModel:
    """Small conv-conv-dense ReLU network on an input of at most ``max_side`` pixels."""
    side = int(rng.integers(5, max_side + 1))
    channels = int(rng.integers(1, 3))
    k1 = int(rng.integers(2, 4))
    k2 = int(rng.integers(2, 4))
    layers = [
        LayerSpec(LayerKind.CONV2D, "conv1", features=int(rng.integers(3, 7)),
                  kernel=(k1, k1), stride=(1, 1), activation="relu"),
        LayerSpec(LayerKind.CONV2D, "conv2", features=int(rng.integers(3, 9)),
                  kernel=(k2, k2), stride=(1, 1), activation="relu"),
        LayerSpec(LayerKind.FLATTEN, "flatten"),
        LayerSpec(LayerKind.DENSE, "dense", features=int(rng.integers(4, 11)), activation="relu"),
    ]
    in_shape = (side, side, channels)
    weights, biases = random_parameters(layers, in_shape, rng)
    return DnnModel(in_shape, tuple(layers), tuple(weights), tuple(biases))
