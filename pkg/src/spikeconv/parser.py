"""Rewrite a model onto the layer kinds the neuromorphic backend supports.

Dropout is removed, BatchNorm is folded into the preceding weighted layer,
MaxPool2D becomes AvgPool2D with the same pool/stride and 'same' convolutions
are split into an explicit ZeroPad2D followed by a valid convolution.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import UnconvertibleLayerError
from .model import (CONV_KINDS, OPAQUE_KINDS, DnnModel, LayerKind, LayerSpec, same_padding)

SUPPORTED_KINDS = frozenset({
    LayerKind.DENSE, LayerKind.FLATTEN, LayerKind.RESHAPE, LayerKind.ZERO_PAD2D,
    LayerKind.AVG_POOL2D, LayerKind.DEPTHWISE_CONV2D, LayerKind.CONV1D, LayerKind.CONV2D,
})


class ParsedModel(DnnModel):
    """A :class:`DnnModel` restricted to :data:`SUPPORTED_KINDS`."""

    def _validate(self):
        for i, spec in enumerate(self.layers):
            if spec.kind not in SUPPORTED_KINDS:
                raise UnconvertibleLayerError(i, spec.kind.value, spec.name)
            if spec.kind in CONV_KINDS and spec.padding != "valid":
                raise ValueError(f"parsed layer {spec.name!r} must use valid padding")
        super()._validate()


def fold_batch_norm(spec: LayerSpec, weights: np.ndarray, bias: np.ndarray,
                    stats: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Fold BN statistics into a weighted layer whose output channel is the last axis."""
    gamma, beta, mean, var = (row.astype(np.float64) for row in stats)
    factor = gamma / np.sqrt(var + epsilon)
    w = weights.astype(np.float64) * factor
    b = (bias.astype(np.float64) - mean) * factor + beta
    return w, b


def parse(model: DnnModel, strict_discard: bool = False) -> ParsedModel:
    """Return the supported-kinds equivalent of ``model``.

    With ``strict_discard`` BatchNorm layers are dropped instead of folded,
    which changes inference results; it exists for fidelity experiments only.
    """
    layers: list[LayerSpec] = []
    weights: list = []
    biases: list = []
    for i, (spec, w, b) in enumerate(zip(model.layers, model.weights, model.biases)):
        kind = spec.kind
        if kind in OPAQUE_KINDS:
            raise UnconvertibleLayerError(i, kind.value, spec.name)
        if kind == LayerKind.DROPOUT:
            continue
        if kind == LayerKind.BATCH_NORM:
            if strict_discard:
                continue
            if not layers or not layers[-1].weighted:
                raise UnconvertibleLayerError(i, "BatchNorm without a preceding weighted layer",
                                              spec.name)
            prev = layers[-1]
            if prev.activation != "none":
                raise UnconvertibleLayerError(i, f"BatchNorm after a {prev.activation} activation",
                                              spec.name)
            weights[-1], biases[-1] = fold_batch_norm(prev, weights[-1], biases[-1], w, spec.epsilon)
            layers[-1] = replace(prev, activation=spec.activation)
            continue
        if kind == LayerKind.MAX_POOL2D:
            layers.append(replace(spec, kind=LayerKind.AVG_POOL2D))
            weights.append(None)
            biases.append(None)
            continue
        if kind in CONV_KINDS and spec.padding == "same":
            in_shape = model.input_shape_of(i)
            stride = spec.stride or (1,) * len(spec.kernel)
            pad = tuple(same_padding(n, k, s) for n, k, s in zip(in_shape[:-1], spec.kernel, stride))
            if any(a or b_ for a, b_ in pad):
                padded = (*(n + a + b_ for n, (a, b_) in zip(in_shape[:-1], pad)), in_shape[-1])
                layers.append(LayerSpec(LayerKind.ZERO_PAD2D, f"{spec.name}_pad", pad=pad,
                                        output_shape=padded))
                weights.append(None)
                biases.append(None)
            spec = replace(spec, padding="valid")
        layers.append(spec)
        weights.append(w)
        biases.append(b)
    return ParsedModel(model.input_shape, tuple(layers), tuple(weights), tuple(biases))
