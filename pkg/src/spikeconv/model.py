"""Feed-forward layer-chain models: shapes, float inference and the on-disk format.

A model is an input shape plus an ordered chain of :class:`LayerSpec` with one
weight tensor and one bias vector per layer (``None`` where a kind has no
parameters). The file format is a JSON manifest next to raw little-endian
float32 blobs::

    {
      "format": "spikeconv-model",
      "format_version": 1,
      "input_shape": [28, 28, 1],
      "layers": [
        {"name": "conv1", "kind": "Conv2D", "features": 16, "kernel": [4, 4],
         "stride": [2, 2], "padding": "valid", "activation": "relu",
         "output_shape": [13, 13, 16],
         "weights": {"file": "conv1.weights.f32", "shape": [4, 4, 1, 16]},
         "bias": {"file": "conv1.bias.f32", "shape": [16]}},
        ...
      ]
    }

Kernels are stored row-major in Keras order: ``(kh, kw, c_in, c_out)`` for
Conv2D, ``(k, c_in, c_out)`` for Conv1D, ``(kh, kw, c)`` for DepthwiseConv2D,
``(n_in, n_out)`` for Dense. BatchNorm stores a ``(4, C)`` tensor whose rows are
gamma, beta, moving mean and moving variance.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .errors import ModelError, NonFiniteParameterError, ShapeError, UnknownLayerError

FORMAT_NAME = "spikeconv-model"
FORMAT_VERSION = 1


class LayerKind(str, enum.Enum):
    CONV2D = "Conv2D"
    CONV1D = "Conv1D"
    DEPTHWISE_CONV2D = "DepthwiseConv2D"
    DENSE = "Dense"
    AVG_POOL2D = "AvgPool2D"
    FLATTEN = "Flatten"
    RESHAPE = "Reshape"
    ZERO_PAD2D = "ZeroPad2D"
    DROPOUT = "Dropout"
    BATCH_NORM = "BatchNorm"
    MAX_POOL2D = "MaxPool2D"
    # Recognised so that manifests exported from Keras load, but not executable
    # and never convertible.
    SIMPLE_RNN = "SimpleRNN"
    LSTM = "LSTM"


WEIGHTED_KINDS = frozenset({LayerKind.CONV2D, LayerKind.CONV1D,
                            LayerKind.DEPTHWISE_CONV2D, LayerKind.DENSE})
STRUCTURAL_KINDS = frozenset({LayerKind.FLATTEN, LayerKind.RESHAPE, LayerKind.ZERO_PAD2D})
OPAQUE_KINDS = frozenset({LayerKind.SIMPLE_RNN, LayerKind.LSTM})
POOL_KINDS = frozenset({LayerKind.AVG_POOL2D, LayerKind.MAX_POOL2D})
CONV_KINDS = frozenset({LayerKind.CONV2D, LayerKind.CONV1D, LayerKind.DEPTHWISE_CONV2D})

ACTIVATIONS = ("relu", "softmax", "none")


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    name: str = ""
    features: int | None = None
    kernel: tuple[int, ...] | None = None
    stride: tuple[int, ...] | None = None
    padding: str = "valid"
    activation: str = "none"
    output_shape: tuple[int, ...] | None = None
    # ZeroPad2D: (before, after) per spatial axis
    pad: tuple[tuple[int, int], ...] | None = None
    # Reshape target (without batch axis)
    target_shape: tuple[int, ...] | None = None
    rate: float | None = None
    epsilon: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        for attr in ("kernel", "stride", "output_shape", "target_shape"):
            val = getattr(self, attr)
            if val is not None:
                object.__setattr__(self, attr, tuple(int(v) for v in val))
        if self.pad is not None:
            object.__setattr__(self, "pad", tuple((int(a), int(b)) for a, b in self.pad))
        if self.padding not in ("valid", "same"):
            raise ModelError(f"layer {self.name!r}: padding must be 'valid' or 'same'")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"layer {self.name!r}: unknown activation {self.activation!r}")

    @property
    def structural(self) -> bool:
        return self.kind in STRUCTURAL_KINDS

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    def to_dict(self) -> dict:
        out: dict = {"name": self.name, "kind": self.kind.value}
        for attr in ("features", "kernel", "stride", "output_shape", "target_shape", "rate"):
            val = getattr(self, attr)
            if val is not None:
                out[attr] = list(val) if isinstance(val, tuple) else val
        if self.pad is not None:
            out["pad"] = [list(p) for p in self.pad]
        if self.kind in CONV_KINDS:
            out["padding"] = self.padding
        if self.kind == LayerKind.BATCH_NORM:
            out["epsilon"] = self.epsilon
        out["activation"] = self.activation
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        try:
            kind = LayerKind(d["kind"])
        except ValueError:
            raise UnknownLayerError(f"unknown layer kind {d.get('kind')!r}") from None
        keys = ("name", "features", "kernel", "stride", "padding", "activation",
                "output_shape", "pad", "target_shape", "rate", "epsilon")
        return cls(kind=kind, **{k: d[k] for k in keys if k in d})


def _conv_out(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / s)
    return (size - k) // s + 1


def same_padding(size: int, k: int, s: int) -> tuple[int, int]:
    """(before, after) zero padding that makes a valid conv reproduce 'same'."""
    out = math.ceil(size / s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def pool_stride(spec: LayerSpec) -> tuple[int, ...]:
    return spec.stride if spec.stride is not None else spec.kernel


def infer_output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape (without batch axis) of ``spec`` applied to ``in_shape``."""
    kind = spec.kind
    where = f"layer {spec.name!r} ({kind.value})"
    if kind in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D):
        if len(in_shape) != 3:
            raise ShapeError(f"{where} needs a rank-3 input, got {in_shape}")
        if spec.kernel is None or len(spec.kernel) != 2:
            raise ShapeError(f"{where} needs a 2-D kernel")
        stride = spec.stride or (1, 1)
        h, w = (_conv_out(n, k, s, spec.padding) for n, k, s in zip(in_shape[:2], spec.kernel, stride))
        if h < 1 or w < 1:
            raise ShapeError(f"{where}: kernel {spec.kernel} larger than input {in_shape}")
        c = spec.features if kind == LayerKind.CONV2D else in_shape[2]
        if c is None:
            raise ShapeError(f"{where} needs 'features'")
        return (h, w, c)
    if kind == LayerKind.CONV1D:
        if len(in_shape) != 2:
            raise ShapeError(f"{where} needs a rank-2 input, got {in_shape}")
        if spec.kernel is None or len(spec.kernel) != 1 or spec.features is None:
            raise ShapeError(f"{where} needs a 1-D kernel and 'features'")
        stride = spec.stride or (1,)
        n = _conv_out(in_shape[0], spec.kernel[0], stride[0], spec.padding)
        if n < 1:
            raise ShapeError(f"{where}: kernel larger than input")
        return (n, spec.features)
    if kind == LayerKind.DENSE:
        if len(in_shape) != 1:
            raise ShapeError(f"{where} needs a flat input, got {in_shape}")
        if spec.features is None:
            raise ShapeError(f"{where} needs 'features'")
        return (spec.features,)
    if kind in POOL_KINDS:
        if len(in_shape) != 3 or spec.kernel is None or len(spec.kernel) != 2:
            raise ShapeError(f"{where} needs a rank-3 input and a 2-D pool size")
        if spec.padding != "valid":
            raise ShapeError(f"{where}: pooling supports valid padding only")
        stride = pool_stride(spec)
        h, w = ((n - k) // s + 1 for n, k, s in zip(in_shape[:2], spec.kernel, stride))
        if h < 1 or w < 1:
            raise ShapeError(f"{where}: pool larger than input")
        return (h, w, in_shape[2])
    if kind == LayerKind.FLATTEN:
        return (int(np.prod(in_shape)),)
    if kind == LayerKind.RESHAPE:
        if spec.target_shape is None or np.prod(spec.target_shape) != np.prod(in_shape):
            raise ShapeError(f"{where}: cannot reshape {in_shape} to {spec.target_shape}")
        return spec.target_shape
    if kind == LayerKind.ZERO_PAD2D:
        if spec.pad is None or len(spec.pad) != len(in_shape) - 1:
            raise ShapeError(f"{where}: padding must give (before, after) per spatial axis")
        spatial = tuple(n + a + b for n, (a, b) in zip(in_shape[:-1], spec.pad))
        return (*spatial, in_shape[-1])
    if kind in (LayerKind.DROPOUT, LayerKind.BATCH_NORM):
        return tuple(in_shape)
    if kind in OPAQUE_KINDS:
        if spec.output_shape is None:
            raise ShapeError(f"{where} must declare output_shape")
        return spec.output_shape
    raise UnknownLayerError(f"unknown layer kind {kind!r}")  # pragma: no cover


def param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]):
    """Expected (weights, bias) shapes, ``None`` for absent parameters."""
    kind = spec.kind
    if kind == LayerKind.CONV2D:
        return (*spec.kernel, in_shape[2], spec.features), (spec.features,)
    if kind == LayerKind.CONV1D:
        return (spec.kernel[0], in_shape[1], spec.features), (spec.features,)
    if kind == LayerKind.DEPTHWISE_CONV2D:
        return (*spec.kernel, in_shape[2]), (in_shape[2],)
    if kind == LayerKind.DENSE:
        return (in_shape[0], spec.features), (spec.features,)
    if kind == LayerKind.BATCH_NORM:
        return (4, in_shape[-1]), None
    return None, None


def _frozen(arr) -> np.ndarray | None:
    if arr is None:
        return None
    out = np.array(arr, dtype=np.float32)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DnnModel:
    """Immutable trained network; construction validates the shape chain."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray | None, ...]
    biases: tuple[np.ndarray | None, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        if not self.layers:
            raise ModelError("empty model")
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise ModelError("layers, weights and biases must have equal length")
        self._validate()

    def _validate(self):
        names = [spec.name for spec in self.layers]
        if len(set(names)) != len(names):
            raise ModelError(f"layer names must be unique: {names}")
        shapes = []
        shape = self.input_shape
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            in_shape = shape
            shape = infer_output_shape(spec, in_shape)
            want_w, want_b = param_shapes(spec, in_shape) if spec.kind not in OPAQUE_KINDS else (None, None)
            if spec.output_shape is not None and spec.output_shape != shape:
                raise ShapeError(f"layer {spec.name!r}: declared output shape "
                                 f"{spec.output_shape} but inferred {shape}")
            if spec.kind not in OPAQUE_KINDS:
                for label, want, got in (("weights", want_w, w), ("bias", want_b, b)):
                    if want is None and got is not None:
                        raise ShapeError(f"layer {spec.name!r} takes no {label}")
                    if want is not None and (got is None or got.shape != tuple(want)):
                        got_shape = None if got is None else got.shape
                        raise ShapeError(f"layer {spec.name!r}: {label} shape {got_shape}, "
                                         f"expected {tuple(want)}")
            shapes.append(shape)
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def input_shape_of(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def with_layers(self, layers: Sequence[LayerSpec], weights: Sequence, biases: Sequence) -> "DnnModel":
        return type(self)(self.input_shape, tuple(layers), tuple(weights), tuple(biases))

    def check_finite(self):
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            for arr in (w, b):
                if arr is not None and not np.all(np.isfinite(arr)):
                    raise NonFiniteParameterError(f"non-finite parameter in layer {spec.name!r}")


@dataclass(frozen=True)
class ActivationTrace:
    """Post-activation tensors of every non-structural layer, keyed by layer name.

    Softmax layers are recorded before the softmax is applied.
    """

    names: tuple[str, ...]
    values: tuple[np.ndarray, ...]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self.names, self.values))

    def __len__(self):
        return len(self.names)


def apply_layer(spec: LayerSpec, x: np.ndarray, weights, bias) -> np.ndarray:
    """Apply one layer's linear part (no activation) to a batch."""
    kind = spec.kind
    if kind in CONV_KINDS and spec.padding == "same":
        spatial = x.shape[1:-1]
        stride = spec.stride or (1,) * len(spatial)
        x = ops.zero_pad(x, tuple(same_padding(n, k, s) for n, k, s in zip(spatial, spec.kernel, stride)))
    if kind == LayerKind.CONV2D:
        return ops.conv2d(x, weights, bias, spec.stride or (1, 1))
    if kind == LayerKind.DEPTHWISE_CONV2D:
        return ops.depthwise_conv2d(x, weights, bias, spec.stride or (1, 1))
    if kind == LayerKind.CONV1D:
        return ops.conv1d(x, weights, bias, (spec.stride or (1,))[0])
    if kind == LayerKind.DENSE:
        return ops.dense(x, weights, bias)
    if kind == LayerKind.AVG_POOL2D:
        return ops.avg_pool2d(x, spec.kernel, pool_stride(spec))
    if kind == LayerKind.MAX_POOL2D:
        return ops.max_pool2d(x, spec.kernel, pool_stride(spec))
    if kind == LayerKind.FLATTEN:
        return x.reshape(x.shape[0], -1)
    if kind == LayerKind.RESHAPE:
        return x.reshape(x.shape[0], *spec.target_shape)
    if kind == LayerKind.ZERO_PAD2D:
        return ops.zero_pad(x, spec.pad)
    if kind == LayerKind.DROPOUT:
        return x
    if kind == LayerKind.BATCH_NORM:
        return ops.batch_norm(x, weights.astype(np.float64), spec.epsilon)
    raise ModelError(f"layer {spec.name!r}: {kind.value} cannot be executed")


def infer(model: DnnModel, x: np.ndarray) -> tuple[np.ndarray, ActivationTrace]:
    """Float inference for one sample or a batch.

    ``x`` is either ``model.input_shape`` (single sample) or
    ``(N, *model.input_shape)``. Returns class scores (softmax applied when the
    last layer asks for it) and the activation trace; both drop the batch axis
    for single-sample calls.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape if not single else x.shape[1:]} does not match "
                         f"model input {model.input_shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("input values must lie in [0, 1]")
    names, values = [], []
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        w64 = None if w is None else w.astype(np.float64)
        b64 = None if b is None else b.astype(np.float64)
        if spec.kind == LayerKind.BATCH_NORM:
            x = apply_layer(spec, x, w, None)
        else:
            x = apply_layer(spec, x, w64, b64)
        if spec.activation == "relu":
            x = ops.relu(x)
        if not spec.structural:
            names.append(spec.name)
            values.append(x[0] if single else x)
    scores = ops.softmax(x) if model.layers[-1].activation == "softmax" else x
    if single:
        scores = scores[0]
    return scores, ActivationTrace(tuple(names), tuple(values))


def predict(model: DnnModel, x: np.ndarray) -> np.ndarray:
    """Argmax class per sample (lowest index wins ties)."""
    scores, _ = infer(model, x)
    return np.argmax(scores, axis=-1)


# --------------------------------------------------------------------------- I/O

def _write_blob(path: Path, arr: np.ndarray, dtype: str):
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C"))


def _read_blob(path: Path, shape, dtype: str, what: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"blob for {what} not found: {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    count = int(np.prod(shape))
    if len(raw) != count * itemsize:
        raise ShapeError(f"{what}: blob {path.name} holds {len(raw) // itemsize} values "
                         f"({len(raw)} bytes), expected {count} for shape {tuple(shape)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def save_model(model: DnnModel, manifest_path) -> None:
    """Write ``model`` as a manifest plus blobs beside it. Round-trips bit-exactly."""
    model.check_finite()
    manifest_path = Path(manifest_path)
    directory = manifest_path.parent
    stem = manifest_path.stem
    layers = []
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        entry = spec.to_dict()
        entry["output_shape"] = list(model.shapes[len(layers)])
        for label, arr in (("weights", w), ("bias", b)):
            if arr is not None:
                fname = f"{stem}.{spec.name}.{label}.f32"
                _write_blob(directory / fname, arr, "<f4")
                entry[label] = {"file": fname, "shape": list(arr.shape)}
        layers.append(entry)
    doc = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION,
           "input_shape": list(model.input_shape), "layers": layers}
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_model(manifest_path) -> DnnModel:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"model manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT_NAME:
        raise ModelError(f"{manifest_path}: not a {FORMAT_NAME} manifest")
    if "format_version" not in doc:
        raise ModelError(f"{manifest_path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelError(f"{manifest_path}: unsupported format_version {doc['format_version']}")
    entries = doc.get("layers") or []
    if not entries:
        raise ModelError("empty model")
    layers, weights, biases = [], [], []
    shape = tuple(doc["input_shape"])
    for i, entry in enumerate(entries):
        spec = LayerSpec.from_dict(entry)
        if not spec.name:
            spec = replace(spec, name=f"layer{i}")
        in_shape = shape
        shape = infer_output_shape(spec, in_shape)
        # element counts come from the size formula, not from the manifest's claim
        if spec.kind not in OPAQUE_KINDS:
            want_w, want_b = param_shapes(spec, in_shape)
        else:
            want_w = want_b = None
        pair = []
        for label, want in (("weights", want_w), ("bias", want_b)):
            ref = entry.get(label)
            if ref is None:
                pair.append(None)
                continue
            declared = tuple(ref["shape"])
            if want is not None and declared != tuple(want):
                raise ShapeError(f"layer {spec.name!r}: declared {label} shape {declared}, "
                                 f"expected {tuple(want)}")
            target = declared
            arr = _read_blob(manifest_path.parent / ref["file"], target, "<f4",
                             f"layer {spec.name!r} {label}")
            pair.append(arr)
        layers.append(spec)
        weights.append(pair[0])
        biases.append(pair[1])
    model = DnnModel(shape_tuple(doc["input_shape"]), tuple(layers), tuple(weights), tuple(biases))
    model.check_finite()
    return model


def shape_tuple(seq) -> tuple[int, ...]:
    return tuple(int(v) for v in seq)
