"""DNN-to-SNN conversion: activation-based normalization, then integer quantization.

Units. After :func:`normalize`, layer activations are expressed in units of
their calibration percentile ``lambda_l`` (so typical activations are <= 1).
:func:`quantize` maps those normalized units onto integers with a per-layer
*drive scale* ``s`` (integer current per normalized unit) and sets the firing
threshold to ``round(dthir * s)``. A spiking neuron therefore fires at a rate
of ``activation / dthir``.

Because every spiking layer emits at ``1/dthir`` of its normalized activation,
the layer that consumes those spikes must undo that attenuation. Each layer
carries an ``input_gain`` (1 for the layer fed by the input encoding, ``dthir``
for every later one) and its integer weights use ``weight_scale = input_gain * s``
so that the per-step drive equals ``s * (W a + b)``. Rates thus stay
``activation / dthir`` at every depth instead of shrinking geometrically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateLayerError, ModelError, ShapeError
from .intmath import INT32_MAX, is_power_of_two, round_half_away
from .model import (DnnModel, LayerKind, LayerSpec, infer, infer_output_shape, param_shapes,
                    shape_tuple)
from .parser import ParsedModel, parse

log = logging.getLogger(__name__)

WEIGHT_MIN, WEIGHT_MAX = -256, 255
SCALE_FLOOR = 1e-6
SNN_FORMAT_NAME = "spikeconv-snn"
SNN_FORMAT_VERSION = 1
RESET_MODES = ("soft", "hard")


@dataclass(frozen=True)
class ConversionConfig:
    dthir: int = 2
    percentile: float = 99.9
    calibration_set: int = 100
    reset_mode: str = "soft"
    # below 100, weights above this percentile of |w| saturate instead of setting the scale
    weight_percentile: float = 100.0
    bias_range: tuple[int, int] = (-4096, 4095)
    # let the bias range cap the scale so that biases are not clipped
    bias_guard: bool = True
    # allow layers whose weights are all zero, scaling from the biases instead
    bias_only: bool = False
    input_threshold: int = 1024
    decay_u: float = 0.0
    decay_v: float = 1.0
    strict_discard: bool = False

    def __post_init__(self):
        if not is_power_of_two(self.dthir):
            raise ValueError(f"dthir must be a power of two >= 1, got {self.dthir}")
        object.__setattr__(self, "dthir", int(self.dthir))
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must lie in (0, 100]")
        if not 0 < self.weight_percentile <= 100:
            raise ValueError("weight_percentile must lie in (0, 100]")
        if self.calibration_set < 1:
            raise ValueError("calibration_set must be >= 1")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        lo, hi = self.bias_range
        if not lo < 0 < hi:
            raise ValueError("bias_range must straddle zero")
        object.__setattr__(self, "bias_range", (int(lo), int(hi)))
        if self.input_threshold < 1:
            raise ValueError("input_threshold must be positive")
        for name in ("decay_u", "decay_v"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class LayerScales:
    """Activation scale per layer of the parsed model.

    Structural and pooling layers carry the scale of their input: pooling is
    linear and never raises the maximum, so it needs no rescaling of its own.
    """

    values: tuple[float, ...]
    fallback: tuple[int, ...] = ()

    def __len__(self):
        return len(self.values)


def percentile_of_positive(values: np.ndarray, percentile: float) -> float | None:
    pos = values[values > 0]
    if pos.size == 0:
        return None
    return float(np.percentile(pos, percentile))


def estimate_scales(model: DnnModel, calibration: np.ndarray, percentile: float = 99.9) -> LayerScales:
    """Percentile of each layer's positive activations over the calibration set."""
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.shape == model.input_shape:
        calibration = calibration[None]
    if calibration.shape[0] < 1:
        raise ValueError("need at least one calibration sample")
    _, trace = infer(model, calibration)
    values: list[float] = []
    fallback: list[int] = []
    prev = 1.0
    for i, spec in enumerate(model.layers):
        if spec.structural or spec.kind == LayerKind.AVG_POOL2D:
            values.append(prev)
            continue
        lam = percentile_of_positive(trace[spec.name], percentile)
        if lam is None:
            log.warning("layer %r has no positive calibration activations; using scale 1",
                        spec.name)
            fallback.append(i)
            lam = 1.0
        lam = max(lam, SCALE_FLOOR)
        values.append(lam)
        prev = lam
    return LayerScales(tuple(values), tuple(fallback))


def normalize(model: ParsedModel, scales: LayerScales | Sequence[float]) -> ParsedModel:
    """Rescale weights by ``lambda_prev / lambda`` and biases by ``1 / lambda``."""
    values = scales.values if isinstance(scales, LayerScales) else tuple(scales)
    if len(values) != len(model.layers):
        raise ValueError("one scale per layer is required")
    if any(not (v > 0 and math.isfinite(v)) for v in values):
        raise ValueError("scales must be positive and finite")
    weights, biases = [], []
    prev = 1.0
    for spec, w, b, lam in zip(model.layers, model.weights, model.biases, values):
        if spec.weighted:
            weights.append(w.astype(np.float64) * (prev / lam))
            biases.append(b.astype(np.float64) / lam)
        else:
            if spec.kind == LayerKind.AVG_POOL2D and lam != prev:
                raise ValueError(f"pooling layer {spec.name!r} must share its input's scale")
            weights.append(w)
            biases.append(b)
        prev = lam
    return ParsedModel(model.input_shape, model.layers, tuple(weights), tuple(biases))


# ----------------------------------------------------------------------------- SNN model

def is_spiking(spec: LayerSpec) -> bool:
    return spec.weighted or spec.kind == LayerKind.AVG_POOL2D


def _int_array(arr) -> np.ndarray | None:
    if arr is None:
        return None
    out = np.array(arr, dtype=np.int32)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SnnLayer:
    spec: LayerSpec
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    threshold: int = 0
    scale: float = 1.0
    weight_scale: float = 1.0
    input_gain: float = 1.0
    activation_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weights", _int_array(self.weights))
        object.__setattr__(self, "bias", _int_array(self.bias))

    @property
    def spiking(self) -> bool:
        return is_spiking(self.spec)

    @property
    def name(self) -> str:
        return self.spec.name


@dataclass(frozen=True)
class SnnModel:
    """Integer spiking network: quantized weights, bias currents and thresholds."""

    input_shape: tuple[int, ...]
    layers: tuple[SnnLayer, ...]
    reset_mode: str = "soft"
    dthir: int = 2
    input_threshold: int = 1024
    decay_u: float = 0.0
    decay_v: float = 1.0
    v_rest: int = 0
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", shape_tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        if not (0 <= self.decay_u <= 1 and 0 <= self.decay_v <= 1):
            raise ValueError("decay factors must lie in [0, 1]")
        if self.input_threshold <= 0:
            raise ValueError("input threshold must be positive")
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            in_shape = shape
            shape = infer_output_shape(layer.spec, in_shape)
            if layer.spiking:
                if layer.threshold <= 0:
                    raise ValueError(f"layer {layer.name!r}: threshold must be positive")
                if self.v_rest >= layer.threshold:
                    raise ValueError(f"layer {layer.name!r}: v_rest must lie below threshold")
                w = layer.weights
                if w is None or w.size == 0:
                    raise ShapeError(f"layer {layer.name!r} needs integer weights")
                if w.min() < WEIGHT_MIN or w.max() > WEIGHT_MAX:
                    raise ValueError(f"layer {layer.name!r}: weights outside [{WEIGHT_MIN}, {WEIGHT_MAX}]")
                want_w, want_b = param_shapes(layer.spec, in_shape)
                if want_w is not None and w.shape != tuple(want_w):
                    raise ShapeError(f"layer {layer.name!r}: weights shape {w.shape}, expected {want_w}")
                if want_b is not None and (layer.bias is None or layer.bias.shape != tuple(want_b)):
                    raise ShapeError(f"layer {layer.name!r}: bias shape mismatch")
            shapes.append(shape)
        object.__setattr__(self, "shapes", tuple(shapes))

    def spiking_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.spiking]

    def input_shape_of(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape


def threshold_for(dthir: float, scale: float) -> int:
    return round_half_away(dthir * scale)


@dataclass
class LayerReport:
    name: str
    activation_scale: float
    max_abs_weight: float
    weight_scale: float
    scale: float
    threshold: int
    input_gain: float
    quantization_mse: float
    clipped_weights: int
    clipped_biases: int
    scale_fallback: bool = False
    scale_source: str = "weights"


@dataclass
class NormalizationReport:
    dthir: int
    reset_mode: str
    percentile: float
    layers: list[LayerReport] = field(default_factory=list)

    @property
    def warnings(self) -> list[str]:
        return [f"layer {r.name!r}: scale fallback" for r in self.layers if r.scale_fallback]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationReport":
        layers = [LayerReport(**entry) for entry in d.get("layers", [])]
        return cls(d["dthir"], d["reset_mode"], d["percentile"], layers)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormalizationReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _pool_weight(spec: LayerSpec) -> np.ndarray:
    kh, kw = spec.kernel
    return np.array([1.0 / (kh * kw)])


def quantize(model: ParsedModel, config: ConversionConfig,
             scales: LayerScales | None = None) -> tuple[SnnModel, NormalizationReport]:
    """Map a normalized parsed model onto integer weights, biases and thresholds."""
    lam = scales.values if scales is not None else (1.0,) * len(model.layers)
    fallback = set(scales.fallback) if scales is not None else set()
    bias_lo, bias_hi = config.bias_range
    report = NormalizationReport(config.dthir, config.reset_mode, config.percentile)
    layers: list[SnnLayer] = []
    first = True
    for i, (spec, w, b) in enumerate(zip(model.layers, model.weights, model.biases)):
        if not is_spiking(spec):
            layers.append(SnnLayer(spec))
            continue
        gain = 1.0 if first else float(config.dthir)
        first = False
        w_norm = _pool_weight(spec) if w is None else w.astype(np.float64)
        b_norm = None if b is None else b.astype(np.float64)
        abs_w = np.abs(w_norm)
        max_w = float(abs_w.max()) if abs_w.size else 0.0
        ref_w = max_w if config.weight_percentile >= 100 else \
            float(np.percentile(abs_w, config.weight_percentile))
        max_b = float(np.abs(b_norm).max()) if b_norm is not None and b_norm.size else 0.0
        source = "weights"
        if ref_w <= 0.0:
            if not (config.bias_only and max_b > 0):
                raise DegenerateLayerError(f"degenerate layer {spec.name!r}: all weights are zero")
            weight_scale = gain * bias_hi / max_b
            source = "bias"
        else:
            weight_scale = WEIGHT_MAX / ref_w
            if config.bias_guard and max_b > 0 and gain * bias_hi / max_b < weight_scale:
                weight_scale = gain * bias_hi / max_b
                source = "bias"
        scale = weight_scale / gain
        if not (math.isfinite(scale) and scale > 0):
            raise DegenerateLayerError(f"degenerate layer {spec.name!r}: non-finite scale")

        raw_w = round_half_away(w_norm * weight_scale)
        clipped_w = int(np.count_nonzero((raw_w < WEIGHT_MIN) | (raw_w > WEIGHT_MAX)))
        w_q = np.clip(raw_w, WEIGHT_MIN, WEIGHT_MAX)
        clipped_b = 0
        b_q = None
        if b_norm is not None:
            raw_b = round_half_away(b_norm * scale)
            clipped_b = int(np.count_nonzero((raw_b < bias_lo) | (raw_b > bias_hi)))
            b_q = np.clip(raw_b, bias_lo, bias_hi)
        theta = threshold_for(config.dthir, scale)
        if theta < 1 or theta > INT32_MAX:
            raise DegenerateLayerError(f"degenerate layer {spec.name!r}: threshold {theta} "
                                       "outside the representable range")
        mse = float(np.mean((w_q / weight_scale - w_norm) ** 2))
        layers.append(SnnLayer(spec, w_q, b_q, theta, scale, weight_scale, gain, float(lam[i])))
        report.layers.append(LayerReport(
            name=spec.name, activation_scale=float(lam[i]), max_abs_weight=max_w,
            weight_scale=weight_scale, scale=scale, threshold=theta, input_gain=gain,
            quantization_mse=mse, clipped_weights=clipped_w, clipped_biases=clipped_b,
            scale_fallback=i in fallback, scale_source=source))
    snn = SnnModel(model.input_shape, tuple(layers), config.reset_mode, config.dthir,
                   config.input_threshold, config.decay_u, config.decay_v)
    return snn, report


@dataclass(frozen=True)
class ConversionResult:
    parsed: ParsedModel
    scales: LayerScales
    normalized: ParsedModel
    snn: SnnModel
    report: NormalizationReport


def convert_full(model: DnnModel, calibration: np.ndarray, config: ConversionConfig) -> ConversionResult:
    """Parse, estimate scales, normalize and quantize, keeping every intermediate."""
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.shape == model.input_shape:
        calibration = calibration[None]
    calibration = calibration[: config.calibration_set]
    parsed = parse(model, strict_discard=config.strict_discard)
    scales = estimate_scales(parsed, calibration, config.percentile)
    normalized = normalize(parsed, scales)
    snn, report = quantize(normalized, config, scales)
    return ConversionResult(parsed, scales, normalized, snn, report)


def convert(model: DnnModel, calibration: np.ndarray,
            config: ConversionConfig) -> tuple[SnnModel, NormalizationReport]:
    result = convert_full(model, calibration, config)
    return result.snn, result.report


# ----------------------------------------------------------------------------- SNN I/O

def save_snn(snn: SnnModel, manifest_path) -> None:
    """JSON manifest plus little-endian int32 blobs beside it."""
    manifest_path = Path(manifest_path)
    stem = manifest_path.stem
    entries = []
    for layer, shape in zip(snn.layers, snn.shapes):
        entry = layer.spec.to_dict()
        entry["output_shape"] = list(shape)
        if layer.spiking:
            entry.update(threshold=layer.threshold, scale=layer.scale,
                         weight_scale=layer.weight_scale, input_gain=layer.input_gain,
                         activation_scale=layer.activation_scale)
            for label, arr in (("weights", layer.weights), ("bias", layer.bias)):
                if arr is not None:
                    fname = f"{stem}.{layer.name}.{label}.i32"
                    (manifest_path.parent / fname).write_bytes(
                        np.ascontiguousarray(arr, dtype="<i4").tobytes())
                    entry[label] = {"file": fname, "shape": list(arr.shape)}
        entries.append(entry)
    doc = {"format": SNN_FORMAT_NAME, "format_version": SNN_FORMAT_VERSION,
           "input_shape": list(snn.input_shape), "reset_mode": snn.reset_mode,
           "dthir": snn.dthir, "input_threshold": snn.input_threshold,
           "decay_u": snn.decay_u, "decay_v": snn.decay_v, "v_rest": snn.v_rest,
           "layers": entries}
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_snn(manifest_path) -> SnnModel:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"SNN manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    if doc.get("format") != SNN_FORMAT_NAME or doc.get("format_version") != SNN_FORMAT_VERSION:
        raise ModelError(f"{manifest_path}: not a {SNN_FORMAT_NAME} v{SNN_FORMAT_VERSION} manifest")
    layers = []
    for entry in doc["layers"]:
        spec = LayerSpec.from_dict(entry)
        arrays = {}
        for label in ("weights", "bias"):
            ref = entry.get(label)
            if ref is None:
                arrays[label] = None
                continue
            path = manifest_path.parent / ref["file"]
            if not path.is_file():
                raise FileNotFoundError(f"blob not found: {path}")
            raw = path.read_bytes()
            count = int(np.prod(ref["shape"]))
            if len(raw) != 4 * count:
                raise ShapeError(f"{path.name}: expected {count} int32 values, found {len(raw) // 4}")
            arrays[label] = np.frombuffer(raw, dtype="<i4").reshape(ref["shape"])
        layers.append(SnnLayer(spec, arrays["weights"], arrays["bias"],
                               int(entry.get("threshold", 0)), float(entry.get("scale", 1.0)),
                               float(entry.get("weight_scale", 1.0)),
                               float(entry.get("input_gain", 1.0)),
                               float(entry.get("activation_scale", 1.0))))
    return SnnModel(tuple(doc["input_shape"]), tuple(layers), doc["reset_mode"], int(doc["dthir"]),
                    int(doc["input_threshold"]), float(doc["decay_u"]), float(doc["decay_v"]),
                    int(doc.get("v_rest", 0)))
