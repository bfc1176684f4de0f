"""Discrete-time CUBA leaky-integrate-and-fire simulation with integer state.

Per neuron and time-step::

    u <- round(decay_u * u) + sum_j w_ij * s_j[t-1] + u_bias
    v <- round(decay_v * v) + u
    spike if v >= threshold; soft reset: v -= threshold, hard reset: v = v_rest

Spikes emitted by a population at step ``t`` reach the next population at step
``t + 1``. The input population is driven only by bias currents derived from
pixel intensities. All state is int64 saturated to the int32 range; any
saturation raises the trace's ``overflow`` flag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .converter import SnnLayer, SnnModel
from .errors import ShapeError
from .intmath import round_half_away, saturate
from .model import LayerKind, LayerSpec, apply_layer, pool_stride

DEFAULT_INPUT_THRESHOLD = 1024


@dataclass(frozen=True)
class NeuronParams:
    bias: np.ndarray
    threshold: int
    v_rest: int = 0
    decay_u: float = 0.0
    decay_v: float = 1.0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if not (0.0 <= self.decay_u <= 1.0 and 0.0 <= self.decay_v <= 1.0):
            raise ValueError("decay factors must lie in [0, 1]")
        if self.v_rest >= self.threshold:
            raise ValueError("v_rest must lie below the threshold")


@dataclass
class NeuronState:
    u: np.ndarray
    v: np.ndarray
    spike_count: np.ndarray
    overflow: bool = False

    @classmethod
    def zeros(cls, shape) -> "NeuronState":
        return cls(np.zeros(shape, np.int64), np.zeros(shape, np.int64), np.zeros(shape, np.int64))


def _decay(x: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return x
    if factor == 0.0:
        return np.zeros_like(x)
    return round_half_away(factor * x)


def step_layer(state: NeuronState, params: NeuronParams, weighted_input, reset_mode: str,
               count: bool = True) -> tuple[NeuronState, np.ndarray]:
    """Advance one population by one step; returns the new state and the spike mask."""
    u, o1 = saturate(_decay(state.u, params.decay_u) + weighted_input + params.bias)
    v, o2 = saturate(_decay(state.v, params.decay_v) + u)
    spikes = v >= params.threshold
    if reset_mode == "soft":
        v = np.where(spikes, v - params.threshold, v)
    elif reset_mode == "hard":
        v = np.where(spikes, params.v_rest, v)
    else:
        raise ValueError(f"unknown reset mode {reset_mode!r}")
    counts = state.spike_count + spikes if count else state.spike_count
    return NeuronState(u, v, counts, state.overflow or o1 or o2), spikes


def encode_input(image: np.ndarray, threshold: int = DEFAULT_INPUT_THRESHOLD, **kwargs) -> NeuronParams:
    """Bias currents ``round(x * threshold)`` for the input population."""
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("pixel intensities must lie in [0, 1]")
    return NeuronParams(round_half_away(image * threshold).astype(np.int64), int(threshold), **kwargs)


@dataclass(frozen=True)
class SimulationConfig:
    duration: int = 256
    reset_mode: str | None = None  # None: use the model's reset mode
    record_spiketrains: bool = False
    # spikes during the first ``warmup_steps`` are not counted
    warmup_steps: int = 0

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("duration must be at least one time-step")
        if not 0 <= self.warmup_steps < self.duration:
            raise ValueError("warmup_steps must lie in [0, duration)")
        if self.reset_mode not in (None, "soft", "hard"):
            raise ValueError("reset_mode must be 'soft', 'hard' or None")

    @property
    def counted_steps(self) -> int:
        return self.duration - self.warmup_steps


@dataclass
class SpikeTrace:
    """Spike counts per population; arrays carry a leading batch axis for batch runs.

    ``names[0]`` is the input population, the rest are the model's spiking layers.
    ``rasters`` (when recorded) hold one bool array of shape ``(T, *counts_shape)``
    per population.
    """

    names: tuple[str, ...]
    counts: tuple[np.ndarray, ...]
    duration: int
    counted_steps: int
    rasters: tuple[np.ndarray, ...] | None = None
    overflow: bool = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.counts[self.names.index(name)]

    def rates(self, name: str) -> np.ndarray:
        return self[name] / self.counted_steps

    @property
    def output_counts(self) -> np.ndarray:
        return self.counts[-1]


@dataclass
class _Stage:
    """One spiking population and the structural layers that feed it."""

    layer: SnnLayer
    index: int
    pre: list[LayerSpec] = field(default_factory=list)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    params: NeuronParams | None = None

    def synaptic_input(self, spikes: np.ndarray) -> np.ndarray:
        x = spikes.astype(np.float64)
        for spec in self.pre:
            x = apply_layer(spec, x, None, None)
        spec = self.layer.spec
        if spec.kind == LayerKind.AVG_POOL2D:
            out = ops.sum_pool2d(x, spec.kernel, pool_stride(spec)) * self.weights[0]
        else:
            out = apply_layer(spec, x, self.weights, None)
        # integer weights times 0/1 spikes: float64 sums are exact
        return np.rint(out).astype(np.int64)


def _compile(snn: SnnModel) -> list[_Stage]:
    stages = []
    pending: list[LayerSpec] = []
    for index, layer in enumerate(snn.layers):
        if not layer.spiking:
            pending.append(layer.spec)
            continue
        bias = layer.bias.astype(np.int64) if layer.bias is not None else np.zeros(1, np.int64)
        stage = _Stage(layer, index, pending, layer.weights.astype(np.float64), bias,
                       NeuronParams(bias, layer.threshold, snn.v_rest, snn.decay_u, snn.decay_v))
        stages.append(stage)
        pending = []
    return stages


def simulate_batch(snn: SnnModel, images: np.ndarray,
                   config: SimulationConfig = SimulationConfig()) -> tuple[SpikeTrace, np.ndarray]:
    """Simulate a batch ``(N, *input_shape)``; returns the trace and predicted classes."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != snn.input_shape:
        raise ShapeError(f"image batch shape {images.shape} does not match SNN input "
                         f"{snn.input_shape}")
    reset = config.reset_mode or snn.reset_mode
    n = images.shape[0]
    stages = _compile(snn)
    in_params = encode_input(images, snn.input_threshold, v_rest=snn.v_rest,
                             decay_u=snn.decay_u, decay_v=snn.decay_v)
    pop_shapes = [snn.input_shape] + [snn.shapes[st.index] for st in stages]
    states = [NeuronState.zeros((n, *shape)) for shape in pop_shapes]
    spikes = [np.zeros((n, *shape), bool) for shape in pop_shapes]
    rasters = [[] for _ in pop_shapes] if config.record_spiketrains else None
    for t in range(config.duration):
        count = t >= config.warmup_steps
        # every population reads the spikes of the previous step
        drive = [0] + [st.synaptic_input(spikes[k]) if spikes[k].any() else 0
                       for k, st in enumerate(stages)]
        new = []
        states[0], s = step_layer(states[0], in_params, 0, reset, count)
        new.append(s)
        for k, st in enumerate(stages, start=1):
            states[k], s = step_layer(states[k], st.params, drive[k], reset, count)
            new.append(s)
        spikes = new
        if rasters is not None:
            for r, s in zip(rasters, spikes):
                r.append(s)
    names = ("input", *(st.layer.name for st in stages))
    counts = tuple(st.spike_count for st in states)
    trace = SpikeTrace(names, counts, config.duration, config.counted_steps,
                       tuple(np.stack(r) for r in rasters) if rasters is not None else None,
                       any(st.overflow for st in states))
    predictions = np.argmax(counts[-1].reshape(n, -1), axis=1)
    return trace, predictions


def simulate(snn: SnnModel, image: np.ndarray,
             config: SimulationConfig = SimulationConfig()) -> tuple[SpikeTrace, int]:
    """Simulate one image; the returned trace has no batch axis."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != snn.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match SNN input {snn.input_shape}")
    trace, pred = simulate_batch(snn, image[None], config)
    counts = tuple(c[0] for c in trace.counts)
    rasters = tuple(r[:, 0] for r in trace.rasters) if trace.rasters is not None else None
    return replace(trace, counts=counts, rasters=rasters), int(pred[0])


@dataclass
class BatchResult:
    predictions: np.ndarray
    accuracy: float | None
    output_spikes: np.ndarray  # total output-population spikes per sample
    mean_rates: dict[str, float]
    overflow: bool
    trace: SpikeTrace | None = None


def batch_simulate(snn: SnnModel, frames: np.ndarray, config: SimulationConfig = SimulationConfig(),
                   labels: np.ndarray | None = None, batch_size: int = 64,
                   keep_trace: bool = False) -> BatchResult:
    """Simulate a dataset in batches and aggregate the per-sample results."""
    frames = np.asarray(frames, dtype=np.float64)
    preds, out_spikes, traces = [], [], []
    rate_sums: dict[str, float] = {}
    sizes: dict[str, int] = {}
    overflow = False
    for start in range(0, len(frames), batch_size):
        trace, p = simulate_batch(snn, frames[start:start + batch_size], config)
        preds.append(p)
        out_spikes.append(trace.output_counts.reshape(len(p), -1).sum(axis=1))
        for name, c in zip(trace.names, trace.counts):
            rate_sums[name] = rate_sums.get(name, 0.0) + float(c.sum()) / trace.counted_steps
            sizes[name] = c[0].size
        overflow |= trace.overflow
        if keep_trace:
            traces.append(trace)
    n = len(frames)
    predictions = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    accuracy = None
    if labels is not None and n:
        accuracy = float(np.mean(predictions == np.asarray(labels)))
    mean_rates = {name: total / (n * sizes[name]) for name, total in rate_sums.items()}
    merged = None
    if keep_trace and traces:
        merged = SpikeTrace(traces[0].names,
                            tuple(np.concatenate([t.counts[k] for t in traces])
                                  for k in range(len(traces[0].names))),
                            config.duration, config.counted_steps,
                            None if traces[0].rasters is None else
                            tuple(np.concatenate([t.rasters[k] for t in traces], axis=1)
                                  for k in range(len(traces[0].names))),
                            overflow)
    return BatchResult(predictions, accuracy,
                       np.concatenate(out_spikes) if out_spikes else np.zeros(0, np.int64),
                       mean_rates, overflow, merged)


# ----------------------------------------------------------------------------- export

def write_counts_csv(trace: SpikeTrace, path, batched: bool = True) -> None:
    """Rows of ``sample, layer, neuron, count`` (neurons in row-major order)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "layer", "neuron", "count"])
        for name, counts in zip(trace.names, trace.counts):
            flat = counts.reshape(counts.shape[0], -1) if batched else counts.reshape(1, -1)
            for sample, row in enumerate(flat):
                for neuron, c in enumerate(row):
                    writer.writerow([sample, name, neuron, int(c)])


def write_raster_csv(trace: SpikeTrace, path, batched: bool = True) -> None:
    """Rows of ``sample, step, layer, neuron`` for every emitted spike."""
    if trace.rasters is None:
        raise ValueError("trace has no rasters; simulate with record_spiketrains=True")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "step", "layer", "neuron"])
        for name, raster in zip(trace.names, trace.rasters):
            r = raster.reshape(raster.shape[0], raster.shape[1], -1) if batched \
                else raster.reshape(raster.shape[0], 1, -1)
            steps, samples, neurons = np.nonzero(r)
            order = np.lexsort((neurons, steps, samples))
            for i in order:
                writer.writerow([int(samples[i]), int(steps[i]), name, int(neurons[i])])
