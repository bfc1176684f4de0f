"""Conversion quality: activation/spike-rate correlation, agreement and sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .converter import ConversionConfig, SnnModel, convert_full
from .errors import UnpartitionableLayerError
from .model import ActivationTrace, DnnModel, infer
from .partitioner import CoreConstraints, partition
from .simulator import SimulationConfig, SpikeTrace, batch_simulate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VerdictThresholds:
    good: float = 0.99
    degraded: float = 0.9

    def verdict(self, r: float | None) -> str:
        if r is None:
            return "undefined"
        if r >= self.good:
            return "good"
        if r >= self.degraded:
            return "degraded"
        return "uncorrelated"


def pearson(a, b) -> float | None:
    """Pearson correlation, or None when either side has zero variance."""
    a = np.asarray(a, np.float64).reshape(-1)
    b = np.asarray(b, np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.clip(float(da @ db) / (sa * sb), -1.0, 1.0))


@dataclass
class LayerCorrelation:
    name: str
    pairs: int
    r: float | None
    verdict: str
    max_deviation: float
    mean_abs_error: float
    saturation_fraction: float
    activations: np.ndarray | None = field(default=None, repr=False, compare=False)
    estimates: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("activations")
        d.pop("estimates")
        return d


@dataclass
class CorrelationReport:
    layers: list[LayerCorrelation]
    duration: int
    counted_steps: int
    units: str = "normalized"
    thresholds: VerdictThresholds = VerdictThresholds()

    def __getitem__(self, name: str) -> LayerCorrelation:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def min_r(self) -> float | None:
        rs = [lc.r for lc in self.layers if lc.r is not None]
        return min(rs) if rs else None

    def to_dict(self) -> dict:
        return {"duration": self.duration, "counted_steps": self.counted_steps, "units": self.units,
                "thresholds": asdict(self.thresholds), "layers": [lc.to_dict() for lc in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationReport":
        return cls([LayerCorrelation(**lc) for lc in d["layers"]], d["duration"], d["counted_steps"],
                   d["units"], VerdictThresholds(**d["thresholds"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CorrelationReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def estimate_activations(spike_trace: SpikeTrace, snn: SnnModel, name: str,
                         units: str = "normalized") -> np.ndarray:
    """Activation implied by a layer's spike rate: ``rate * threshold / scale``.

    ``units="dnn"`` further multiplies by the layer's calibration scale, which
    puts the estimate in the original model's units.
    """
    layer = next(l for l in snn.layers if l.name == name)
    est = spike_trace.rates(name) * (layer.threshold / layer.scale)
    if units == "dnn":
        est = est * layer.activation_scale
    elif units != "normalized":
        raise ValueError(f"unknown units {units!r}")
    return est


def correlate(dnn_trace: ActivationTrace, spike_trace: SpikeTrace, snn: SnnModel,
              units: str = "normalized", thresholds: VerdictThresholds = VerdictThresholds(),
              layers: Sequence[str] | None = None, keep_pairs: bool = True) -> CorrelationReport:
    """Per-layer Pearson r between DNN activations and spike-rate estimates.

    ``dnn_trace`` should come from the normalized parsed model (``units="normalized"``)
    or the original one (``units="dnn"``), run on the same samples as the
    simulation. Layers without a ReLU are rectified first, since rates cannot
    go negative.
    """
    spiking = {l.name: l for l in snn.layers if l.spiking}
    names = list(layers) if layers is not None else [n for n in spike_trace.names[1:]
                                                      if n in spiking and n in dnn_trace.names]
    out = []
    for name in names:
        act = np.asarray(dnn_trace[name], np.float64)
        if spiking[name].spec.activation != "relu":
            act = np.maximum(act, 0.0)
        est = estimate_activations(spike_trace, snn, name, units)
        if act.size != est.size:
            raise ValueError(f"layer {name!r}: {act.size} activations but {est.size} rates")
        act, est = act.reshape(-1), est.reshape(-1)
        r = pearson(act, est)
        counts = spike_trace[name].reshape(-1)
        out.append(LayerCorrelation(
            name, int(act.size), r, thresholds.verdict(r),
            float(np.max(np.abs(est - act))) if act.size else 0.0,
            float(np.mean(np.abs(est - act))) if act.size else 0.0,
            float(np.mean(counts >= spike_trace.counted_steps)) if counts.size else 0.0,
            act if keep_pairs else None, est if keep_pairs else None))
    return CorrelationReport(out, spike_trace.duration, spike_trace.counted_steps, units, thresholds)


def write_scatter_csv(report: CorrelationReport, out_dir) -> list[Path]:
    """One ``scatter_<layer>.csv`` of ``activation,estimate`` per layer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for lc in report.layers:
        if lc.activations is None:
            raise ValueError("report was built without paired samples")
        path = out_dir / f"scatter_{lc.name}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["activation", "estimate"])
            w.writerows((repr(float(a)), repr(float(e))) for a, e in zip(lc.activations, lc.estimates))
        written.append(path)
    return written


def agreement(dnn_predictions, snn_predictions) -> float:
    """Fraction of samples where both models pick the same class."""
    a = np.asarray(dnn_predictions).reshape(-1)
    b = np.asarray(snn_predictions).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"prediction vectors differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("no predictions to compare")
    return float(np.mean(a == b))


# ----------------------------------------------------------------------------- sweeps

SWEEP_FIELDS = ("reset_mode", "dthir", "duration", "agreement", "snn_accuracy", "dnn_accuracy",
                "min_r", "cores")


@dataclass(frozen=True)
class SweepGrid:
    reset_mode: tuple[str, ...] = ("soft",)
    dthir: tuple[int, ...] = (2,)
    duration: tuple[int, ...] = (256,)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        unknown = set(d) - {"reset_mode", "dthir", "duration"}
        if unknown:
            raise ValueError(f"unknown sweep grid keys: {sorted(unknown)}")
        return cls(*(tuple(d.get(k, getattr(cls, k))) for k in ("reset_mode", "dthir", "duration")))

    def __len__(self):
        return len(self.reset_mode) * len(self.dthir) * len(self.duration)

    def __iter__(self):
        return itertools.product(self.reset_mode, self.dthir, self.duration)


def sweep(model: DnnModel, frames: np.ndarray, calibration: np.ndarray, grid: SweepGrid,
          labels: np.ndarray | None = None, base: ConversionConfig = ConversionConfig(),
          constraints: CoreConstraints | None = CoreConstraints(),
          correlate_layers: bool = True) -> list[dict]:
    """One row per (reset mode, dthir, duration): agreement, accuracies, min r and cores.

    Each (reset mode, dthir) pair is converted once and simulated at every
    duration. ``cores`` is empty when ``constraints`` is None or the model
    cannot be partitioned.
    """
    rows: list[dict] = []
    if len(grid) == 0:
        return rows
    frames = np.asarray(frames, np.float64)
    scores, _ = infer(model, frames)
    dnn_pred = np.argmax(scores.reshape(len(frames), -1), axis=1)
    dnn_acc = None if labels is None else float(np.mean(dnn_pred == np.asarray(labels)))
    for reset, dthir in itertools.product(grid.reset_mode, grid.dthir):
        cfg = ConversionConfig(**{**asdict(base), "dthir": dthir, "reset_mode": reset})
        result = convert_full(model, calibration, cfg)
        cores = ""
        if constraints is not None:
            try:
                cores = partition(result.snn, constraints).core_count
            except UnpartitionableLayerError as exc:
                log.warning("sweep: %s", exc)
        norm_trace = infer(result.normalized, frames)[1] if correlate_layers else None
        for duration in grid.duration:
            res = batch_simulate(result.snn, frames, SimulationConfig(duration=duration),
                                 labels=labels, keep_trace=correlate_layers)
            min_r = ""
            if correlate_layers:
                rep = correlate(norm_trace, res.trace, result.snn, keep_pairs=False)
                min_r = rep.min_r if rep.min_r is not None else ""
            rows.append({"reset_mode": reset, "dthir": dthir, "duration": duration,
                         "agreement": agreement(dnn_pred, res.predictions),
                         "snn_accuracy": "" if res.accuracy is None else res.accuracy,
                         "dnn_accuracy": "" if dnn_acc is None else dnn_acc,
                         "min_r": min_r, "cores": cores})
    return rows


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
