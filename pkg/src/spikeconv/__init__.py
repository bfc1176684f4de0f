"""Convert feed-forward CNNs to integer LIF spiking networks, simulate, partition and analyse them."""

__version__ = "0.1.0"

from .analysis import CorrelationReport, agreement, correlate, sweep
from .converter import ConversionConfig, SnnModel, convert, convert_full, load_snn, save_snn
from .dvs import AccumulationConfig, EventStream, FrameDataset, accumulate, build_dataset, read_events
from .model import DnnModel, LayerKind, LayerSpec, infer, load_model, predict, save_model
from .parser import parse
from .partitioner import CoreConstraints, PartitionPlan, partition, validate_partition
from .simulator import SimulationConfig, SpikeTrace, batch_simulate, simulate

__all__ = [
    "AccumulationConfig", "ConversionConfig", "CoreConstraints", "CorrelationReport", "DnnModel",
    "EventStream", "FrameDataset", "LayerKind", "LayerSpec", "PartitionPlan", "SimulationConfig",
    "SnnModel", "SpikeTrace", "accumulate", "agreement", "batch_simulate", "build_dataset",
    "convert", "convert_full", "correlate", "infer", "load_model", "load_snn", "parse",
    "partition", "predict", "read_events", "save_model", "save_snn", "simulate", "sweep",
    "validate_partition",
]
