"""Command-line front end.

Every subcommand reads its parameters from defaults, then an optional JSON
``--config`` file, then explicit flags (flags win, and each override is
logged). Parameters are validated before anything is written. Each run leaves a
``run_manifest.json`` in its output directory that records the resolved
configuration and the hashes of every input and output file;
``spikeconv rerun <manifest> --out DIR`` replays it.

Exit codes: 0 ok, 1 internal error, 2 input error, 3 constraint violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, converter, dvs, partitioner, simulator, zoo
from .errors import ModelError, SpikeConvError, UnpartitionableLayerError
from .model import infer, load_model, save_model

log = logging.getLogger("spikeconv")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONSTRAINT = 0, 1, 2, 3


class InputError(Exception):
    """Bad user input: missing files, invalid parameters, empty data."""


class ConstraintError(Exception):
    """The model does not fit the hardware constraints."""


# ----------------------------------------------------------------------------- parameters

# Per subcommand: parameter -> (default, argparse kwargs). Positional inputs are
# listed with "positional": True and may also come from the config file.
COMMANDS: dict[str, dict[str, tuple]] = {
    "preprocess": {
        "events_dir": (None, {"positional": True, "help": "directory with labels.csv and event files"}),
        "preset": (None, {"choices": sorted(dvs.PRESETS), "help": "Table-style preset; flags override it"}),
        "mode": ("time_based", {"choices": ["time_based", "quantitative"]}),
        "window_ms": (300, {"type": int, "help": "time window in ms (time_based)"}),
        "window_events": (None, {"type": int, "help": "events per frame (quantitative)"}),
        "channels": (3, {"type": int}),
        "overlap": (1, {"type": int, "help": "overlap factor; stride = window / overlap"}),
        "size": (32, {"type": int, "help": "output frame side, must divide 128"}),
        "polarity": ("discard", {"choices": sorted(dvs.POLARITY_ALIASES)}),
        "test_every": (5, {"type": int, "help": "every n-th recording goes to test "
                                                 "(unless labels.csv has a split column)"}),
    },
    "convert": {
        "model": (None, {"positional": True, "help": "model manifest (.json)"}),
        "calibration": (None, {"positional": True, "help": ".npy array, .dvsf file or dataset dir"}),
        "calibration_split": ("train", {}),
        "dthir": (2, {"type": int}),
        "reset": ("soft", {"choices": ["soft", "hard"]}),
        "percentile": (99.9, {"type": float}),
        "calibration_set": (100, {"type": int, "help": "number of calibration samples used"}),
        "weight_percentile": (100.0, {"type": float}),
        "bias_guard": (True, {"action": argparse.BooleanOptionalAction}),
        "bias_only": (False, {"action": argparse.BooleanOptionalAction}),
        "strict_discard": (False, {"action": argparse.BooleanOptionalAction}),
    },
    "simulate": {
        "snn": (None, {"positional": True, "help": "SNN manifest (.json)"}),
        "dataset": (None, {"positional": True, "help": "dataset dir, .dvsf or .npy frames"}),
        "split": ("test", {}),
        "steps": (256, {"type": int}),
        "warmup": (0, {"type": int}),
        "reset": (None, {"choices": ["soft", "hard"], "help": "override the model's reset mode"}),
        "record_rasters": (False, {"action": argparse.BooleanOptionalAction}),
        "batch_size": (64, {"type": int}),
        "limit": (None, {"type": int, "help": "simulate only the first n frames"}),
    },
    "partition": {
        "snn": (None, {"positional": True}),
        "reset": (None, {"choices": ["soft", "hard"]}),
        "max_compartments": (1024, {"type": int}),
        "max_fan_in": (4096, {"type": int}),
        "max_fan_out": (4096, {"type": int}),
    },
    "correlate": {
        "model": (None, {"positional": True, "help": "normalized model manifest written by convert"}),
        "snn": (None, {"positional": True}),
        "dataset": (None, {"positional": True}),
        "split": ("test", {}),
        "samples": (1, {"type": int, "help": "number of frames to pair up"}),
        "first": (0, {"type": int, "help": "index of the first frame"}),
        "steps": (256, {"type": int}),
        "units": ("normalized", {"choices": ["normalized", "dnn"]}),
        "good": (0.99, {"type": float}),
        "degraded": (0.9, {"type": float}),
    },
    "sweep": {
        "model": (None, {"positional": True}),
        "calibration": (None, {"positional": True}),
        "dataset": (None, {"positional": True}),
        "grid": (None, {"help": "JSON grid file with reset_mode/dthir/duration lists"}),
        "split": ("test", {}),
        "calibration_split": ("train", {}),
        "samples": (32, {"type": int}),
        "percentile": (99.9, {"type": float}),
    },
    "infer": {
        "model": (None, {"positional": True}),
        "dataset": (None, {"positional": True}),
        "split": ("test", {}),
    },
    "make-cnet": {
        "seed": (0, {"type": int}),
        "input_shape": ("28,28,1", {"help": "comma separated h,w,c"}),
        "classes": (10, {"type": int}),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikeconv", description="DNN to SNN conversion toolchain")
    parser.add_argument("--version", action="version", version=f"spikeconv {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
        p.add_argument("--out", default=argparse.SUPPRESS, required=True, help="output directory")
        for key, (_, kw) in params.items():
            kw = dict(kw)
            if kw.pop("positional", False):
                p.add_argument(key, nargs="?", default=argparse.SUPPRESS, **kw)
            else:
                p.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS, **kw)
    rerun = sub.add_parser("rerun", help="replay a run manifest")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", required=True)
    return parser


def resolve(command: str, given: dict, config_path: str | None) -> tuple[dict, set[str]]:
    """Merge defaults, config file and explicit flags, in that order.

    Also returns the keys set by the file or by flags.
    """
    params = COMMANDS[command]
    file_cfg = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise InputError(f"{path}: config must be a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(params)
        if unknown:
            raise InputError(f"{path}: unknown keys for {command}: {sorted(unknown)}")
    cfg = {k: d for k, (d, _) in params.items()}
    cfg.update(file_cfg)
    for key, value in given.items():
        if key in file_cfg and file_cfg[key] != value:
            log.info("flag --%s=%r overrides config value %r", key.replace("_", "-"), value, file_cfg[key])
        cfg[key] = value
    for key, (_, kw) in params.items():
        if kw.get("positional") and cfg.get(key) is None:
            raise InputError(f"{command}: missing required input {key!r}")
    return cfg, set(file_cfg) | set(given)


# ----------------------------------------------------------------------------- manifests

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _related_files(path: Path) -> list[Path]:
    """A path plus the files it implies: directory contents, manifest blobs, label sidecars."""
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.is_file())
    if not path.is_file():
        return []
    files = [path]
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            doc = None
        if isinstance(doc, dict):
            for layer in doc.get("layers", []):
                for label in ("weights", "bias"):
                    ref = layer.get(label)
                    if isinstance(ref, dict) and (path.parent / ref["file"]).is_file():
                        files.append(path.parent / ref["file"])
    side = path.with_suffix(".labels.csv")
    if path.suffix == ".dvsf" and side.is_file():
        files.append(side)
    return files


def config_hash(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, "config": cfg}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_run_manifest(out: Path, command: str, cfg: dict, inputs: dict[str, Path]) -> Path:
    """Record inputs, config hash, tool version and output hashes (no timestamps)."""
    in_hashes = {}
    for key, path in inputs.items():
        for f in _related_files(Path(path)):
            in_hashes[str(f)] = sha256_file(f)
    outputs = {str(p.relative_to(out)): sha256_file(p)
               for p in sorted(out.rglob("*")) if p.is_file() and p.name != "run_manifest.json"}
    doc = {"tool": "spikeconv", "version": __version__, "command": command, "config": cfg,
           "config_hash": config_hash(command, cfg), "inputs": in_hashes, "outputs": outputs}
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------------- loaders

def _need(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def load_frames_any(path, split: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Frames (and labels, if known) from a dataset dir, ``.dvsf`` or ``.npy`` file."""
    path = _need(path, "dataset")
    if path.suffix == ".npy":
        arr = np.load(path)
        return np.asarray(arr, np.float64), None
    try:
        ds = dvs.load_dataset(path, split)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        raise InputError(str(exc)) from None
    return ds.frames.astype(np.float64), ds.labels


def _check_frames(frames: np.ndarray, input_shape, what: str) -> None:
    if frames.shape[1:] != tuple(input_shape):
        raise InputError(f"{what} frames have shape {frames.shape[1:]}, model expects {tuple(input_shape)}")


# ----------------------------------------------------------------------------- commands

def cmd_preprocess(cfg: dict, out: Path) -> dict:
    events_dir = Path(cfg["events_dir"])
    if not events_dir.is_dir():
        raise InputError(f"events directory not found: {events_dir}")
    fields = {"mode": cfg["mode"], "channels": cfg["channels"], "overlap": cfg["overlap"],
              "polarity": cfg["polarity"], "frame_size": cfg["size"]}
    window = cfg["window_events"] if cfg["mode"] == "quantitative" else cfg["window_ms"]
    if cfg["mode"] == "quantitative" and window is None:
        raise InputError("quantitative mode needs --window-events")
    fields["window"] = window
    try:
        acc = dvs.AccumulationConfig(**fields)
        rule = dvs.split_every(cfg["test_every"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        recordings = dvs.read_recordings(events_dir)
    except (FileNotFoundError, dvs.EventFormatError, ValueError, KeyError) as exc:
        raise InputError(str(exc)) from None
    if any("split" in r.meta for r in recordings):
        rule = dvs.split_by_meta("split")
    splits = dvs.build_dataset(recordings, acc, rule)
    out.mkdir(parents=True, exist_ok=True)
    dvs.save_dataset(splits, out, acc)
    rejected = sum(r.rejected for r in recordings)
    log.info("preprocess: %d recordings, %d train / %d test frames of %s, %d rejected events",
             len(recordings), len(splits["train"]), len(splits["test"]), acc.frame_shape, rejected)
    return {"events_dir": events_dir}


def cmd_convert(cfg: dict, out: Path) -> dict:
    try:
        conv = converter.ConversionConfig(dthir=cfg["dthir"], percentile=cfg["percentile"],
                                          calibration_set=cfg["calibration_set"], reset_mode=cfg["reset"],
                                          weight_percentile=cfg["weight_percentile"],
                                          bias_guard=cfg["bias_guard"], bias_only=cfg["bias_only"],
                                          strict_discard=cfg["strict_discard"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    model_path = _need(cfg["model"], "model")
    model = load_model(model_path)
    frames, _ = load_frames_any(cfg["calibration"], cfg["calibration_split"])
    _check_frames(frames, model.input_shape, "calibration")
    if len(frames) == 0:
        raise InputError("calibration set is empty")
    result = converter.convert_full(model, frames[:conv.calibration_set], conv)
    out.mkdir(parents=True, exist_ok=True)
    converter.save_snn(result.snn, out / "snn.json")
    save_model(result.normalized, out / "normalized.json")
    result.report.save(out / "normalization_report.json")
    for lr in result.report.layers:
        log.info("%s: lambda=%.4g s=%.4g threshold=%d clipped=%d", lr.name, lr.activation_scale,
                 lr.scale, lr.threshold, lr.clipped_weights)
    return {"model": model_path, "calibration": Path(cfg["calibration"])}


def cmd_simulate(cfg: dict, out: Path) -> dict:
    try:
        sim = simulator.SimulationConfig(duration=cfg["steps"], reset_mode=cfg["reset"],
                                         record_spiketrains=cfg["record_rasters"],
                                         warmup_steps=cfg["warmup"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if cfg["batch_size"] < 1:
        raise InputError("batch size must be positive")
    snn = converter.load_snn(_need(cfg["snn"], "SNN"))
    frames, labels = load_frames_any(cfg["dataset"], cfg["split"])
    if cfg["limit"] is not None:
        frames = frames[:cfg["limit"]]
        labels = None if labels is None else labels[:cfg["limit"]]
    if len(frames) == 0:
        raise InputError("dataset has no frames to simulate")
    _check_frames(frames, snn.input_shape, "dataset")
    res = simulator.batch_simulate(snn, frames, sim, labels=labels, batch_size=cfg["batch_size"],
                                   keep_trace=True)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "prediction", "output_spikes"])
        for i, (p, s) in enumerate(zip(res.predictions, res.output_spikes)):
            w.writerow([i, "" if labels is None else int(labels[i]), int(p), int(s)])
    simulator.write_counts_csv(res.trace, out / "spike_counts.csv")
    if sim.record_spiketrains:
        simulator.write_raster_csv(res.trace, out / "rasters.csv")
    summary = {"frames": len(frames), "duration": sim.duration, "warmup_steps": sim.warmup_steps,
               "accuracy": res.accuracy, "overflow": res.overflow, "mean_rates": res.mean_rates}
    (out / "results.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if res.overflow:
        log.warning("integer state saturated during simulation")
    log.info("simulate: %d frames, accuracy %s", len(frames), res.accuracy)
    return {"snn": Path(cfg["snn"]), "dataset": Path(cfg["dataset"])}


def cmd_partition(cfg: dict, out: Path) -> dict:
    try:
        constraints = partitioner.CoreConstraints(cfg["max_compartments"], cfg["max_fan_in"],
                                                  cfg["max_fan_out"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    snn = converter.load_snn(_need(cfg["snn"], "SNN"))
    try:
        plan = partitioner.partition(snn, constraints, cfg["reset"])
    except UnpartitionableLayerError as exc:
        raise ConstraintError(str(exc)) from None
    violations = partitioner.validate_partition(plan, snn)
    if violations:
        raise ConstraintError("partition failed validation: " + "; ".join(map(str, violations)))
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "partition.json")
    (out / "cores.txt").write_text(plan.table() + "\n", encoding="utf-8")
    print(plan.table())
    return {"snn": Path(cfg["snn"])}


def cmd_correlate(cfg: dict, out: Path) -> dict:
    try:
        thresholds = analysis.VerdictThresholds(cfg["good"], cfg["degraded"])
        sim = simulator.SimulationConfig(duration=cfg["steps"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if cfg["samples"] < 1 or cfg["first"] < 0:
        raise InputError("samples must be positive and first non-negative")
    model = load_model(_need(cfg["model"], "model"))
    snn = converter.load_snn(_need(cfg["snn"], "SNN"))
    frames, _ = load_frames_any(cfg["dataset"], cfg["split"])
    frames = frames[cfg["first"]:cfg["first"] + cfg["samples"]]
    if len(frames) == 0:
        raise InputError("no frames selected for correlation")
    _check_frames(frames, snn.input_shape, "dataset")
    trace, _ = simulator.simulate_batch(snn, frames, sim)
    report = analysis.correlate(infer(model, frames)[1], trace, snn, cfg["units"], thresholds)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "correlation.json")
    analysis.write_scatter_csv(report, out)
    for lc in report.layers:
        log.info("%s: r=%s (%s)", lc.name, "undefined" if lc.r is None else f"{lc.r:.4f}", lc.verdict)
    return {"model": Path(cfg["model"]), "snn": Path(cfg["snn"]), "dataset": Path(cfg["dataset"])}


def cmd_sweep(cfg: dict, out: Path) -> dict:
    grid = analysis.SweepGrid(("soft", "hard"), (2, 8, 32), (256,))
    inputs = {"model": Path(cfg["model"]), "calibration": Path(cfg["calibration"]),
              "dataset": Path(cfg["dataset"])}
    if cfg["grid"]:
        gpath = _need(cfg["grid"], "grid file")
        try:
            grid = analysis.SweepGrid.from_dict(json.loads(gpath.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise InputError(f"{gpath}: {exc}") from None
        inputs["grid"] = gpath
    try:
        for reset, dthir, duration in grid:
            converter.ConversionConfig(dthir=dthir, reset_mode=reset, percentile=cfg["percentile"])
            simulator.SimulationConfig(duration=duration)
    except (ValueError, TypeError) as exc:
        raise InputError(str(exc)) from None
    model = load_model(_need(cfg["model"], "model"))
    calib, _ = load_frames_any(cfg["calibration"], cfg["calibration_split"])
    frames, labels = load_frames_any(cfg["dataset"], cfg["split"])
    frames = frames[:cfg["samples"]]
    labels = None if labels is None else labels[:cfg["samples"]]
    _check_frames(calib, model.input_shape, "calibration")
    _check_frames(frames, model.input_shape, "dataset")
    if len(frames) == 0 and len(grid):
        raise InputError("dataset has no frames to sweep over")
    rows = analysis.sweep(model, frames, calib, grid, labels,
                          converter.ConversionConfig(percentile=cfg["percentile"]))
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_sweep_csv(rows, out / "sweep.csv")
    return inputs


def cmd_infer(cfg: dict, out: Path) -> dict:
    model = load_model(_need(cfg["model"], "model"))
    frames, labels = load_frames_any(cfg["dataset"], cfg["split"])
    _check_frames(frames, model.input_shape, "dataset")
    out.mkdir(parents=True, exist_ok=True)
    scores = infer(model, frames)[0] if len(frames) else np.zeros((0, 1))
    preds = np.argmax(scores.reshape(len(frames), -1), axis=1) if len(frames) else np.zeros(0, int)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "prediction"])
        for i, p in enumerate(preds):
            w.writerow([i, "" if labels is None else int(labels[i]), int(p)])
    acc = None if labels is None or not len(frames) else float(np.mean(preds == labels))
    (out / "results.json").write_text(json.dumps({"frames": len(frames), "accuracy": acc}) + "\n",
                                      encoding="utf-8")
    return {"model": Path(cfg["model"]), "dataset": Path(cfg["dataset"])}


def cmd_make_cnet(cfg: dict, out: Path) -> dict:
    try:
        shape = tuple(int(v) for v in str(cfg["input_shape"]).split(","))
    except ValueError:
        raise InputError(f"bad input shape {cfg['input_shape']!r}") from None
    try:
        model = zoo.cnet(seed=cfg["seed"], input_shape=shape, classes=cfg["classes"])
    except ModelError as exc:
        raise InputError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "cnet.json")
    return {}


HANDLERS = {"preprocess": cmd_preprocess, "convert": cmd_convert, "simulate": cmd_simulate,
            "partition": cmd_partition, "correlate": cmd_correlate, "sweep": cmd_sweep,
            "infer": cmd_infer, "make-cnet": cmd_make_cnet}


PRESET_KEYS = {"mode": "mode", "window": "window_ms", "channels": "channels", "overlap": "overlap",
               "polarity": "polarity", "frame_size": "size"}


def apply_preset(cfg: dict, explicit: set[str]) -> dict:
    """Fill preprocess parameters from ``cfg["preset"]`` unless set explicitly."""
    if not cfg.get("preset"):
        return cfg
    base = dvs.PRESETS[cfg["preset"]].to_dict()
    out = dict(cfg)
    for field, key in PRESET_KEYS.items():
        if key not in explicit:
            out[key] = base[field]
    return out


def run(command: str, cfg: dict, out: Path, explicit: set[str] = frozenset()) -> None:
    """Run one subcommand with a resolved config and write its run manifest."""
    if command == "preprocess":
        cfg = apply_preset(cfg, explicit)
    inputs = HANDLERS[command](cfg, out)
    write_run_manifest(out, command, cfg, inputs)


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.pop("verbose") else logging.INFO)
    command = args.pop("command")
    try:
        out = Path(args.pop("out"))
        if command == "rerun":
            mpath = _need(args["manifest"], "run manifest")
            doc = json.loads(mpath.read_text(encoding="utf-8"))
            command, cfg = doc["command"], dict(doc["config"])
            if command not in HANDLERS:
                raise InputError(f"unknown command in manifest: {command!r}")
            missing = set(COMMANDS[command]) - set(cfg)
            if missing:
                raise InputError(f"manifest config lacks {sorted(missing)}")
            explicit = set(cfg)
        else:
            cfg, explicit = resolve(command, args, args.pop("config", None))
        run(command, cfg, out, explicit)
    except (InputError, FileNotFoundError, ModelError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except ConstraintError as exc:
        log.error("%s", exc)
        return EXIT_CONSTRAINT
    except SpikeConvError as exc:
        # conversion failures such as unconvertible or degenerate layers
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
