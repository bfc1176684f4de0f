"""DVS event streams to labeled frame datasets.

Timestamps are integer microseconds from the start of a recording. A frame
accumulates events from a fixed time window (or a fixed event count), split
into sub-window channels; consecutive frames may overlap. Frames are pooled on
raw counts and normalized last.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SENSOR_SIZE = 128
NUM_CLASSES = 11

# u32 t_us, u16 x, u16 y, i8 polarity, then padding to a 12-byte record
EVENT_DTYPE = np.dtype({"names": ["t", "x", "y", "p"],
                        "formats": ["<u4", "<u2", "<u2", "i1"],
                        "offsets": [0, 4, 6, 8], "itemsize": 12})

POLARITY_ALIASES = {
    "two_channel": "two_channel", "keep": "two_channel", "split": "two_channel",
    "signed_single": "signed_single", "signed": "signed_single",
    "unsigned_single": "unsigned_single", "discard": "unsigned_single", "unsigned": "unsigned_single",
}


class EventFormatError(ValueError):
    """An event file could not be parsed."""


@dataclass(frozen=True)
class DvsEvent:
    t: int
    x: int
    y: int
    polarity: int


@dataclass
class EventStream:
    """One recording, stored as parallel arrays sorted by time."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    label: int = 0
    recording_id: str = ""
    meta: dict = field(default_factory=dict)
    duration_us: int | None = None
    rejected: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, np.int64).reshape(-1)
        self.x = np.asarray(self.x, np.int64).reshape(-1)
        self.y = np.asarray(self.y, np.int64).reshape(-1)
        self.p = np.asarray(self.p, np.int64).reshape(-1)
        if not (self.t.size == self.x.size == self.y.size == self.p.size):
            raise ValueError("event arrays differ in length")
        if not 0 <= self.label < NUM_CLASSES:
            raise ValueError(f"label {self.label} outside 0..{NUM_CLASSES - 1}")
        if self.t.size and np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps must be non-decreasing")

    @classmethod
    def from_events(cls, events: Iterable[DvsEvent], **kw) -> "EventStream":
        events = list(events)
        cols = np.array([(e.t, e.x, e.y, e.polarity) for e in events], np.int64).reshape(-1, 4)
        return cls(*cols.T, **kw)

    def __len__(self):
        return int(self.t.size)

    def __iter__(self):
        for t, x, y, p in zip(self.t, self.x, self.y, self.p):
            yield DvsEvent(int(t), int(x), int(y), int(p))

    @property
    def duration(self) -> int:
        """Recording length in us; defaults to one past the last timestamp."""
        if self.duration_us is not None:
            return int(self.duration_us)
        return int(self.t[-1]) + 1 if self.t.size else 0


def _clean(t, x, y, p, path) -> tuple[np.ndarray, ...]:
    ok = (x >= 0) & (x < SENSOR_SIZE) & (y >= 0) & (y < SENSOR_SIZE) & ((p == 1) | (p == -1)) & (t >= 0)
    rejected = int(np.count_nonzero(~ok))
    if rejected:
        log.warning("%s: rejected %d out-of-range event records", path, rejected)
    t, x, y, p = t[ok], x[ok], y[ok], p[ok]
    if t.size and np.any(np.diff(t) < 0):
        log.warning("%s: timestamps not sorted, sorting", path)
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    return t, x, y, p, rejected


def read_events(path, fmt: str | None = None, label: int = 0, recording_id: str | None = None,
                duration_us: int | None = None, meta: dict | None = None) -> EventStream:
    """Read a CSV (``t_us,x,y,pol``, header optional) or binary event file.

    Out-of-range records are dropped and counted in ``rejected``; unsorted
    input is sorted with a warning.
    """
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "csv")
    if fmt == "bin":
        raw = path.read_bytes()
        if len(raw) % EVENT_DTYPE.itemsize:
            raise EventFormatError(f"{path}: size {len(raw)} is not a multiple of "
                                   f"{EVENT_DTYPE.itemsize}-byte records")
        rec = np.frombuffer(raw, EVENT_DTYPE)
        cols = [rec[k].astype(np.int64) for k in ("t", "x", "y", "p")]
    elif fmt == "csv":
        rows = []
        with path.open(newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or not "".join(row).strip():
                    continue
                try:
                    rows.append([int(v) for v in row])
                except ValueError:
                    if lineno == 1:
                        continue  # header
                    raise EventFormatError(f"{path}:{lineno}: cannot parse {row!r}") from None
                if len(rows[-1]) != 4:
                    raise EventFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        arr = np.array(rows, np.int64).reshape(-1, 4)
        cols = list(arr.T)
    else:
        raise ValueError(f"unknown event format {fmt!r}")
    t, x, y, p, rejected = _clean(*cols, path)
    return EventStream(t, x, y, p, label=label, recording_id=recording_id or path.stem,
                       meta=dict(meta or {}), duration_us=duration_us, rejected=rejected)


def write_events(stream: EventStream, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "csv")
    if fmt == "bin":
        if stream.t.size and stream.t.max() > np.iinfo(np.uint32).max:
            raise ValueError("timestamp does not fit the binary record")
        rec = np.zeros(len(stream), EVENT_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        path.write_bytes(rec.tobytes())
    else:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t_us", "x", "y", "pol"])
            w.writerows(zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()))


@dataclass(frozen=True)
class AccumulationConfig:
    """``window`` is in ms for time-based mode and an event count for quantitative mode."""

    mode: str = "time_based"
    window: int = 300
    channels: int = 3
    overlap: int = 1
    polarity: str = "unsigned_single"
    frame_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "polarity", POLARITY_ALIASES.get(self.polarity, self.polarity))
        if self.mode not in ("time_based", "quantitative"):
            raise ValueError(f"unknown accumulation mode {self.mode!r}")
        if self.polarity not in POLARITY_ALIASES.values():
            raise ValueError(f"unknown polarity policy {self.polarity!r}")
        if self.window < 1 or self.channels < 1 or self.overlap < 1:
            raise ValueError("window, channels and overlap must be positive")
        if self.channels > self.window:
            raise ValueError("more channels than window units")
        if self.span % self.overlap:
            raise ValueError(f"window {self.window} is not divisible by overlap {self.overlap}")
        if self.frame_size < 1 or SENSOR_SIZE % self.frame_size:
            raise ValueError(f"frame size {self.frame_size} does not divide {SENSOR_SIZE}")

    @property
    def span(self) -> int:
        """Window in accumulation units: us (time-based) or events (quantitative)."""
        return self.window * 1000 if self.mode == "time_based" else self.window

    @property
    def stride(self) -> int:
        return self.span // self.overlap

    @property
    def channel_bounds(self) -> list[tuple[int, int]]:
        """Per-channel sub-windows relative to the frame start, in accumulation units.

        Each channel gets ``window // channels`` (in ms for time-based mode); the
        last one also takes the remainder.
        """
        unit = 1000 if self.mode == "time_based" else 1
        base = (self.window // self.channels) * unit
        edges = [j * base for j in range(self.channels)] + [self.span]
        return list(zip(edges[:-1], edges[1:]))

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.polarity == "two_channel" else self.channels

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.frame_size, self.frame_size, self.out_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AccumulationConfig":
        return cls(**d)


def _preset(window, channels, overlap):
    return AccumulationConfig("time_based", window, channels, overlap, "unsigned_single", 32)


PRESETS = {
    "D1": _preset(60, 6, 1),
    "D2": _preset(60, 3, 1),
    "D3": _preset(150, 3, 1),
    "D4": _preset(235, 3, 1),
    "D5": _preset(300, 3, 1),
    "D6": _preset(100, 1, 1),
    "D7": _preset(235, 3, 2),
    "D8": _preset(300, 3, 2),
}


def frame_count(length: int, span: int, stride: int) -> int:
    """Number of whole windows of ``span`` at ``stride`` within ``length``."""
    if length < span:
        return 0
    return (length - span) // stride + 1


def frame_ranges(stream: EventStream, config: AccumulationConfig) -> list[tuple[int, int]]:
    """Event index range ``[lo, hi)`` of every frame."""
    if config.mode == "quantitative":
        n = frame_count(len(stream), config.span, config.stride)
        return [(k * config.stride, k * config.stride + config.span) for k in range(n)]
    n = frame_count(stream.duration, config.span, config.stride)
    starts = np.arange(n, dtype=np.int64) * config.stride
    lo = np.searchsorted(stream.t, starts, side="left")
    hi = np.searchsorted(stream.t, starts + config.span, side="left")
    return list(zip(lo.tolist(), hi.tolist()))


def _channel_of(offset: np.ndarray, config: AccumulationConfig) -> np.ndarray:
    bounds = config.channel_bounds
    starts = np.array([b[0] for b in bounds[1:]], np.int64)
    return np.searchsorted(starts, offset, side="right")


def accumulate(stream: EventStream, config: AccumulationConfig) -> np.ndarray:
    """Raw count frames of shape ``(n, 128, 128, out_channels)``, int32.

    two_channel puts sub-window ``j`` positive events in channel ``2j`` and
    negative ones in ``2j + 1``; signed_single starts every pixel at 128 and
    adds the polarity; unsigned_single counts every event.
    """
    ranges = frame_ranges(stream, config)
    frames = np.zeros((len(ranges), SENSOR_SIZE, SENSOR_SIZE, config.out_channels), np.int32)
    if config.polarity == "signed_single":
        frames += 128
    for k, (lo, hi) in enumerate(ranges):
        if hi <= lo:
            continue
        if config.mode == "time_based":
            offset = stream.t[lo:hi] - k * config.stride
        else:
            offset = np.arange(hi - lo, dtype=np.int64)
        ch = _channel_of(offset, config)
        x, y, p = stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi]
        if config.polarity == "two_channel":
            np.add.at(frames[k], (y, x, 2 * ch + (p < 0)), 1)
        elif config.polarity == "signed_single":
            np.add.at(frames[k], (y, x, ch), p.astype(np.int32))
        else:
            np.add.at(frames[k], (y, x, ch), 1)
    return frames


def downsample_normalize(frames: np.ndarray, config: AccumulationConfig) -> np.ndarray:
    """Average-pool raw counts to ``frame_size`` and scale each frame into [0, 1].

    Accepts a single ``(128, 128, c)`` frame or a stack of them.
    """
    frames = np.asarray(frames)
    single = frames.ndim == 3
    if single:
        frames = frames[None]
    side = frames.shape[1]
    if side % config.frame_size:
        raise ValueError(f"frame size {config.frame_size} does not divide {side}")
    k = side // config.frame_size
    n, h, w, c = frames.shape
    pooled = frames.astype(np.float64).reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))
    if config.polarity == "signed_single":
        out = np.clip(pooled, 0, 255) / 255.0
    else:
        peak = pooled.reshape(n, -1).max(axis=1) if n else np.zeros(0)
        scale = np.where(peak > 0, peak, 1.0)
        out = pooled / scale[:, None, None, None]
    out = out.astype(np.float32)
    return out[0] if single else out


@dataclass
class FrameDataset:
    frames: np.ndarray
    labels: np.ndarray
    split: str
    config: dict
    recordings: list[str] = field(default_factory=list)
    frame_index: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, np.float32)
        self.labels = np.asarray(self.labels, np.int64).reshape(-1)
        if self.frames.ndim != 4 or self.frames.shape[0] != self.labels.size:
            raise ValueError("frames must be (n, h, w, c) with one label per frame")
        if self.frame_index is None:
            self.frame_index = np.arange(self.labels.size)
        if not self.recordings:
            self.recordings = [""] * self.labels.size

    def __len__(self):
        return int(self.labels.size)

    def class_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def split_every(n: int = 5) -> Callable[[int, EventStream], str]:
    """Every ``n``-th recording (1-based) goes to test."""
    if n < 2:
        raise ValueError("split interval must be at least 2")
    return lambda i, rec: "test" if i % n == n - 1 else "train"


def split_by_meta(key: str = "split", default: str = "train") -> Callable[[int, EventStream], str]:
    return lambda i, rec: rec.meta.get(key, default)


def split_by_trial(test_trials: Sequence) -> Callable[[int, EventStream], str]:
    wanted = {str(v) for v in test_trials}
    return lambda i, rec: "test" if str(rec.meta.get("trial")) in wanted else "train"


def build_dataset(recordings: Sequence[EventStream], config: AccumulationConfig,
                  split_rule: Callable[[int, EventStream], str] | None = None
                  ) -> dict[str, FrameDataset]:
    """Frames for every recording, grouped by split.

    Recordings are processed in ``recording_id`` order and frames keep their
    index within the recording, so the output is independent of input order.
    """
    split_rule = split_rule or split_every()
    ordered = sorted(recordings, key=lambda r: r.recording_id)
    parts: dict[str, dict[str, list]] = {}
    for i, rec in enumerate(ordered):
        split = split_rule(i, rec)
        if split not in ("train", "test"):
            raise ValueError(f"split rule returned {split!r} for {rec.recording_id}")
        frames = downsample_normalize(accumulate(rec, config), config)
        part = parts.setdefault(split, {"frames": [], "labels": [], "recs": [], "idx": []})
        part["frames"].append(frames)
        part["labels"].extend([rec.label] * len(frames))
        part["recs"].extend([rec.recording_id] * len(frames))
        part["idx"].extend(range(len(frames)))
    out = {}
    for split in ("train", "test"):
        part = parts.get(split, {"frames": [], "labels": [], "recs": [], "idx": []})
        frames = (np.concatenate(part["frames"]) if part["frames"]
                  else np.zeros((0, *config.frame_shape), np.float32))
        out[split] = FrameDataset(frames, part["labels"], split, config.to_dict(),
                                  part["recs"], np.asarray(part["idx"], np.int64))
    missing = set(out["train"].class_counts()) - set(out["test"].class_counts())
    if missing and len(ordered):
        log.warning("classes %s have no test frames", sorted(missing))
    return out


# ----------------------------------------------------------------------------- container

FRAME_MAGIC = b"DVSF"
FRAME_VERSION = 1
_HEADER = struct.Struct("<4sHIHHH")


def save_frames(dataset: FrameDataset, path) -> list[Path]:
    """Write the ``.dvsf`` frame file and its ``.labels.csv`` sidecar."""
    path = Path(path)
    n, h, w, c = dataset.frames.shape
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, n, h, w, c))
        fh.write(dataset.frames.astype("<f4").tobytes())
    side = path.with_suffix(".labels.csv")
    with side.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "label", "recording", "frame"])
        for i, (lab, rec, k) in enumerate(zip(dataset.labels, dataset.recordings, dataset.frame_index)):
            wr.writerow([i, int(lab), rec, int(k)])
    return [path, side]


def load_frames(path, split: str | None = None, config: dict | None = None) -> FrameDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated frame file")
    magic, version, n, h, w, c = _HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise ValueError(f"{path}: not a frame file")
    if version != FRAME_VERSION:
        raise ValueError(f"{path}: unsupported frame file version {version}")
    body = raw[_HEADER.size:]
    if len(body) != n * h * w * c * 4:
        raise ValueError(f"{path}: expected {n} frames of {h}x{w}x{c}")
    frames = np.frombuffer(body, "<f4").reshape(n, h, w, c).astype(np.float32)
    labels, recs, idx = np.zeros(n, np.int64), [""] * n, np.arange(n)
    side = path.with_suffix(".labels.csv")
    if side.exists():
        with side.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != n:
            raise ValueError(f"{side}: {len(rows)} labels for {n} frames")
        labels = np.array([int(r["label"]) for r in rows], np.int64)
        recs = [r["recording"] for r in rows]
        idx = np.array([int(r["frame"]) for r in rows], np.int64)
    return FrameDataset(frames, labels, split or path.stem, dict(config or {}), recs, idx)


def save_dataset(splits: dict[str, FrameDataset], out_dir, config: AccumulationConfig) -> list[Path]:
    """Write ``train.dvsf``/``test.dvsf`` with sidecars and ``dataset.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = {"format": "spikeconv-frames", "format_version": FRAME_VERSION,
                "config": config.to_dict(), "frame_shape": list(config.frame_shape), "splits": {}}
    for name, ds in splits.items():
        written += save_frames(ds, out_dir / f"{name}.dvsf")
        manifest["splits"][name] = {"file": f"{name}.dvsf", "frames": len(ds),
                                    "class_counts": {str(k): v for k, v in ds.class_counts().items()},
                                    "recordings": sorted(set(ds.recordings))}
    mpath = out_dir / "dataset.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return written + [mpath]


def load_dataset(path, split: str = "test") -> FrameDataset:
    """Load one split from a dataset directory (or a ``.dvsf`` file directly)."""
    path = Path(path)
    if path.is_dir():
        manifest = json.loads((path / "dataset.json").read_text(encoding="utf-8"))
        if split not in manifest["splits"]:
            raise ValueError(f"dataset has no {split!r} split")
        return load_frames(path / manifest["splits"][split]["file"], split, manifest["config"])
    return load_frames(path, split)


def read_recordings(events_dir) -> list[EventStream]:
    """Read every recording listed in ``events_dir/labels.csv``.

    The index has columns ``file,label`` and optionally ``split``, ``trial``,
    ``subject``, ``lighting`` and ``duration_us``; extra columns go to ``meta``.
    """
    events_dir = Path(events_dir)
    index = events_dir / "labels.csv"
    if not index.exists():
        raise FileNotFoundError(f"{index} not found")
    out = []
    with index.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            meta = {k: v for k, v in row.items() if k not in ("file", "label", "duration_us") and v}
            dur = row.get("duration_us")
            out.append(read_events(events_dir / row["file"], label=int(row["label"]),
                                   recording_id=Path(row["file"]).stem, meta=meta,
                                   duration_us=int(dur) if dur else None))
    return out


def synthetic_stream(duration_ms: int, rate_hz: float = 20000.0, label: int = 0,
                     seed: int = 0, recording_id: str = "synthetic") -> EventStream:
    """Uniform random events over the sensor for ``duration_ms``."""
    rng = np.random.default_rng(seed)
    span = duration_ms * 1000
    n = int(rng.poisson(rate_hz * duration_ms / 1000.0))
    t = np.sort(rng.integers(0, span, n))
    x = rng.integers(0, SENSOR_SIZE, n)
    y = rng.integers(0, SENSOR_SIZE, n)
    p = rng.choice([-1, 1], n)
    return EventStream(t, x, y, p, label=label, recording_id=recording_id, duration_us=span)
