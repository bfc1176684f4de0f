"""Shared test data builders."""

from pathlib import Path

from spikeconv.dvs import synthetic_stream, write_events


def write_event_corpus(root, recordings=10, duration_ms=1200, rate_hz=8000.0):
    """Synthetic recordings plus a labels.csv index; every 5th one goes to test."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["file,label"]
    for i in range(recordings):
        name = f"user{i:02d}.{'bin' if i % 2 else 'csv'}"
        write_events(synthetic_stream(duration_ms, rate_hz, label=i % 11, seed=i), root / name)
        lines.append(f"{name},{i % 11}")
    (root / "labels.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root
