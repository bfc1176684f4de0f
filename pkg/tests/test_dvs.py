import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from spikeconv.dvs import (EVENT_DTYPE, PRESETS, AccumulationConfig, DvsEvent, EventFormatError,
                           EventStream, FrameDataset, _channel_of, accumulate, build_dataset,
                           downsample_normalize, frame_count, frame_ranges, load_dataset,
                           load_frames, read_events, read_recordings, save_dataset, save_frames,
                           split_by_meta, split_by_trial, split_every, synthetic_stream,
                           write_events)


def _stream(ts_ms, **kw):
    n = len(ts_ms)
    return EventStream(np.asarray(ts_ms, np.int64) * 1000, np.arange(n) % 128, np.zeros(n, int),
                       np.ones(n, int), **kw)


# --------------------------------------------------------------------------- readers

def test_empty_file_gives_empty_stream(tmp_path):
    (tmp_path / "e.csv").write_text("")
    s = read_events(tmp_path / "e.csv")
    assert len(s) == 0 and s.duration == 0


def test_csv_record(tmp_path):
    (tmp_path / "a.csv").write_text("1000,5,7,1\n")
    s = read_events(tmp_path / "a.csv")
    assert list(s) == [DvsEvent(1000, 5, 7, 1)]
    (tmp_path / "b.csv").write_text("t_us,x,y,pol\n1000,5,7,1\n")
    assert list(read_events(tmp_path / "b.csv")) == [DvsEvent(1000, 5, 7, 1)]


def test_out_of_range_rejected(tmp_path, caplog):
    (tmp_path / "a.csv").write_text("0,1,1,1\n10,128,7,1\n20,3,3,-1\n")
    s = read_events(tmp_path / "a.csv")
    assert s.rejected == 1 and len(s) == 2
    assert "rejected 1" in caplog.text


def test_unsorted_input_is_sorted(tmp_path, caplog):
    (tmp_path / "a.csv").write_text("30,1,1,1\n10,2,2,1\n20,3,3,-1\n")
    s = read_events(tmp_path / "a.csv")
    assert list(s.t) == [10, 20, 30] and list(s.x) == [2, 3, 1]
    assert "sorting" in caplog.text


def test_malformed_csv(tmp_path):
    (tmp_path / "a.csv").write_text("0,1,1,1\nbad,row,x,y\n")
    with pytest.raises(EventFormatError):
        read_events(tmp_path / "a.csv")
    (tmp_path / "c.bin").write_bytes(b"\x00" * 13)
    with pytest.raises(EventFormatError):
        read_events(tmp_path / "c.bin")


def test_binary_round_trip(tmp_path):
    s = synthetic_stream(50, seed=3, recording_id="r")
    assert EVENT_DTYPE.itemsize == 12
    for name in ("r.bin", "r.csv"):
        write_events(s, tmp_path / name)
        back = read_events(tmp_path / name)
        for k in "txyp":
            assert np.array_equal(getattr(back, k), getattr(s, k))
    assert (tmp_path / "r.bin").stat().st_size == 12 * len(s)


def test_stream_invariants():
    with pytest.raises(ValueError):
        EventStream([2, 1], [0, 0], [0, 0], [1, 1])
    with pytest.raises(ValueError):
        EventStream([1], [0], [0], [1], label=11)


# --------------------------------------------------------------------------- framing

@given(st.integers(0, 20000), st.integers(1, 3000), st.sampled_from([1, 2, 3, 4]))
def test_frame_count_matches_enumeration(length, span, n):
    span *= n
    assert frame_count(length, span, span // n) == oracles.enumerate_frames(length, span, span // n)


def test_d8_frame_count_example():
    assert frame_count(6_000_000, 300_000, 150_000) == 39
    assert frame_count(200_000, 300_000, 150_000) == 0


def test_events_land_in_expected_channels():
    cfg = AccumulationConfig(window=300, channels=3)
    frames = accumulate(_stream([50, 150, 250], duration_us=300_000), cfg)
    assert frames.shape == (1, 128, 128, 3)
    assert list(frames[0].sum(axis=(0, 1))) == [1, 1, 1]


def test_empty_window_gives_zero_channel():
    cfg = AccumulationConfig(window=100, channels=1)
    frames = accumulate(_stream([10, 250], duration_us=300_000), cfg)
    assert frames[1].sum() == 0
    assert np.all(downsample_normalize(frames[1], cfg) == 0)


def test_d4_channel_durations():
    bounds = PRESETS["D4"].channel_bounds
    assert [(b - a) // 1000 for a, b in bounds] == [78, 78, 79]


@given(st.sampled_from([60, 100, 150, 300, 235]), st.sampled_from([1, 2, 3, 6]))
def test_channel_monotone_in_offset(window, c):
    cfg = AccumulationConfig(window=window, channels=c)
    offsets = np.arange(0, window * 1000, 997)
    ch = _channel_of(offsets, cfg)
    assert np.all(np.diff(ch) >= 0) and ch[0] == 0 and ch[-1] == c - 1
    if window % c == 0:
        assert np.array_equal(ch, offsets * c // (window * 1000))


def test_polarity_policies():
    s = EventStream([0, 10, 20], [5, 5, 6], [7, 7, 7], [1, -1, -1], duration_us=1000)
    two = accumulate(s, AccumulationConfig(window=1, channels=1, polarity="two_channel"))
    assert two.shape[-1] == 2
    assert two[0, 7, 5, 0] == 1 and two[0, 7, 5, 1] == 1 and two[0, 7, 6, 1] == 1
    signed = accumulate(s, AccumulationConfig(window=1, channels=1, polarity="signed"))
    assert signed[0, 7, 5, 0] == 128 and signed[0, 7, 6, 0] == 127 and signed[0, 0, 0, 0] == 128
    flat = accumulate(s, AccumulationConfig(window=1, channels=1, polarity="discard"))
    assert flat[0, 7, 5, 0] == 2 and flat.sum() == 3


def test_event_conservation():
    s = synthetic_stream(2000, seed=1)
    for cfg in (PRESETS["D8"], PRESETS["D4"], PRESETS["D1"]):
        frames = accumulate(s, cfg)
        for k, (lo, hi) in enumerate(frame_ranges(s, cfg)):
            start = k * cfg.stride
            n_in = np.count_nonzero((s.t >= start) & (s.t < start + cfg.span))
            assert frames[k].sum() == n_in == hi - lo


def test_overlap_membership():
    s = synthetic_stream(1200, seed=2)
    ranges = frame_ranges(s, PRESETS["D8"])
    half = PRESETS["D8"].stride
    for k in range(len(ranges) - 1):
        cut = int(np.searchsorted(s.t, (k + 1) * half))
        # second half of frame k is the first half of frame k + 1
        assert ranges[k][1] == int(np.searchsorted(s.t, (k + 2) * half))
        assert ranges[k + 1][0] == cut


def test_overlap_ratio():
    for n in (5, 10, 20):
        s = _stream([0], duration_us=n * 300_000)
        one = len(frame_ranges(s, PRESETS["D5"]))
        two = len(frame_ranges(s, PRESETS["D8"]))
        assert (one, two) == (n, 2 * n - 1)


def test_time_based_balance_independent_of_rate():
    cfg = PRESETS["D5"]
    slow = synthetic_stream(3000, rate_hz=2000, seed=1)
    fast = synthetic_stream(3000, rate_hz=50000, seed=2)
    assert len(accumulate(slow, cfg)) == len(accumulate(fast, cfg)) == 10
    q = AccumulationConfig(mode="quantitative", window=500, channels=1)
    assert len(accumulate(fast, q)) > len(accumulate(slow, q))


def test_quantitative_mode_splits_by_count():
    s = synthetic_stream(200, seed=5)
    q = AccumulationConfig(mode="quantitative", window=100, channels=2)
    frames = accumulate(s, q)
    assert len(frames) == len(s) // 100
    assert all(f.sum() == 100 for f in frames)
    assert all(list(f.sum(axis=(0, 1))) == [50, 50] for f in frames)


# --------------------------------------------------------------------------- pooling

def test_block_mean_oracle(rng):
    cfg = AccumulationConfig(frame_size=32)
    raw = rng.integers(0, 50, size=(128, 128, 3))
    pooled = downsample_normalize(raw, cfg)
    expected = oracles.block_mean(raw, 4)
    np.testing.assert_allclose(pooled, expected / expected.max(), rtol=1e-6)


def test_constant_block_and_single_max():
    cfg = AccumulationConfig(frame_size=32, channels=1, window=1)
    raw = np.zeros((128, 128, 1))
    raw[:4, :4] = 8
    assert oracles.block_mean(raw, 4)[0, 0, 0] == 8
    raw[64:68, 64:68] = 16
    out = downsample_normalize(raw, cfg)
    assert out[0, 0, 0] == pytest.approx(0.5) and out[16, 16, 0] == 1.0
    raw = np.zeros((128, 128, 1))
    raw[10:14, 20:24] = 40
    raw[50, 50] = 3
    out = downsample_normalize(raw, cfg)
    assert out[2, 5, 0] == 1.0 and out.max() == 1.0


def test_signed_normalization_and_ranges(rng):
    cfg = AccumulationConfig(polarity="signed_single", channels=1, window=1)
    raw = np.full((128, 128, 1), 128)
    raw[0, 0] = 400
    out = downsample_normalize(raw, cfg)
    assert out[1, 1, 0] == pytest.approx(128 / 255)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        AccumulationConfig(frame_size=24)


def test_config_validation():
    with pytest.raises(ValueError):
        AccumulationConfig(window=300, overlap=7)
    with pytest.raises(ValueError):
        AccumulationConfig(polarity="sideways")
    assert AccumulationConfig.from_dict(PRESETS["D7"].to_dict()) == PRESETS["D7"]


# --------------------------------------------------------------------------- datasets

def test_presets_shapes():
    s = synthetic_stream(6000, seed=0)
    d8 = downsample_normalize(accumulate(s, PRESETS["D8"]), PRESETS["D8"])
    assert d8.shape == (39, 32, 32, 3)
    d6 = downsample_normalize(accumulate(s, PRESETS["D6"]), PRESETS["D6"])
    assert d6.shape == (60, 32, 32, 1)
    assert d8.min() >= 0 and d8.max() <= 1


def _recordings(n=10):
    return [synthetic_stream(700, rate_hz=5000, label=i % 11, seed=i, recording_id=f"rec{i:02d}")
            for i in range(n)]


def test_split_is_by_recording_and_deterministic():
    recs = _recordings()
    cfg = PRESETS["D5"]
    a = build_dataset(recs, cfg, split_every(5))
    b = build_dataset(list(reversed(recs)), cfg, split_every(5))
    assert set(a["train"].recordings).isdisjoint(a["test"].recordings)
    assert sorted(set(a["test"].recordings)) == ["rec04", "rec09"]
    assert np.array_equal(a["train"].frames, b["train"].frames)
    assert len(a["train"]) + len(a["test"]) == 10 * 2


def test_split_by_meta_and_trial():
    recs = _recordings(4)
    recs[1].meta["split"] = "test"
    recs[2].meta["trial"] = "7"
    by_meta = build_dataset(recs, PRESETS["D5"], split_by_meta())
    assert set(by_meta["test"].recordings) == {"rec01"}
    by_trial = build_dataset(recs, PRESETS["D5"], split_by_trial([7]))
    assert set(by_trial["test"].recordings) == {"rec02"}


def test_missing_test_class_warns(caplog):
    build_dataset(_recordings(3), PRESETS["D5"], split_every(5))
    assert "no test frames" in caplog.text


def test_container_round_trip(tmp_path):
    recs = _recordings()
    splits = build_dataset(recs, PRESETS["D8"])
    written = save_dataset(splits, tmp_path / "ds", PRESETS["D8"])
    assert {p.name for p in written} >= {"train.dvsf", "test.dvsf", "dataset.json"}
    manifest = json.loads((tmp_path / "ds" / "dataset.json").read_text())
    assert AccumulationConfig.from_dict(manifest["config"]) == PRESETS["D8"]
    back = load_dataset(tmp_path / "ds", "test")
    assert np.array_equal(back.frames, splits["test"].frames)
    assert np.array_equal(back.labels, splits["test"].labels)
    assert back.recordings == splits["test"].recordings
    assert np.array_equal(back.frame_index, splits["test"].frame_index)
    raw = (tmp_path / "ds" / "test.dvsf").read_bytes()
    assert raw[:4] == b"DVSF"
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "ds", "validation")


def test_frame_file_errors(tmp_path):
    ds = FrameDataset(np.zeros((2, 4, 4, 1)), [0, 1], "train", {})
    save_frames(ds, tmp_path / "f.dvsf")
    assert np.array_equal(load_frames(tmp_path / "f.dvsf").labels, [0, 1])
    (tmp_path / "g.dvsf").write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError, match="not a frame file"):
        load_frames(tmp_path / "g.dvsf")
    data = (tmp_path / "f.dvsf").read_bytes()
    (tmp_path / "h.dvsf").write_bytes(data[:-4])
    with pytest.raises(ValueError):
        load_frames(tmp_path / "h.dvsf")


def test_read_recordings(tmp_path):
    for i in range(3):
        write_events(synthetic_stream(400, seed=i), tmp_path / f"r{i}.csv")
    (tmp_path / "labels.csv").write_text("file,label,split,duration_us\n"
                                         "r0.csv,1,train,400000\nr1.csv,2,test,\nr2.csv,3,train,400000\n")
    recs = read_recordings(tmp_path)
    assert [r.label for r in recs] == [1, 2, 3]
    assert recs[0].duration == 400000 and recs[1].meta["split"] == "test"
    with pytest.raises(FileNotFoundError):
        read_recordings(tmp_path / "missing")
