"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import functools
import json
import time

import numpy as np
import pytest

import oracles
from helpers import write_event_corpus
from spikeconv import ops, zoo
from spikeconv.analysis import agreement, correlate
from spikeconv.cli import main
from spikeconv.converter import ConversionConfig, convert, convert_full
from spikeconv.dvs import PRESETS, accumulate, downsample_normalize, frame_ranges, synthetic_stream
from spikeconv.intmath import round_half_away
from spikeconv.model import infer
from spikeconv.partitioner import (CoreConstraints, compartment_cost, partition, populations,
                                   validate_partition)
from spikeconv.simulator import NeuronParams, NeuronState, SimulationConfig, simulate_batch, step_layer

NETS = 100
SAMPLES = 16


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed, budget):
        ok = ok and elapsed < budget
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail}; {elapsed:.2f}s of {budget}s)")
        return ok
    return emit


@functools.lru_cache(maxsize=None)
def population():
    """Random 3-layer ReLU conv nets with calibration and probe inputs, fixed seed."""
    rng = np.random.default_rng(2024)
    nets = []
    for _ in range(NETS):
        m = zoo.random_conv_net(rng, max_side=8)
        nets.append((m, rng.random((32, *m.input_shape)), rng.random((SAMPLES, *m.input_shape))))
    return nets


def _dnn_predictions(model, x):
    scores, _ = infer(model, x)
    return np.argmax(scores.reshape(len(x), -1), axis=1)


def _mean_agreement(dthir, duration, reset="soft"):
    scores = []
    for m, cal, x in population():
        snn, _ = convert(m, cal, ConversionConfig(dthir=dthir, reset_mode=reset))
        _, preds = simulate_batch(snn, x, SimulationConfig(duration=duration))
        scores.append(agreement(_dnn_predictions(m, x), preds))
    return float(np.mean(scores))


# --------------------------------------------------------------------------- 1

def test_criterion_1_single_neuron_closed_forms(report):
    start = time.perf_counter()
    theta, steps = 1024, 256

    def count(drive, reset):
        params = NeuronParams(np.array([drive]), theta)
        state = NeuronState.zeros((1,))
        for _ in range(steps):
            state, _ = step_layer(state, params, 0, reset)
        return int(state.spike_count[0])

    soft = [count(int(r * theta), "soft") for r in (0, 0.25, 0.5, 0.75, 1.0)]
    hard_rate = count(int(0.75 * theta), "hard") / steps
    ok = all(abs(c - e) <= 1 for c, e in zip(soft, (0, 64, 128, 192, 256))) and hard_rate == 0.5
    elapsed = time.perf_counter() - start
    assert report(1, ok, f"soft counts {soft}, hard rate {hard_rate}", elapsed, 1)


# --------------------------------------------------------------------------- 2

def test_criterion_2_rate_coding_fidelity(report):
    start = time.perf_counter()
    passing, soft_rs, hard_rs = 0, [], []
    for m, cal, x in population():
        res = {reset: convert_full(m, cal, ConversionConfig(dthir=2, reset_mode=reset))
               for reset in ("soft", "hard")}
        rs = {}
        for reset, r in res.items():
            trace, _ = simulate_batch(r.snn, x, SimulationConfig(duration=512))
            rep = correlate(infer(r.normalized, x)[1], trace, r.snn, keep_pairs=False)
            rs[reset] = [lc.r if lc.r is not None else 0.0 for lc in rep.layers]
        passing += all(r >= 0.98 for r in rs["soft"])
        soft_rs.append(np.mean(rs["soft"]))
        hard_rs.append(np.mean(rs["hard"]))
    soft_mean, hard_mean = float(np.mean(soft_rs)), float(np.mean(hard_rs))
    ok = passing >= 95 and hard_mean < soft_mean
    elapsed = time.perf_counter() - start
    assert report(2, ok, f"{passing}/100 nets with every layer r >= 0.98; mean r soft {soft_mean:.4f} "
                         f"vs hard {hard_mean:.4f}", elapsed, 300)


# --------------------------------------------------------------------------- 3

def test_criterion_3_dthir_trend(report):
    start = time.perf_counter()
    a = {d: _mean_agreement(d, 256) for d in (2, 8, 32)}
    ok = a[2] >= a[8] >= a[32]
    elapsed = time.perf_counter() - start
    assert report(3, ok, "agreement " + ", ".join(f"dthir {d}: {v:.3f}" for d, v in a.items()), elapsed, 300)


# --------------------------------------------------------------------------- 4

def test_criterion_4_duration_trend(report):
    start = time.perf_counter()
    a = {T: _mean_agreement(2, T) for T in (32, 256, 512, 1024)}
    ok = a[256] >= a[32] and a[1024] - a[512] <= 0.02
    elapsed = time.perf_counter() - start
    assert report(4, ok, "agreement " + ", ".join(f"T={T}: {v:.3f}" for T, v in a.items()), elapsed, 600)


# --------------------------------------------------------------------------- 5

def test_criterion_5_inference_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = {"conv2d": 0.0, "depthwise": 0.0, "dense": 0.0, "avgpool": 0.0}
    for _ in range(100):
        h, w, c = (int(v) for v in rng.integers(3, 8, size=3))
        k = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        f = int(rng.integers(1, 5))
        x = rng.normal(size=(h, w, c))
        kern, b = rng.normal(size=(*k, c, f)), rng.normal(size=f)
        worst["conv2d"] = max(worst["conv2d"], np.abs(
            ops.conv2d(x[None], kern, b, s)[0] - oracles.conv2d_loops(x, kern, b, s)).max())
        dk, db = rng.normal(size=(*k, c)), rng.normal(size=c)
        worst["depthwise"] = max(worst["depthwise"], np.abs(
            ops.depthwise_conv2d(x[None], dk, db, s)[0] - oracles.depthwise_loops(x, dk, db, s)).max())
        n, mo = int(rng.integers(1, 40)), int(rng.integers(1, 20))
        v, dw, dbias = rng.normal(size=n), rng.normal(size=(n, mo)), rng.normal(size=mo)
        worst["dense"] = max(worst["dense"], np.abs(
            ops.dense(v[None], dw, dbias)[0] - oracles.dense_loops(v, dw, dbias)).max())
        pool = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        worst["avgpool"] = max(worst["avgpool"], np.abs(
            ops.avg_pool2d(x[None], pool, pool)[0] - oracles.pool_loops(x, pool, pool, "mean")).max())
    ok = all(v <= 1e-5 for v in worst.values())
    elapsed = time.perf_counter() - start
    detail = "max abs error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " over 100 cases each"
    assert report(5, ok, detail, elapsed, 30)


# --------------------------------------------------------------------------- 6

def test_criterion_6_quantization_bound(report):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    checked, bad, clipped_when_weights = 0, 0, 0
    for _ in range(50):
        m = zoo.random_conv_net(rng)
        res = convert_full(m, rng.random((16, *m.input_shape)), ConversionConfig())
        specs = [l.name for l in res.normalized.layers]
        for layer, rep in zip([l for l in res.snn.layers if l.spiking], res.report.layers):
            w_norm = res.normalized.weights[specs.index(layer.name)]
            if w_norm is None:
                continue
            s = layer.weight_scale
            w_norm = np.asarray(w_norm, np.float64)
            raw = round_half_away(w_norm * s)
            kept = (raw >= -256) & (raw <= 255)
            err = np.abs(layer.weights / s - w_norm)[kept]
            checked += int(kept.sum())
            bad += int(np.count_nonzero(err > 0.5 / s + 1e-12))
            if rep.scale_source == "weights" and np.abs(w_norm).max() * s <= 255 + 1e-9:
                clipped_when_weights += rep.clipped_weights
    ok = bad == 0 and clipped_when_weights == 0 and checked > 0
    elapsed = time.perf_counter() - start
    assert report(6, ok, f"{checked} weights checked, {bad} over bound, {clipped_when_weights} clipped "
                         "where max|w| sets the scale", elapsed, 60)


# --------------------------------------------------------------------------- 7

def test_criterion_7_partition_validity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    valid = 0
    for i in range(200):
        m = zoo.random_conv_net(rng)
        reset = "soft" if i % 2 else "hard"
        snn, _ = convert(m, rng.random((8, *m.input_shape)), ConversionConfig(reset_mode=reset))
        # half at the hardware limits, half on small cores so layers really split
        c = CoreConstraints() if i < 100 else CoreConstraints(int(rng.integers(8, 64)), 4096, 4096)
        plan = partition(snn, c)
        valid += validate_partition(plan, snn) == []
    cnet, _ = convert(zoo.cnet(), np.random.default_rng(0).random((20, 28, 28, 1)), ConversionConfig())
    soft = partition(cnet, reset_mode="soft")
    names, shapes = populations(cnet)
    per_layer = soft.cores_per_layer()
    bounds = {n: -(-int(np.prod(s)) * 2 // 1024) for n, s in zip(names, shapes)}
    bound_ok = all(per_layer[n] >= bounds[n] for n in names) and bounds["conv1"] == 6
    cost_ok = compartment_cost("soft") == 2 * compartment_cost("hard")
    constants_ok = CoreConstraints() == CoreConstraints(1024, 4096, 4096)
    ok = valid == 200 and bound_ok and cost_ok and constants_ok and validate_partition(soft, cnet) == []
    elapsed = time.perf_counter() - start
    assert report(7, ok, f"{valid}/200 plans valid; cNet soft cores {per_layer} vs lower bounds {bounds}",
                  elapsed, 30)


# --------------------------------------------------------------------------- 8

def test_criterion_8_preprocessing(report):
    start = time.perf_counter()
    stream = synthetic_stream(6000, seed=8)
    cfg = PRESETS["D8"]
    raw = accumulate(stream, cfg)
    frames = downsample_normalize(raw, cfg)
    conserved = all(raw[k].sum() == np.count_nonzero((stream.t >= k * cfg.stride)
                                                     & (stream.t < k * cfg.stride + cfg.span))
                    for k in range(len(raw)))
    again = downsample_normalize(accumulate(stream, cfg), cfg)
    d4 = [(b - a) // 1000 for a, b in PRESETS["D4"].channel_bounds]
    ok = (frames.shape == (39, 32, 32, 3) and conserved and np.array_equal(frames, again)
          and len(frame_ranges(stream, cfg)) == 39 and d4 == [78, 78, 79])
    elapsed = time.perf_counter() - start
    assert report(8, ok, f"D8 frames {frames.shape}, conservation {conserved}, D4 channels {d4} ms",
                  elapsed, 10)


# --------------------------------------------------------------------------- 9

def test_criterion_9_end_to_end(report, tmp_path):
    start = time.perf_counter()
    events = write_event_corpus(tmp_path / "events")
    ds, model, conv = tmp_path / "ds", tmp_path / "model", tmp_path / "conv"
    steps = [
        ["preprocess", str(events), "--preset", "D8", "--out", str(ds)],
        ["make-cnet", "--input-shape", "32,32,3", "--classes", "11", "--seed", "9", "--out", str(model)],
        ["convert", str(model / "cnet.json"), str(ds), "--dthir", "2", "--reset", "soft", "--out", str(conv)],
        ["partition", str(conv / "snn.json"), "--out", str(tmp_path / "part")],
        ["simulate", str(conv / "snn.json"), str(ds), "--steps", "64", "--out", str(tmp_path / "sim")],
        ["correlate", str(conv / "normalized.json"), str(conv / "snn.json"), str(ds), "--steps", "64",
         "--out", str(tmp_path / "corr")],
    ]
    codes = [main(argv) for argv in steps]
    identical = True
    for argv in steps:
        out = argv[argv.index("--out") + 1]
        manifest = json.loads((tmp_path / out / "run_manifest.json").read_text())
        replay = tmp_path / (out.rsplit("/", 1)[-1] + "_rerun")
        codes.append(main(["rerun", str(tmp_path / out / "run_manifest.json"), "--out", str(replay)]))
        second = json.loads((replay / "run_manifest.json").read_text())
        identical &= second["outputs"] == manifest["outputs"] and second["config"] == manifest["config"]
        identical &= all((replay / rel).read_bytes() == (tmp_path / out / rel).read_bytes()
                         for rel in manifest["outputs"])
    ok = all(c == 0 for c in codes) and identical
    elapsed = time.perf_counter() - start
    assert report(9, ok, f"exit codes {codes}, reruns bit-identical {identical}", elapsed, 120)
