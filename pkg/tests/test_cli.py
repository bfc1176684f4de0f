import csv
import json
import logging

import numpy as np
import pytest

from helpers import write_event_corpus
from spikeconv.cli import COMMANDS, EXIT_CONSTRAINT, EXIT_INPUT, EXIT_OK, config_hash, main, resolve


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    events = write_event_corpus(root / "events")
    assert main(["preprocess", str(events), "--preset", "D8", "--out", str(root / "ds")]) == EXIT_OK
    assert main(["make-cnet", "--input-shape", "32,32,3", "--classes", "11", "--seed", "4",
                 "--out", str(root / "model")]) == EXIT_OK
    assert main(["convert", str(root / "model" / "cnet.json"), str(root / "ds"),
                 "--out", str(root / "conv")]) == EXIT_OK
    return root


def _manifest(path):
    return json.loads((path / "run_manifest.json").read_text())


def test_preprocess_outputs_and_preset(pipeline):
    doc = json.loads((pipeline / "ds" / "dataset.json").read_text())
    assert doc["config"] == {"mode": "time_based", "window": 300, "channels": 3, "overlap": 2,
                             "polarity": "unsigned_single", "frame_size": 32}
    assert doc["splits"]["test"]["recordings"] == ["user04", "user09"]
    m = _manifest(pipeline / "ds")
    assert m["config"]["window_ms"] == 300 and m["config"]["overlap"] == 2
    assert "train.dvsf" in m["outputs"] and "dataset.json" in m["outputs"]


def test_explicit_flags_equal_preset(pipeline, tmp_path):
    out = tmp_path / "flags"
    assert main(["preprocess", str(pipeline / "events"), "--window-ms", "300", "--channels", "3",
                 "--overlap", "2", "--size", "32", "--polarity", "discard", "--out", str(out)]) == 0
    for name in ("train.dvsf", "test.dvsf"):
        assert (out / name).read_bytes() == (pipeline / "ds" / name).read_bytes()


def test_convert_outputs(pipeline):
    conv = pipeline / "conv"
    for name in ("snn.json", "normalized.json", "normalization_report.json", "run_manifest.json"):
        assert (conv / name).is_file()
    m = _manifest(conv)
    assert m["config"]["dthir"] == 2 and m["config"]["reset"] == "soft"
    assert m["config_hash"] == config_hash("convert", m["config"])
    names = {k.rsplit("/", 1)[-1] for k in m["inputs"]}
    assert {"cnet.json", "cnet.conv1.weights.f32", "train.dvsf", "train.labels.csv"} <= names


def test_partition_prints_table(pipeline, tmp_path, capsys):
    assert main(["partition", str(pipeline / "conv" / "snn.json"), "--out", str(tmp_path / "p")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split() == ["layer", "neurons", "neurocores"]
    assert {"input", "conv1", "total"} <= {line.split()[0] for line in table.splitlines()}
    plan = json.loads((tmp_path / "p" / "partition.json").read_text())
    assert plan["constraints"] == {"max_compartments": 1024, "max_fan_in_axons": 4096,
                                   "max_fan_out_axons": 4096}


def test_max_compartments_override(pipeline, tmp_path):
    assert main(["partition", str(pipeline / "conv" / "snn.json"), "--max-compartments", "512",
                 "--out", str(tmp_path / "p")]) == 0
    plan = json.loads((tmp_path / "p" / "partition.json").read_text())
    assert plan["constraints"]["max_compartments"] == 512
    assert max(c["compartments"] for c in plan["cores"]) <= 512


def test_unpartitionable_exits_3(pipeline, tmp_path, caplog):
    code = main(["partition", str(pipeline / "conv" / "snn.json"), "--max-fan-in", "100",
                 "--out", str(tmp_path / "p")])
    assert code == EXIT_CONSTRAINT
    assert "unpartitionable layer" in caplog.text
    assert not (tmp_path / "p").exists()


def test_simulate_outputs(pipeline, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", str(pipeline / "conv" / "snn.json"), str(pipeline / "ds"), "--steps", "32",
                 "--limit", "3", "--record-rasters", "--out", str(out)]) == 0
    with open(out / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(0 <= int(r["prediction"]) < 11 for r in rows)
    res = json.loads((out / "results.json").read_text())
    assert res["frames"] == 3 and res["duration"] == 32
    assert (out / "rasters.csv").is_file()
    assert COMMANDS["simulate"]["steps"][0] == 256


def test_simulate_input_errors(pipeline, tmp_path):
    snn = str(pipeline / "conv" / "snn.json")
    assert main(["simulate", snn, str(pipeline / "ds"), "--steps", "0", "--out", str(tmp_path / "a")]) == 2
    assert main(["simulate", snn, str(pipeline / "ds"), "--limit", "0", "--out", str(tmp_path / "b")]) == 2
    np.save(tmp_path / "wrong.npy", np.zeros((2, 5, 5, 1)))
    assert main(["simulate", snn, str(tmp_path / "wrong.npy"), "--out", str(tmp_path / "c")]) == 2
    assert not any((tmp_path / d).exists() for d in "abc")


def test_convert_input_errors(pipeline, tmp_path, caplog):
    model = str(pipeline / "model" / "cnet.json")
    assert main(["convert", model, str(pipeline / "ds"), "--dthir", "3", "--out", str(tmp_path / "a")]) == 2
    assert "dthir must be a power of two" in caplog.text
    bad = tmp_path / "bad.json"
    doc = json.loads((pipeline / "model" / "cnet.json").read_text())
    doc["layers"][1]["kind"] = "LSTM"
    doc["layers"][1]["output_shape"] = [13, 13, 32]
    bad.write_text(json.dumps(doc))
    for blob in (pipeline / "model").glob("*.f32"):
        (tmp_path / blob.name).write_bytes(blob.read_bytes())
    caplog.clear()
    assert main(["convert", str(bad), str(pipeline / "ds"), "--out", str(tmp_path / "b")]) == 2
    assert "index 1" in caplog.text


def test_preprocess_input_errors(pipeline, tmp_path):
    assert main(["preprocess", str(tmp_path / "nope"), "--out", str(tmp_path / "a")]) == EXIT_INPUT
    assert main(["preprocess", str(pipeline / "events"), "--size", "24", "--out", str(tmp_path / "b")]) == 2
    assert main(["convert", "--out", str(tmp_path / "c")]) == 2


def test_config_precedence_flag_wins(pipeline, tmp_path, caplog):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"snn": str(pipeline / "conv" / "snn.json"), "max_compartments": 256}))
    with caplog.at_level(logging.INFO):
        assert main(["partition", "--config", str(cfg), "--max-compartments", "512",
                     "--out", str(tmp_path / "p")]) == 0
    assert "--max-compartments=512 overrides config value 256" in caplog.text
    assert _manifest(tmp_path / "p")["config"]["max_compartments"] == 512
    resolved, explicit = resolve("partition", {}, str(cfg))
    assert resolved["max_compartments"] == 256 and resolved["max_fan_in"] == 4096
    assert explicit == {"snn", "max_compartments"}
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["partition", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 2


def test_correlate_writes_scatter_per_layer(pipeline, tmp_path):
    out = tmp_path / "corr"
    assert main(["correlate", str(pipeline / "conv" / "normalized.json"), str(pipeline / "conv" / "snn.json"),
                 str(pipeline / "ds"), "--steps", "64", "--out", str(out)]) == 0
    rep = json.loads((out / "correlation.json").read_text())
    names = [lc["name"] for lc in rep["layers"]]
    assert names == ["conv1", "conv2", "conv3", "conv4", "dense"]
    assert sorted(p.name for p in out.glob("scatter_*.csv")) == sorted(f"scatter_{n}.csv" for n in names)


def test_sweep_rows_match_grid(pipeline, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"reset_mode": ["soft", "hard"], "dthir": [2], "duration": [16, 32]}))
    out = tmp_path / "sweep"
    assert main(["sweep", str(pipeline / "model" / "cnet.json"), str(pipeline / "ds"), str(pipeline / "ds"),
                 "--grid", str(grid), "--samples", "4", "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert [(r["reset_mode"], r["duration"]) for r in rows] == [("soft", "16"), ("soft", "32"),
                                                                ("hard", "16"), ("hard", "32")]


def test_infer(pipeline, tmp_path):
    assert main(["infer", str(pipeline / "model" / "cnet.json"), str(pipeline / "ds"),
                 "--out", str(tmp_path / "i")]) == 0
    res = json.loads((tmp_path / "i" / "results.json").read_text())
    assert res["frames"] > 0 and 0 <= res["accuracy"] <= 1


def test_rerun_is_bit_identical(pipeline, tmp_path):
    first = _manifest(pipeline / "conv")
    assert main(["rerun", str(pipeline / "conv" / "run_manifest.json"), "--out", str(tmp_path / "again")]) == 0
    second = _manifest(tmp_path / "again")
    assert second["outputs"] == first["outputs"]
    assert second["config_hash"] == first["config_hash"]
    assert main(["rerun", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
