"""JSON-lines metrics and CSV report exports."""
import csv
import json

import pytest

from adaspan.metrics import (RETURN_COLUMNS, MetricsWriter, read_metrics,
                             write_reports)


def sample_record(step, spans=True):
    rec = {
        "step": step, "frames": step * 256, "lr": 2e-3,
        "total_loss": 0.5, "pg_loss": 0.1, "baseline_loss": 0.7,
        "entropy_loss": -0.69, "span_loss": 0.01, "grad_norm": 1.5,
        "episodes": step * 3, "mean_return_100": -0.5 + step * 0.01,
    }
    if spans:
        rec["spans"] = [[9.6, 2.0], [1.0, 3.5]]
        rec["flops"] = {"macs_adaptive": 100, "macs_fixed": 400, "ratio": 0.25}
    else:
        rec["spans"] = None
        rec["flops"] = None
    return rec


def test_writer_sorted_keys_and_flush(tmp_path):
    path = tmp_path / "metrics.jsonl"
    with MetricsWriter(path) as w:
        w.write({"b": 2, "a": 1})
        first = path.read_text()       # flushed immediately
        assert first == '{"a": 1, "b": 2}\n'
        w.write({"z": None})
    assert read_metrics(path) == [{"a": 1, "b": 2}, {"z": None}]


def test_writer_rejects_nan(tmp_path):
    with MetricsWriter(tmp_path / "m.jsonl") as w:
        with pytest.raises(ValueError):
            w.write({"x": float("nan")})


def test_read_metrics_missing_file(tmp_path):
    assert read_metrics(tmp_path / "none.jsonl") == []


def test_write_reports_full(tmp_path):
    with MetricsWriter(tmp_path / "metrics.jsonl") as w:
        for s in (1, 2, 3):
            w.write(sample_record(s))
    paths = write_reports(tmp_path)
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["returns.csv", "spans.csv", "flops.csv"]

    with open(tmp_path / "returns.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == RETURN_COLUMNS
    assert len(rows) == 4
    assert rows[1][0] == "1"

    with open(tmp_path / "spans.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "layer0_head0", "layer0_head1", "layer1_head0",
                       "layer1_head1", "layer0_max", "layer1_max"]
    assert rows[1] == ["1", "9.6", "2.0", "1.0", "3.5", "9.6", "3.5"]

    with open(tmp_path / "flops.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "macs_adaptive", "macs_fixed", "ratio"]
    assert rows[2] == ["2", "100", "400", "0.25"]


def test_write_reports_without_spans(tmp_path):
    with MetricsWriter(tmp_path / "metrics.jsonl") as w:
        w.write(sample_record(1, spans=False))
    write_reports(tmp_path)
    with open(tmp_path / "spans.csv") as f:
        rows = list(csv.reader(f))
    assert rows == [["step"]]
    with open(tmp_path / "flops.csv") as f:
        rows = list(csv.reader(f))
    assert rows == [["step", "macs_adaptive", "macs_fixed", "ratio"]]


def test_write_reports_empty_dir(tmp_path):
    paths = write_reports(tmp_path)
    for p in paths:
        with open(p) as f:
            rows = list(csv.reader(f))
        assert len(rows) == 1     # header only


def test_null_mean_return_serializes(tmp_path):
    rec = sample_record(1)
    rec["mean_return_100"] = None
    with MetricsWriter(tmp_path / "metrics.jsonl") as w:
        w.write(rec)
    write_reports(tmp_path)
    with open(tmp_path / "returns.csv") as f:
        rows = list(csv.reader(f))
    assert rows[1][-1] == ""       # empty cell, not "None"
