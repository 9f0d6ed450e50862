"""Training metrics: JSON-lines records and CSV exports.

Records are serialized with sorted keys and no timestamps, so two runs with
the same seed in deterministic mode produce byte-identical files.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

RETURN_COLUMNS = ["step", "frames", "lr", "total_loss", "pg_loss", "baseline_loss",
                  "entropy_loss", "span_loss", "grad_norm", "episodes", "mean_return_100"]


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    out = []
    p = Path(path)
    if not p.exists():
        return out
    with open(p) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_reports(run_dir: str | Path) -> list[str]:
    """Export returns.csv, spans.csv and flops.csv from a run's metrics.jsonl.

    Empty or missing metrics produce header-only files. Returns the paths."""
    run_dir = Path(run_dir)
    records = read_metrics(run_dir / "metrics.jsonl")
    written = []

    returns_path = run_dir / "returns.csv"
    with open(returns_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RETURN_COLUMNS)
        for rec in records:
            w.writerow([rec.get(col, "") if rec.get(col) is not None else ""
                        for col in RETURN_COLUMNS])
    written.append(str(returns_path))

    span_records = [r for r in records if r.get("spans") is not None]
    spans_path = run_dir / "spans.csv"
    with open(spans_path, "w", newline="") as f:
        w = csv.writer(f)
        if span_records:
            spans0 = span_records[0]["spans"]
            cols = ["step"]
            cols += [f"layer{i}_head{j}" for i, row in enumerate(spans0) for j in range(len(row))]
            cols += [f"layer{i}_max" for i in range(len(spans0))]
            w.writerow(cols)
            for rec in span_records:
                row = [rec["step"]]
                row += [z for layer in rec["spans"] for z in layer]
                row += [max(layer) for layer in rec["spans"]]
                w.writerow(row)
        else:
            w.writerow(["step"])
    written.append(str(spans_path))

    flop_records = [r for r in records if r.get("flops") is not None]
    flops_path = run_dir / "flops.csv"
    with open(flops_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "macs_adaptive", "macs_fixed", "ratio"])
        for rec in flop_records:
            fl = rec["flops"]
            w.writerow([rec["step"], fl["macs_adaptive"], fl["macs_fixed"], fl["ratio"]])
    written.append(str(flops_path))
    return written
