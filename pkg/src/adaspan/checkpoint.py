"""Single-file binary checkpoints.

Layout (little-endian throughout):

    bytes 0..7    magic b"ADSPCKPT"
    bytes 8..11   format version, uint32 (currently 1)
    bytes 12..19  header length in bytes, uint64
    header        UTF-8 JSON of that exact length
    payload       raw float64 buffers, back to back, in header order

The header holds the training step, the fully resolved run configuration, and
two tables ("params", "optimizer") listing name, shape, offset and byte count
of every buffer; offsets are relative to the start of the payload. Loading and
saving round-trip bit-identically.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ADSPCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    step: int
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]


def _table_and_payload(arrays: dict[str, np.ndarray], offset: int) -> tuple[list[dict], list[bytes], int]:
    table, chunks = [], []
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    return table, chunks, offset


def save_checkpoint(path: str | Path, step: int, config: dict,
                    params: dict[str, np.ndarray],
                    optimizer: dict[str, np.ndarray] | None = None) -> None:
    optimizer = optimizer or {}
    p_table, p_chunks, offset = _table_and_payload(params, 0)
    o_table, o_chunks, _ = _table_and_payload(optimizer, offset)
    header = json.dumps({
        "step": int(step),
        "config": config,
        "params": p_table,
        "optimizer": o_table,
        "dtype": "<f8",
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in p_chunks + o_chunks:
            f.write(chunk)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[12:20])[0]
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = raw[20 + hlen:]

    def read_table(table) -> dict[str, np.ndarray]:
        out = {}
        for row in table:
            buf = payload[row["offset"]:row["offset"] + row["nbytes"]]
            if len(buf) != row["nbytes"]:
                raise CheckpointError(f"{path}: truncated buffer for {row['name']}")
            out[row["name"]] = np.frombuffer(buf, dtype="<f8").reshape(row["shape"]).copy()
        return out

    return Checkpoint(step=header["step"], config=header["config"],
                      params=read_table(header["params"]),
                      optimizer=read_table(header["optimizer"]))


def restore_model(model, optimizer, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into a freshly built model/optimizer in place."""
    live = model.parameters()
    if set(live) != set(ckpt.params):
        missing = sorted(set(live) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(live))
        raise CheckpointError(
            f"checkpoint/config mismatch: missing={missing[:5]}, unexpected={extra[:5]}")
    for name, p in live.items():
        src = ckpt.params[name]
        if src.shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint/config mismatch: {name} has shape {src.shape}, "
                f"model expects {p.data.shape}")
        p.data[...] = src
    if optimizer is not None and ckpt.optimizer:
        optimizer.load_state_arrays(ckpt.optimizer)
