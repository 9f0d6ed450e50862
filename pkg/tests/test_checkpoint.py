"""Binary checkpoint format: round trips, corruption, model restore."""
import numpy as np
import pytest

from adaspan.checkpoint import (MAGIC, Checkpoint, CheckpointError,
                                load_checkpoint, restore_model, save_checkpoint)
from adaspan.model import StableBlockConfig, TransformerAgent
from adaspan.optim import RMSProp
from adaspan.rng import Rng


def small_agent(seed=1, mem_len=8):
    cfg = StableBlockConfig(d_model=16, n_heads=2, d_head=8, d_ff=32,
                            adaptive=True, ramp=4, max_span=mem_len)
    return TransformerAgent((5,), 3, cfg, n_layers=1, mem_len=mem_len,
                            rng=Rng(seed).spawn(1))


def test_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=7)}
    opt = {"square_avg.a.w": rng.normal(size=(3, 4)) ** 2}
    path = tmp_path / "c.bin"
    save_checkpoint(path, 42, {"seed": 3}, params, opt)
    ckpt = load_checkpoint(path)
    assert ckpt.step == 42
    assert ckpt.config == {"seed": 3}
    for k in params:
        assert np.array_equal(ckpt.params[k], params[k])
        assert ckpt.params[k].dtype == np.float64
    assert np.array_equal(ckpt.optimizer["square_avg.a.w"], opt["square_avg.a.w"])

    # identical content saves to identical bytes
    path2 = tmp_path / "c2.bin"
    save_checkpoint(path2, 42, {"seed": 3}, params, opt)
    assert path.read_bytes() == path2.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, 1, {}, {"p": np.zeros(2)})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert int.from_bytes(raw[8:12], "little") == 1
    hlen = int.from_bytes(raw[12:20], "little")
    import json
    header = json.loads(raw[20:20 + hlen])
    assert header["dtype"] == "<f8"
    assert header["params"][0]["name"] == "p"
    assert header["params"][0]["nbytes"] == 16
    assert len(raw) == 20 + hlen + 16


def test_corruption_detected(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, 1, {}, {"p": np.zeros(4)})
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMAGIC" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)

    bad.write_bytes(bytes(raw[:8]) + (99).to_bytes(4, "little") + bytes(raw[12:]))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)

    bad.write_bytes(bytes(raw[:-16]))      # drop half the payload
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)


def test_restore_model_round_trip(tmp_path):
    agent = small_agent()
    opt = RMSProp(agent.parameters(), lr=1e-3)
    for p in agent.parameters().values():
        p.grad = np.ones_like(p.data)
    opt.step()
    path = tmp_path / "c.bin"
    save_checkpoint(path, 7, {}, {k: p.data for k, p in agent.parameters().items()},
                    opt.state_arrays())

    fresh = small_agent(seed=99)           # different init
    fresh_opt = RMSProp(fresh.parameters(), lr=1e-3)
    restore_model(fresh, fresh_opt, load_checkpoint(path))
    for k, p in agent.parameters().items():
        assert np.array_equal(fresh.parameters()[k].data, p.data), k
    for k, v in opt.state_arrays().items():
        assert np.array_equal(fresh_opt.state_arrays()[k], v), k


def test_restore_rejects_mismatched_architecture(tmp_path):
    agent = small_agent()
    path = tmp_path / "c.bin"
    save_checkpoint(path, 1, {}, {k: p.data for k, p in agent.parameters().items()})
    other = TransformerAgent((5,), 3,
                             StableBlockConfig(d_model=16, n_heads=2, d_head=8,
                                               d_ff=32, adaptive=False),
                             n_layers=2, mem_len=8, rng=Rng(0))
    with pytest.raises(CheckpointError, match="mismatch"):
        restore_model(other, None, load_checkpoint(path))

    ckpt = load_checkpoint(path)
    ckpt.params["encoder.l1.w"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError, match="shape"):
        restore_model(small_agent(), None, ckpt)
