"""Optimizer arithmetic, the stepped cosine schedule, and gradient clipping."""
import math

import numpy as np
import pytest

from adaspan import tensor as T
from adaspan.optim import RMSProp, cosine_schedule, global_norm_clip
from adaspan.oracles import rmsprop_reference


def param(values):
    return T.param(np.asarray(values, dtype=np.float64))


def test_first_step_hand_value():
    # g=1, lr=0.1: m = 0.01, denom = sqrt(0.01) + 0.01 = 0.11,
    # step = 0.1 / 0.11 = 10/11.
    p = param([0.0])
    p.grad = np.array([1.0])
    RMSProp({"p": p}, lr=0.1).step()
    assert p.data[0] == pytest.approx(-0.1 / 0.11, abs=1e-15)
    assert p.data[0] == pytest.approx(-0.9090909091, abs=1e-9)


def test_first_step_eps_inside_root_differs():
    p = param([0.0])
    p.grad = np.array([1.0])
    RMSProp({"p": p}, lr=0.1, eps_in_sqrt=True).step()
    assert p.data[0] == pytest.approx(-0.1 / math.sqrt(0.02), abs=1e-15)


@pytest.mark.parametrize("eps_in_sqrt", [False, True])
def test_hundred_steps_match_reference(eps_in_sqrt):
    rng = np.random.default_rng(3)
    shapes = [(3,), (2, 4), (1,)]
    ps = {f"p{i}": param(rng.normal(size=s)) for i, s in enumerate(shapes)}
    start = [ps[f"p{i}"].data.copy() for i in range(len(shapes))]
    grads_per_step = [[rng.normal(size=s) for s in shapes] for _ in range(100)]

    opt = RMSProp(ps, lr=0.005, decay=0.99, eps=0.01, eps_in_sqrt=eps_in_sqrt)
    for grads in grads_per_step:
        for i in range(len(shapes)):
            ps[f"p{i}"].grad = grads[i].copy()
        opt.step()
        opt.zero_grad()

    expected = rmsprop_reference(start, grads_per_step, lr=0.005, decay=0.99,
                                 eps=0.01, eps_in_sqrt=eps_in_sqrt)
    for i in range(len(shapes)):
        assert np.abs(ps[f"p{i}"].data - expected[i]).max() < 1e-12


def test_momentum_accumulates():
    p = param([0.0])
    opt = RMSProp({"p": p}, lr=0.1, momentum=0.5)
    p.grad = np.array([1.0])
    opt.step()
    first = -0.1 / 0.11
    assert p.data[0] == pytest.approx(first, abs=1e-15)
    p.grad = np.array([0.0])      # pure momentum carry: half the buffered step
    opt.step()
    assert p.data[0] == pytest.approx(first + 0.5 * first, abs=1e-15)


def test_weight_decay_applied_to_gradient():
    p = param([2.0])
    p.grad = np.array([0.0])
    RMSProp({"p": p}, lr=0.1, weight_decay=0.5).step()
    # effective g = 0 + 0.5*2 = 1: same arithmetic as the hand-value case
    assert p.data[0] == pytest.approx(2.0 - 0.1 / 0.11, abs=1e-15)


def test_lr_scales_only_named_params():
    a, b = param([0.0]), param([0.0])
    a.grad = np.array([1.0])
    b.grad = np.array([1.0])
    RMSProp({"a": a, "b": b}, lr=0.1, lr_scales={"b": 10.0}).step()
    assert b.data[0] == pytest.approx(10.0 * a.data[0], abs=1e-15)


def test_missing_grad_is_skipped():
    p, q = param([1.0]), param([1.0])
    q.grad = np.array([1.0])
    RMSProp({"p": p, "q": q}, lr=0.1).step()
    assert p.data[0] == 1.0
    assert q.data[0] != 1.0


def test_step_lr_override_and_state_roundtrip():
    p = param([0.0])
    opt = RMSProp({"p": p}, lr=99.0)
    p.grad = np.array([1.0])
    opt.step(lr=0.1)
    assert p.data[0] == pytest.approx(-0.1 / 0.11, abs=1e-15)

    fresh = RMSProp({"p": param(p.data)}, lr=99.0)
    fresh.load_state_arrays(opt.state_arrays())
    assert np.array_equal(fresh.square_avg["p"], opt.square_avg["p"])
    with pytest.raises(ValueError, match="shape mismatch"):
        fresh.load_state_arrays({"square_avg.p": np.zeros(5)})


def test_constructor_validation():
    with pytest.raises(ValueError, match="decay"):
        RMSProp({"p": param([0.0])}, lr=0.1, decay=1.0)
    with pytest.raises(ValueError, match="eps"):
        RMSProp({"p": param([0.0])}, lr=0.1, eps=0.0)


# ----------------------------------------------------------------- schedule --

def test_cosine_endpoints_are_exact():
    assert cosine_schedule(0, 2e-3, 500) == 2e-3
    assert cosine_schedule(500, 2e-3, 500) == 0.0
    assert cosine_schedule(10 ** 9, 2e-3, 500) == 0.0
    assert cosine_schedule(0, 4e-4, 937, min_lr=1e-5) == pytest.approx(4e-4, abs=1e-18)
    assert cosine_schedule(937, 4e-4, 937, min_lr=1e-5) == 1e-5


def test_cosine_is_piecewise_constant():
    total, every = 50000, 10000
    vals = [cosine_schedule(s, 1.0, total, every) for s in range(0, total, 500)]
    distinct = sorted(set(vals), reverse=True)
    assert len(distinct) == 5
    for s in range(0, total):
        if s % 5000 == 0:
            assert cosine_schedule(s, 1.0, total, every) == vals[(s // every) * (every // 500)]
    # constant inside a window, drops between windows
    assert cosine_schedule(0, 1.0, total, every) == cosine_schedule(9999, 1.0, total, every)
    assert cosine_schedule(10000, 1.0, total, every) < cosine_schedule(9999, 1.0, total, every)


def test_cosine_monotone_nonincreasing():
    lrs = [cosine_schedule(s, 1.0, 2000, update_every=100, min_lr=0.01)
           for s in range(0, 2001, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == 1.0 and lrs[-1] == 0.01


def test_cosine_warmup_ramp():
    got = [cosine_schedule(s, 1.0, 1000, warmup_steps=4) for s in range(4)]
    assert got == [0.25, 0.5, 0.75, 1.0]
    assert cosine_schedule(4, 1.0, 1000, warmup_steps=4) <= 1.0


def test_cosine_validation():
    with pytest.raises(ValueError, match="total_steps"):
        cosine_schedule(0, 1.0, 0)
    with pytest.raises(ValueError, match="step"):
        cosine_schedule(-1, 1.0, 10)


# ----------------------------------------------------------------- clipping --

def test_global_norm_clip_scales_jointly():
    a, b = param([3.0]), param([4.0])
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])
    norm = global_norm_clip({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(5.0, abs=1e-12)
    assert a.grad[0] == pytest.approx(0.6, abs=1e-12)
    assert b.grad[0] == pytest.approx(0.8, abs=1e-12)


def test_global_norm_clip_leaves_small_gradients():
    a = param([1.0])
    a.grad = np.array([0.3])
    norm = global_norm_clip({"a": a}, max_norm=40.0)
    assert norm == pytest.approx(0.3, abs=1e-15)
    assert a.grad[0] == 0.3
