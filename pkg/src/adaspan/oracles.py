"""Slow reference implementations used only to check the fast paths.

Everything here is written independently of the modules under test: plain
python loops and numpy, no imports from the attention / learner / optimizer
code. Deliberately naive; correctness over speed.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def fd_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. each array, elementwise.

    ``f`` must read the arrays' current contents on every call; the arrays are
    perturbed in place and restored afterwards.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                    h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between autodiff and finite-difference gradients.

    ``loss_fn`` builds a fresh graph from the parameters' current data on each
    call. Relative error per element is |fd-ad| / max(|fd|, |ad|, floor).
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    ad = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        fd = fd_gradient(lambda: float(loss_fn().data.reshape(-1)[0]), [p.data], h=h)[0]
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad[name])), floor)
        err = float(np.max(np.abs(fd - ad[name]) / denom)) if fd.size else 0.0
        worst = max(worst, err)
    for p in params.values():
        p.zero_grad()
    return worst


def _sinusoid(n: int, d: int) -> np.ndarray:
    pe = np.zeros((n, d), dtype=np.float64)
    for x in range(n):
        for i in range(d // 2):
            freq = 1.0 / (10000.0 ** (2.0 * i / d))
            pe[x, 2 * i] = math.sin(x * freq)
            pe[x, 2 * i + 1] = math.cos(x * freq)
    return pe


def dense_attention_reference(x: np.ndarray, params: dict[str, np.ndarray],
                              n_layers: int, n_heads: int, d_head: int,
                              ramp: int, spans: list[np.ndarray] | None,
                              segments: np.ndarray | None = None,
                              eps: float = 1e-5) -> np.ndarray:
    """Single-pass full-context forward through the block stack.

    Processes the whole sequence at once with per-position loops: no chunking,
    no memory, no windowing. Position t attends to strictly earlier positions
    of the same segment. ``spans`` gives per-layer arrays of per-head span
    values, or None for the fixed (non-adaptive) model.
    """
    T, d = x.shape
    if T > 64:
        raise ValueError(f"reference caps the sequence at 64 steps, got {T}")
    seg = np.zeros(T, dtype=np.int64) if segments is None else np.asarray(segments)
    pe = _sinusoid(T, d)
    scale = 1.0 / math.sqrt(d_head)

    def ln(v: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * g + b

    h = x.astype(np.float64).copy()
    for layer in range(n_layers):
        pfx = f"blocks.{layer}."
        hn = ln(h, params[pfx + "ln1.g"], params[pfx + "ln1.b"])
        q = (hn @ params[pfx + "attn.wq"]).reshape(T, n_heads, d_head)
        k = (hn @ params[pfx + "attn.wk"]).reshape(T, n_heads, d_head)
        v = (hn @ params[pfx + "attn.wv"]).reshape(T, n_heads, d_head)
        r = (pe @ params[pfx + "attn.wr"]).reshape(T, n_heads, d_head)
        u_bias = params[pfx + "attn.u"]
        v_bias = params[pfx + "attn.v"]
        ctx = np.zeros((T, n_heads, d_head), dtype=np.float64)
        for head in range(n_heads):
            z = None if spans is None else float(spans[layer][head])
            for t in range(T):
                scores, masks, cols = [], [], []
                for j in range(t):
                    if seg[j] != seg[t]:
                        continue
                    dist = t - j
                    if z is None:
                        m = 1.0
                    else:
                        m = min(max((ramp + z - dist) / ramp, 0.0), 1.0)
                    s = (q[t, head] + u_bias[head]) @ k[j, head]
                    s += (q[t, head] + v_bias[head]) @ r[dist, head]
                    scores.append(s * scale)
                    masks.append(m)
                    cols.append(j)
                live = [i for i in range(len(cols)) if masks[i] > 0.0]
                if not live:
                    continue
                c = max(scores[i] for i in live)
                weights = [masks[i] * math.exp(scores[i] - c) for i in range(len(cols))]
                total = sum(weights)
                for i, j in enumerate(cols):
                    ctx[t, head] += (weights[i] / total) * v[j, head]
        h = h + ctx.reshape(T, n_heads * d_head) @ params[pfx + "attn.wo"]
        fn = ln(h, params[pfx + "ln2.g"], params[pfx + "ln2.b"])
        f1 = np.maximum(fn @ params[pfx + "ff.w1"] + params[pfx + "ff.b1"], 0.0)
        h = h + f1 @ params[pfx + "ff.w2"] + params[pfx + "ff.b2"]
    return h


def vtrace_direct(behavior_log_probs: np.ndarray, target_log_probs: np.ndarray,
                  rewards: np.ndarray, dones: np.ndarray, values: np.ndarray,
                  bootstrap_value: float, gamma: float,
                  rho_bar: float = 1.0, c_bar: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Non-recursive V-trace targets by direct double summation (T <= 10).

    Takes per-step log probabilities of the taken actions under both policies.
    Returns (vs, pg_advantages).
    """
    T = len(rewards)
    if T > 10:
        raise ValueError(f"direct V-trace caps T at 10, got {T}")
    vals = np.append(np.asarray(values, dtype=np.float64), float(bootstrap_value))
    rho = np.minimum(rho_bar, np.exp(target_log_probs - behavior_log_probs))
    c = np.minimum(c_bar, np.exp(target_log_probs - behavior_log_probs))
    disc = gamma * (1.0 - np.asarray(dones, dtype=np.float64))
    delta = rho * (rewards + disc * vals[1:] - vals[:-1])

    vs = np.zeros(T, dtype=np.float64)
    for s in range(T):
        acc = vals[s]
        for t in range(s, T):
            prod = 1.0
            for i in range(s, t):
                prod *= disc[i] * c[i]
            acc += prod * delta[t]
        vs[s] = acc

    pg = np.zeros(T, dtype=np.float64)
    for s in range(T):
        vs_next = vs[s + 1] if s + 1 < T else float(bootstrap_value)
        pg[s] = rho[s] * (rewards[s] + disc[s] * vs_next - vals[s])
    return vs, pg


def rmsprop_reference(params: list[np.ndarray], grads_per_step: list[list[np.ndarray]],
                      lr: float, decay: float = 0.99, eps: float = 0.01,
                      eps_in_sqrt: bool = False) -> list[np.ndarray]:
    """Scalar-loop RMSProp: runs every step and returns the final parameters."""
    ps = [p.astype(np.float64).copy() for p in params]
    ms = [np.zeros_like(p) for p in ps]
    for grads in grads_per_step:
        for p, m, g in zip(ps, ms, grads):
            pf, mf, gf = p.reshape(-1), m.reshape(-1), np.asarray(g, dtype=np.float64).reshape(-1)
            for i in range(pf.size):
                mf[i] = decay * mf[i] + (1.0 - decay) * gf[i] * gf[i]
                if eps_in_sqrt:
                    denom = math.sqrt(mf[i] + eps)
                else:
                    denom = math.sqrt(mf[i]) + eps
                pf[i] -= lr * gf[i] / denom
    return ps
