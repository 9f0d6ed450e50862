"""Multi-head relative attention with per-head adaptive spans and recurrence memory.

Each attention layer keeps a sliding window of past pre-block hidden states
(gradient-free) and lets queries attend over [memory || current chunk] with a
soft, learnable span per head:

    mask(x) = clamp((R + z - x) / R, 0, 1)

where x is the query-key distance (strictly positive: a position never attends
to itself or the future), z is the learnable span and R the ramp width. The
mask multiplies the exponentiated scores and the softmax renormalizes over the
masked window, so gradients flow into z through the ramp region.

Because the mask is exactly zero beyond ceil(z) + R, execution slices the key
window down to those rows; skipping the provably-zero columns changes nothing
but turns span savings into real compute savings. The executed score/context
multiply-accumulate counts are exposed through ``MacCounter`` and mirrored by
the analytic cost model in ``attention_flops``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

_SINUSOID_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoid_table(n: int, d_model: int) -> np.ndarray:
    """Sinusoidal embeddings of distances 0..n-1 (shared across heads/layers)."""
    if d_model % 2 != 0:
        raise ValueError(f"d_model must be even for sinusoidal embeddings, got {d_model}")
    key = (n, d_model)
    cached = _SINUSOID_CACHE.get(key)
    if cached is None:
        pos = np.arange(n, dtype=np.float64)[:, None]
        inv_freq = 1.0 / (10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model))
        table = np.zeros((n, d_model), dtype=np.float64)
        table[:, 0::2] = np.sin(pos * inv_freq)
        table[:, 1::2] = np.cos(pos * inv_freq)
        cached = _SINUSOID_CACHE[key] = table
    return cached


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int
    d_head: int
    adaptive: bool
    ramp: int = 8
    max_span: int = 32           # S_max; equals the memory length
    span_init_frac: float = 0.3

    def __post_init__(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head must equal d_model: {self.n_heads} * {self.d_head} != {self.d_model}")
        if self.ramp < 2:
            raise ValueError(f"ramp must be >= 2, got {self.ramp}")
        if self.max_span < 1:
            raise ValueError(f"max_span must be >= 1, got {self.max_span}")


def span_mask(z, ramp: int, distances) -> Tensor:
    """Soft span mask clamp((ramp + z - distances) / ramp, 0, 1).

    ``z`` may be a float or a scalar/vector Tensor (gradients flow through the
    ramp region); ``distances`` is a non-negative integer array.
    """
    if ramp < 2:
        raise ValueError(f"ramp must be >= 2, got {ramp}")
    dist = np.asarray(distances)
    if dist.size and dist.min() < 0:
        raise ValueError(f"negative distance in span mask: {dist.min()}")
    z = z if isinstance(z, Tensor) else Tensor(float(z))
    return T.clamp((z + (ramp - dist.astype(np.float64))) * (1.0 / ramp), 0.0, 1.0)


class SpanState:
    """Learnable per-head span values of one layer, clamped to [0, max_span]."""

    def __init__(self, n_heads: int, max_span: int, ramp: int, init_frac: float = 0.3):
        self.max_span = max_span
        self.ramp = ramp
        self.z = T.param(np.full(n_heads, init_frac * max_span, dtype=np.float64))

    def values(self) -> np.ndarray:
        return self.z.data.copy()

    def clamp_(self) -> None:
        """Project spans back into [0, max_span] after an optimizer step."""
        np.clip(self.z.data, 0.0, float(self.max_span), out=self.z.data)

    def head_window(self, head: int) -> int:
        """Executed key-window length for one head: ceil(z) + ramp."""
        return int(math.ceil(self.z.data[head])) + self.ramp


@dataclass
class MemoryState:
    """Per-layer sliding windows of detached pre-block hidden states.

    ``hiddens[i]`` feeds layer i as extra key/value rows. ``segments`` holds
    the episode id of each row; attention never crosses segment boundaries, so
    rows from finished episodes are dead weight until they slide out.
    """
    hiddens: list[np.ndarray]
    segments: np.ndarray
    mem_len: int

    @classmethod
    def empty(cls, n_layers: int, mem_len: int, d_model: int) -> "MemoryState":
        return cls(
            hiddens=[np.zeros((0, d_model), dtype=np.float64) for _ in range(n_layers)],
            segments=np.zeros(0, dtype=np.int64),
            mem_len=mem_len,
        )

    @property
    def rows(self) -> int:
        return self.segments.shape[0]

    def copy(self) -> "MemoryState":
        return MemoryState([h.copy() for h in self.hiddens], self.segments.copy(), self.mem_len)


def update_memory(memory: MemoryState, new_hiddens: list[np.ndarray],
                  new_segments: np.ndarray) -> MemoryState:
    """Append the chunk's pre-block hiddens, keep the most recent mem_len rows."""
    if len(new_hiddens) != len(memory.hiddens):
        raise ValueError(
            f"layer count mismatch: memory has {len(memory.hiddens)}, update has {len(new_hiddens)}")
    L = new_segments.shape[0]
    for h in new_hiddens:
        if h.shape[0] != L:
            raise ValueError(f"hidden rows {h.shape[0]} != segment rows {L}")
    keep = memory.mem_len
    hiddens = [np.concatenate([old, new], axis=0)[-keep:].copy()
               for old, new in zip(memory.hiddens, new_hiddens)]
    segments = np.concatenate([memory.segments, new_segments])[-keep:].copy()
    return MemoryState(hiddens, segments, memory.mem_len)


class MacCounter:
    """Accumulates executed score/context multiply-accumulate counts."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


class RelativeAttention:
    """One multi-head relative-attention layer (content + position terms).

    Scores follow the two-bias relative scheme: for query q and key k at
    distance x,  score = (q+u)·k + (q+v)·r_x, scaled by 1/sqrt(d_head), where
    r_x projects a sinusoidal embedding of the distance and u, v are learned
    per-head global biases.
    """

    def __init__(self, cfg: AttentionConfig, rng: Rng):
        self.cfg = cfg
        d, inner = cfg.d_model, cfg.n_heads * cfg.d_head
        std = 1.0 / math.sqrt(d)
        self.wq = T.param(rng.normal((d, inner), std))
        self.wk = T.param(rng.normal((d, inner), std))
        self.wv = T.param(rng.normal((d, inner), std))
        self.wr = T.param(rng.normal((d, inner), std))
        self.u = T.param(np.zeros((cfg.n_heads, cfg.d_head)))
        self.v = T.param(np.zeros((cfg.n_heads, cfg.d_head)))
        # Zero output projection makes the residual branch vanish at init.
        self.wo = T.param(np.zeros((inner, d)))
        self.spans = SpanState(cfg.n_heads, cfg.max_span, cfg.ramp,
                               cfg.span_init_frac) if cfg.adaptive else None

    def parameters(self) -> dict[str, Tensor]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wr": self.wr,
               "u": self.u, "v": self.v, "wo": self.wo}
        if self.spans is not None:
            out["z"] = self.spans.z
        return out

    def forward(self, h_ln: Tensor, n_mem: int, seg: np.ndarray, *,
                windowed: bool = True, macs: MacCounter | None = None,
                return_weights: bool = False):
        """Attend queries (the chunk part of ``h_ln``) over all of ``h_ln``.

        ``h_ln``: layernormed [memory || chunk] rows, shape [n_mem + L, d].
        ``seg``: per-row episode ids, same length. Returns [L, d] (and the
        full attention weight array [n_heads, L, n_mem + L] if requested).
        """
        cfg = self.cfg
        klen = h_ln.shape[0]
        L = klen - n_mem
        if L <= 0:
            raise ValueError(f"no query rows: {klen} total rows, {n_mem} memory rows")
        if seg.shape[0] != klen:
            raise ValueError(f"segment ids cover {seg.shape[0]} rows, expected {klen}")

        # Per-head executed window: key rows below j0 have mask exactly 0, and
        # distances above dmax never occur inside the window, so both the k/v
        # and the position projections shrink with the learned spans.
        if windowed and self.spans is not None:
            j0s = [max(0, n_mem - self.spans.head_window(h)) for h in range(cfg.n_heads)]
            dmaxs = [min(klen - 1, self.spans.head_window(h) + L - 1) for h in range(cfg.n_heads)]
        else:
            j0s = [0] * cfg.n_heads
            dmaxs = [klen - 1] * cfg.n_heads
        j0_min = min(j0s)
        n_keys = klen - 1 - j0_min          # the last row is never attendable
        r_rows = max(dmaxs) + 1

        q = T.reshape(h_ln[n_mem:] @ self.wq, (L, cfg.n_heads, cfg.d_head))
        kv_src = h_ln[j0_min:klen - 1]
        k = T.reshape(kv_src @ self.wk, (n_keys, cfg.n_heads, cfg.d_head))
        v = T.reshape(kv_src @ self.wv, (n_keys, cfg.n_heads, cfg.d_head))
        r = T.reshape(Tensor(sinusoid_table(klen, cfg.d_model)[:r_rows]) @ self.wr,
                      (r_rows, cfg.n_heads, cfg.d_head))
        scale = 1.0 / math.sqrt(cfg.d_head)

        positions_q = n_mem + np.arange(L)
        weights_full = np.zeros((cfg.n_heads, L, klen)) if return_weights else None
        head_ctx = []
        for head in range(cfg.n_heads):
            j0, dmax = j0s[head], dmaxs[head]
            js = np.arange(j0, klen - 1)
            qh = q[:, head, :] + self.u[head]
            kh = k[j0 - j0_min:, head, :]
            ac = qh @ T.transpose(kh)

            dist = positions_q[:, None] - js[None, :]
            qp = q[:, head, :] + self.v[head]
            bd_all = qp @ T.transpose(r[:dmax + 1, head, :])
            bd = T.gather_lastdim(bd_all, np.clip(dist, 0, dmax))

            logits = (ac + bd) * scale
            allow = ((dist >= 1) & (seg[None, js] == seg[n_mem:, None])).astype(np.float64)
            if self.spans is not None:
                mask = span_mask(self.spans.z[head], cfg.ramp, np.maximum(dist, 0)) * Tensor(allow)
            else:
                mask = Tensor(allow)
            attn = T.softmax_lastdim(logits, mask=mask, empty_ok=True)
            if macs is not None:
                macs.add(2 * L * len(js) * cfg.d_head)
            if weights_full is not None:
                weights_full[head, :, j0:klen - 1] = attn.data
            ctx = attn @ v[j0 - j0_min:, head, :]
            head_ctx.append(ctx)

        merged = T.concat(head_ctx, axis=1) if cfg.n_heads > 1 else head_ctx[0]
        out = merged @ self.wo
        if return_weights:
            return out, weights_full
        return out


@dataclass
class FlopReport:
    """Analytic attention cost: score+context MACs under the window model."""
    windows: list[list[int]] = field(default_factory=list)
    macs_adaptive: int = 0
    macs_fixed: int = 0

    @property
    def flops_adaptive(self) -> int:
        return 2 * self.macs_adaptive

    @property
    def flops_fixed(self) -> int:
        return 2 * self.macs_fixed

    @property
    def ratio(self) -> float:
        return self.macs_adaptive / self.macs_fixed if self.macs_fixed else 1.0

    def to_dict(self) -> dict:
        return {
            "windows": self.windows,
            "macs_adaptive": self.macs_adaptive,
            "macs_fixed": self.macs_fixed,
            "flops_adaptive": self.flops_adaptive,
            "flops_fixed": self.flops_fixed,
            "ratio": self.ratio,
        }


def attention_flops(span_values: list[np.ndarray] | None, n_layers: int, n_heads: int,
                    d_head: int, mem_len: int, chunk_len: int, ramp: int) -> FlopReport:
    """Cost model: per query and head, the executed key window is
    min(mem_len, ceil(z) + ramp) rows (mem_len for the fixed model), and both
    the score and the context products cost window * d_head MACs.

    Projections and the position term are excluded: they do not scale with the
    window. ``span_values`` is a per-layer list of per-head spans, or None for
    the fixed model.
    """
    report = FlopReport()
    per_query = 2 * d_head
    for layer in range(n_layers):
        row = []
        for head in range(n_heads):
            if span_values is None:
                w = mem_len
            else:
                w = min(mem_len, int(math.ceil(float(span_values[layer][head]))) + ramp)
            row.append(w)
            report.macs_adaptive += chunk_len * w * per_query
        report.windows.append(row)
    report.macs_fixed = n_layers * n_heads * chunk_len * mem_len * per_query
    return report
