"""Agent networks: stable transformer blocks over recurrence memory, plus an
LSTM baseline sized for parameter parity.

Block layout is pre-layernorm ("stable"): normalization sits directly before
the attention and feed-forward sublayers, and the attention output projection
and second feed-forward matrix start at zero, so every block is the identity
map at initialization. Policy and value heads also start at zero: the initial
policy is uniform and the initial value estimate is 0 regardless of the
observation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, MacCounter, MemoryState,
                        RelativeAttention, update_memory)
from .rng import Rng
from .tensor import Tensor


@dataclass
class StableBlockConfig:
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    adaptive: bool
    ramp: int = 8
    max_span: int = 32
    span_init_frac: float = 0.3
    dropout: float = 0.0


@dataclass
class PolicyOutput:
    logits: Tensor          # [L, n_actions]
    values: Tensor          # [L]
    state: object           # next recurrent state (MemoryState or LstmState)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: Rng | None, zero: bool = False):
        if zero:
            self.w = T.param(np.zeros((n_in, n_out)))
        else:
            self.w = T.param(rng.normal((n_in, n_out), 1.0 / math.sqrt(n_in)))
        self.b = T.param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class StableBlock:
    """Pre-layernorm transformer block with relative attention over memory."""

    def __init__(self, cfg: StableBlockConfig, rng: Rng):
        d = cfg.d_model
        self.cfg = cfg
        self.ln1_g = T.param(np.ones(d))
        self.ln1_b = T.param(np.zeros(d))
        self.attn = RelativeAttention(
            AttentionConfig(d_model=d, n_heads=cfg.n_heads, d_head=cfg.d_head,
                            adaptive=cfg.adaptive, ramp=cfg.ramp, max_span=cfg.max_span,
                            span_init_frac=cfg.span_init_frac),
            rng)
        self.ln2_g = T.param(np.ones(d))
        self.ln2_b = T.param(np.zeros(d))
        self.ff1 = Linear(d, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, d, rng, zero=True)

    def forward(self, x: Tensor, mem_rows: np.ndarray, seg_full: np.ndarray, *,
                rng: Rng | None = None, training: bool = False,
                windowed: bool = True, macs: MacCounter | None = None) -> Tensor:
        """x: [L, d] chunk; mem_rows: [M, d] detached past hiddens for this block."""
        n_mem = mem_rows.shape[0]
        full = T.concat([Tensor(mem_rows), x], axis=0) if n_mem else x
        h = T.layernorm(full, self.ln1_g, self.ln1_b)
        a = self.attn.forward(h, n_mem, seg_full, windowed=windowed, macs=macs)
        if training and self.cfg.dropout > 0.0:
            a = T.dropout(a, self.cfg.dropout, rng, training=True)
        x1 = x + a
        f = T.layernorm(x1, self.ln2_g, self.ln2_b)
        f = self.ff2(T.relu(self.ff1(f)))
        if training and self.cfg.dropout > 0.0:
            f = T.dropout(f, self.cfg.dropout, rng, training=True)
        return x1 + f

    def parameters(self) -> dict[str, Tensor]:
        out = {"ln1.g": self.ln1_g, "ln1.b": self.ln1_b}
        out.update({f"attn.{k}": v for k, v in self.attn.parameters().items()})
        out.update({"ln2.g": self.ln2_g, "ln2.b": self.ln2_b})
        out.update({f"ff.w1": self.ff1.w, "ff.b1": self.ff1.b,
                    "ff.w2": self.ff2.w, "ff.b2": self.ff2.b})
        return out


class GridEncoder:
    """Three valid 3x3 convolutions then a linear map to d_model."""

    def __init__(self, obs_shape: tuple[int, int, int], d_model: int, rng: Rng, channels: int = 16):
        c, h, w = obs_shape
        self.obs_shape = obs_shape
        sizes = [(h - 2 * k, w - 2 * k) for k in (1, 2, 3)]
        if min(sizes[-1]) < 1:
            raise ValueError(f"grid {h}x{w} too small for three 3x3 convolutions")
        chans = [c, channels, channels, channels]
        self.kernels = []
        self.biases = []
        for i in range(3):
            fan_in = chans[i] * 9
            self.kernels.append(T.param(rng.normal((chans[i + 1], chans[i], 3, 3),
                                                   1.0 / math.sqrt(fan_in))))
            self.biases.append(T.param(np.zeros(chans[i + 1])))
        flat = channels * sizes[-1][0] * sizes[-1][1]
        self.out = Linear(flat, d_model, rng)

    def __call__(self, obs: np.ndarray) -> Tensor:
        x = Tensor(obs)
        for w, b in zip(self.kernels, self.biases):
            x = T.relu(T.conv2d(x, w, b))
        return self.out(T.reshape(x, (x.shape[0], -1)))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        out.update({f"out.{k}": v for k, v in self.out.parameters().items()})
        return out


class VectorEncoder:
    """Two-layer MLP from flat observations to d_model."""

    def __init__(self, n_in: int, d_model: int, rng: Rng, hidden: int = 64):
        self.l1 = Linear(n_in, hidden, rng)
        self.l2 = Linear(hidden, d_model, rng)

    def __call__(self, obs: np.ndarray) -> Tensor:
        return self.l2(T.relu(self.l1(Tensor(obs))))

    def parameters(self) -> dict[str, Tensor]:
        out = {f"l1.{k}": v for k, v in self.l1.parameters().items()}
        out.update({f"l2.{k}": v for k, v in self.l2.parameters().items()})
        return out


def _build_encoder(obs_shape: tuple[int, ...], d_model: int, rng: Rng):
    if len(obs_shape) == 3:
        return GridEncoder(obs_shape, d_model, rng)
    if len(obs_shape) == 1:
        return VectorEncoder(obs_shape[0], d_model, rng)
    raise ValueError(f"unsupported observation shape {obs_shape}")


class TransformerAgent:
    """Encoder -> n_layers stable blocks over memory -> policy/value heads."""

    def __init__(self, obs_shape: tuple[int, ...], n_actions: int,
                 block_cfg: StableBlockConfig, n_layers: int, mem_len: int, rng: Rng):
        if mem_len < 1:
            raise ValueError(f"mem_len must be >= 1, got {mem_len}")
        self.block_cfg = block_cfg
        self.n_layers = n_layers
        self.mem_len = mem_len
        self.n_actions = n_actions
        self.obs_shape = tuple(obs_shape)
        self.encoder = _build_encoder(self.obs_shape, block_cfg.d_model, rng.spawn(0))
        self.blocks = [StableBlock(block_cfg, rng.spawn(i + 1)) for i in range(n_layers)]
        self.policy = Linear(block_cfg.d_model, n_actions, None, zero=True)
        self.value = Linear(block_cfg.d_model, 1, None, zero=True)

    # -- shared agent interface ------------------------------------------------

    def initial_state(self) -> MemoryState:
        return MemoryState.empty(self.n_layers, self.mem_len, self.block_cfg.d_model)

    def step(self, obs: np.ndarray, state: MemoryState, segments: np.ndarray, *,
             rng: Rng | None = None, training: bool = False,
             windowed: bool = True, macs: MacCounter | None = None) -> PolicyOutput:
        """Process a chunk of L observations; returns logits/values per step
        and the updated memory (always advanced by exactly L rows)."""
        segments = np.asarray(segments, dtype=np.int64)
        x = self.encoder(obs)
        seg_full = np.concatenate([state.segments, segments])
        new_hiddens = []
        for block, mem_rows in zip(self.blocks, state.hiddens):
            new_hiddens.append(x.data.copy())
            x = block.forward(x, mem_rows, seg_full, rng=rng, training=training,
                              windowed=windowed, macs=macs)
        logits = self.policy(x)
        values = T.reshape(self.value(x), (x.shape[0],))
        new_state = update_memory(state, new_hiddens, segments)
        return PolicyOutput(logits, values, new_state)

    # -- parameter plumbing ------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        for i, block in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in block.parameters().items()})
        out.update({f"policy.{k}": v for k, v in self.policy.parameters().items()})
        out.update({f"value.{k}": v for k, v in self.value.parameters().items()})
        return out

    def span_params(self) -> list[Tensor]:
        return [b.attn.spans.z for b in self.blocks if b.attn.spans is not None]

    def span_values(self) -> list[np.ndarray] | None:
        if not self.block_cfg.adaptive:
            return None
        return [b.attn.spans.values() for b in self.blocks]

    def clamp_spans(self) -> None:
        for b in self.blocks:
            if b.attn.spans is not None:
                b.attn.spans.clamp_()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


@dataclass
class LstmConfig:
    d_model: int            # encoder output width
    hidden: int             # per-layer LSTM width
    n_layers: int = 1


class LstmState:
    def __init__(self, h: list[np.ndarray], c: list[np.ndarray], last_segment: int):
        self.h = h
        self.c = c
        self.last_segment = last_segment

    def copy(self) -> "LstmState":
        return LstmState([a.copy() for a in self.h], [a.copy() for a in self.c],
                         self.last_segment)


class LstmAgent:
    """Encoder -> stacked LSTM -> policy/value heads (episodic state resets)."""

    def __init__(self, obs_shape: tuple[int, ...], n_actions: int, cfg: LstmConfig, rng: Rng):
        self.cfg = cfg
        self.n_actions = n_actions
        self.obs_shape = tuple(obs_shape)
        self.encoder = _build_encoder(self.obs_shape, cfg.d_model, rng.spawn(0))
        self.w_ih, self.w_hh, self.bias = [], [], []
        n_in = cfg.d_model
        for i in range(cfg.n_layers):
            r = rng.spawn(i + 1)
            self.w_ih.append(T.param(r.normal((n_in, 4 * cfg.hidden), 1.0 / math.sqrt(n_in))))
            self.w_hh.append(T.param(r.normal((cfg.hidden, 4 * cfg.hidden),
                                              1.0 / math.sqrt(cfg.hidden))))
            self.bias.append(T.param(np.zeros(4 * cfg.hidden)))
            n_in = cfg.hidden
        self.policy = Linear(cfg.hidden, n_actions, None, zero=True)
        self.value = Linear(cfg.hidden, 1, None, zero=True)

    def initial_state(self) -> LstmState:
        z = [np.zeros((1, self.cfg.hidden)) for _ in range(self.cfg.n_layers)]
        return LstmState(z, [a.copy() for a in z], -1)

    def step(self, obs: np.ndarray, state: LstmState, segments: np.ndarray, *,
             rng: Rng | None = None, training: bool = False,
             windowed: bool = True, macs: MacCounter | None = None) -> PolicyOutput:
        segments = np.asarray(segments, dtype=np.int64)
        x = self.encoder(obs)
        L = x.shape[0]
        hidden = self.cfg.hidden
        h = [Tensor(a) for a in state.h]
        c = [Tensor(a) for a in state.c]
        prev_seg = state.last_segment
        outputs = []
        for t in range(L):
            if segments[t] != prev_seg and prev_seg != -1:
                h = [hh * 0.0 for hh in h]
                c = [cc * 0.0 for cc in c]
            prev_seg = int(segments[t])
            inp = x[t:t + 1]
            for i in range(self.cfg.n_layers):
                gates = inp @ self.w_ih[i] + h[i] @ self.w_hh[i] + self.bias[i]
                gi = T.sigmoid(gates[:, 0:hidden])
                gf = T.sigmoid(gates[:, hidden:2 * hidden])
                gg = T.tanh(gates[:, 2 * hidden:3 * hidden])
                go = T.sigmoid(gates[:, 3 * hidden:4 * hidden])
                c[i] = gf * c[i] + gi * gg
                h[i] = go * T.tanh(c[i])
                inp = h[i]
            outputs.append(h[-1])
        top = T.concat(outputs, axis=0) if L > 1 else outputs[0]
        logits = self.policy(top)
        values = T.reshape(self.value(top), (L,))
        new_state = LstmState([a.data.copy() for a in h], [a.data.copy() for a in c], prev_seg)
        return PolicyOutput(logits, values, new_state)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        for i in range(self.cfg.n_layers):
            out[f"lstm.{i}.w_ih"] = self.w_ih[i]
            out[f"lstm.{i}.w_hh"] = self.w_hh[i]
            out[f"lstm.{i}.b"] = self.bias[i]
        out.update({f"policy.{k}": v for k, v in self.policy.parameters().items()})
        out.update({f"value.{k}": v for k, v in self.value.parameters().items()})
        return out

    def span_params(self) -> list[Tensor]:
        return []

    def span_values(self) -> None:
        return None

    def clamp_spans(self) -> None:
        pass

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


def lstm_hidden_for_parity(reference_params: int, obs_shape: tuple[int, ...],
                           n_actions: int, d_model: int, n_layers: int,
                           tolerance: float = 0.10) -> int:
    """Pick the LSTM width whose total parameter count best matches
    ``reference_params``; raises if no width lands within ``tolerance``."""
    best_h, best_gap = None, None
    for h in range(4, 4096):
        total = _lstm_param_count(obs_shape, n_actions, d_model, h, n_layers)
        gap = abs(total - reference_params) / reference_params
        if best_gap is None or gap < best_gap:
            best_h, best_gap = h, gap
        if total > reference_params * (1 + tolerance) and gap > best_gap:
            break
    if best_gap is None or best_gap > tolerance:
        raise ValueError(
            f"no LSTM width matches {reference_params} parameters within {tolerance:.0%} "
            f"(best gap {best_gap:.1%})")
    return best_h


def _lstm_param_count(obs_shape, n_actions, d_model, hidden, n_layers) -> int:
    probe = LstmAgent(obs_shape, n_actions,
                      LstmConfig(d_model=d_model, hidden=hidden, n_layers=n_layers), Rng(0))
    return probe.n_params()
