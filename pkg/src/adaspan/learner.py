"""Actor-learner pipeline pieces: trajectories, buffers, rollouts, loss step.

Actors roll out the policy for a fixed unroll length, recording observations,
actions, rewards, episode segment ids, the behavior logits, and a snapshot of
their recurrent state at the start of the unroll. The learner re-forwards the
unroll chunk by chunk under the current parameters (memory is detached between
chunks, so gradients stay within a chunk), builds V-trace targets from the
stored behavior logits, and applies one RMSProp update.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import attention_flops
from .model import PolicyOutput
from .optim import RMSProp, global_norm_clip
from .rng import Rng
from .tensor import Tensor
from .vtrace import vtrace


class NonFiniteLossError(RuntimeError):
    """The training loss or a gradient went NaN/inf; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Trajectory:
    observations: np.ndarray        # [T+1, ...] includes bootstrap observation
    segments: np.ndarray            # [T+1] episode ids, aligned with observations
    actions: np.ndarray             # [T]
    rewards: np.ndarray             # [T]
    dones: np.ndarray               # [T] bool
    behavior_logits: np.ndarray     # [T, n_actions]
    initial_state: object           # recurrent state snapshot at unroll start
    completed_returns: list[float] = field(default_factory=list)
    actor_id: int = 0

    @property
    def length(self) -> int:
        return self.actions.shape[0]


class TrajectoryBuffers:
    """Bounded multi-producer single-consumer trajectory queue."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"need at least one buffer, got {capacity}")
        self.capacity = capacity
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._lock = threading.Lock()
        self.produced = 0
        self.consumed = 0

    def put(self, traj: Trajectory, timeout: float | None = None) -> None:
        self._q.put(traj, timeout=timeout)
        with self._lock:
            self.produced += 1

    def get(self, timeout: float | None = None) -> Trajectory:
        traj = self._q.get(timeout=timeout)
        with self._lock:
            self.consumed += 1
        return traj

    @property
    def in_flight(self) -> int:
        with self._lock:
            return self.produced - self.consumed


class ParamStore:
    """Latest learner parameters, copied out for actors (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._version = -1
        self._arrays: dict[str, np.ndarray] = {}

    def publish(self, params: dict[str, Tensor], version: int) -> None:
        arrays = {k: p.data.copy() for k, p in params.items()}
        with self._lock:
            self._arrays = arrays
            self._version = version

    def fetch(self, have_version: int):
        with self._lock:
            if self._version == have_version:
                return None
            return self._version, {k: v.copy() for k, v in self._arrays.items()}


def sample_action(logits: np.ndarray, rng: Rng) -> int:
    c = logits.max()
    p = np.exp(logits - c)
    p /= p.sum()
    return rng.choice(len(logits), p=p)


class Actor:
    """Owns one environment and (in threaded mode) one model replica."""

    def __init__(self, actor_id: int, env, model, unroll: int, rng: Rng):
        self.actor_id = actor_id
        self.env = env
        self.model = model
        self.unroll = unroll
        self.rng = rng
        self._version = -1
        self._state = model.initial_state()
        self._segment = 0
        self._obs = env.reset(seed=int(rng.integers(2**31))).observation
        self._episode_return = 0.0

    def sync_params(self, store: ParamStore) -> None:
        got = store.fetch(self._version)
        if got is None:
            return
        self._version, arrays = got
        for name, p in self.model.parameters().items():
            p.data[...] = arrays[name]

    def rollout(self) -> Trajectory:
        Tlen = self.unroll
        obs = np.zeros((Tlen + 1,) + self.model.obs_shape, dtype=np.float64)
        segments = np.zeros(Tlen + 1, dtype=np.int64)
        actions = np.zeros(Tlen, dtype=np.int64)
        rewards = np.zeros(Tlen, dtype=np.float64)
        dones = np.zeros(Tlen, dtype=bool)
        behavior = np.zeros((Tlen, self.model.n_actions), dtype=np.float64)
        initial_state = self._state.copy()
        completed: list[float] = []

        for t in range(Tlen):
            obs[t] = self._obs
            segments[t] = self._segment
            with T.no_grad():
                out: PolicyOutput = self.model.step(
                    obs[t:t + 1], self._state, segments[t:t + 1])
            self._state = out.state
            logits = out.logits.data[0]
            a = sample_action(logits, self.rng)
            step = self.env.step(a)
            actions[t] = a
            rewards[t] = step.reward
            dones[t] = step.done
            behavior[t] = logits
            self._episode_return += step.reward
            if step.done:
                completed.append(self._episode_return)
                self._episode_return = 0.0
                self._segment += 1
                step = self.env.reset()
            self._obs = step.observation
        obs[Tlen] = self._obs
        segments[Tlen] = self._segment
        return Trajectory(obs, segments, actions, rewards, dones, behavior,
                          initial_state, completed, self.actor_id)


def span_penalty(span_params: list[Tensor], penalty: float, max_span: int) -> Tensor:
    """L1 span cost lambda * sum(z) / max_span over every head of every layer."""
    total = Tensor(0.0)
    for z in span_params:
        total = total + z.sum()
    return total * (penalty / max_span)


@dataclass
class LossWeights:
    baseline_cost: float = 0.5
    entropy_cost: float = 0.01
    span_penalty: float = 0.0
    discount: float = 0.99
    reward_clip: float = 1.0
    grad_clip: float = 40.0
    rho_bar: float = 1.0
    c_bar: float = 1.0


def chunked_learn_step(model, optimizer: RMSProp, batch: list[Trajectory],
                       weights: LossWeights, chunk_len: int, lr: float,
                       rng: Rng | None = None, training_dropout: bool = True) -> dict:
    """One learner update over a batch of trajectories. Returns metrics."""
    if not batch:
        raise ValueError("empty batch")
    total_T = sum(tr.length for tr in batch)
    pg_loss = Tensor(0.0)
    baseline_loss = Tensor(0.0)
    entropy_loss = Tensor(0.0)

    for tr in batch:
        Tlen = tr.length
        if Tlen % chunk_len != 0:
            raise ValueError(f"unroll length {Tlen} not divisible by chunk {chunk_len}")
        state = tr.initial_state.copy()
        logits_chunks, value_chunks = [], []
        for c0 in range(0, Tlen, chunk_len):
            out = model.step(tr.observations[c0:c0 + chunk_len], state,
                             tr.segments[c0:c0 + chunk_len],
                             rng=rng, training=training_dropout)
            state = out.state
            logits_chunks.append(out.logits)
            value_chunks.append(out.values)
        logits = T.concat(logits_chunks, axis=0) if len(logits_chunks) > 1 else logits_chunks[0]
        values = T.concat(value_chunks, axis=0) if len(value_chunks) > 1 else value_chunks[0]
        with T.no_grad():
            boot = model.step(tr.observations[Tlen:Tlen + 1], state,
                              tr.segments[Tlen:Tlen + 1])
        bootstrap_value = float(boot.values.data[0])

        clipped = np.clip(tr.rewards, -weights.reward_clip, weights.reward_clip)
        vt = vtrace(tr.behavior_logits, logits.data, tr.actions, clipped,
                    tr.dones.astype(np.float64), values.data, bootstrap_value,
                    weights.discount, weights.rho_bar, weights.c_bar)

        logp = T.log_softmax_lastdim(logits)
        chosen = T.reshape(T.gather_lastdim(logp, tr.actions[:, None]), (Tlen,))
        pg_loss = pg_loss - (chosen * Tensor(vt.pg_advantages)).sum()
        err = values - Tensor(vt.vs)
        baseline_loss = baseline_loss + (err * err).sum()
        entropy_loss = entropy_loss + (T.exp(logp) * logp).sum()

    pg_loss = pg_loss * (1.0 / total_T)
    baseline_loss = baseline_loss * (1.0 / total_T)
    entropy_loss = entropy_loss * (1.0 / total_T)
    span_params = model.span_params()
    if span_params and weights.span_penalty > 0.0:
        span_loss = span_penalty(span_params, weights.span_penalty, model.block_cfg.max_span)
    else:
        span_loss = Tensor(0.0)
    total = (pg_loss + weights.baseline_cost * baseline_loss
             + weights.entropy_cost * entropy_loss + span_loss)

    parts = {"total_loss": total.item(), "pg_loss": pg_loss.item(),
             "baseline_loss": baseline_loss.item(), "entropy_loss": entropy_loss.item(),
             "span_loss": span_loss.item()}
    if not all(np.isfinite(v) for v in parts.values()):
        raise NonFiniteLossError("non-finite training loss", {
            **parts,
            "lr": lr,
            "per_actor": sorted({tr.actor_id for tr in batch}),
        })

    total.backward()
    grad_norm = global_norm_clip(optimizer.params, weights.grad_clip)
    if not np.isfinite(grad_norm):
        raise NonFiniteLossError("non-finite gradient norm", {**parts, "grad_norm": grad_norm})
    optimizer.step(lr)
    model.clamp_spans()
    optimizer.zero_grad()

    parts.update({
        "grad_norm": grad_norm,
        "lr": lr,
        "frames": total_T,
        "raw_span_sum": float(sum(z.data.sum() for z in span_params)) if span_params else 0.0,
    })
    return parts


def flop_ratio_now(model, chunk_len: int) -> dict | None:
    """Current-cost report for the adaptive model, None for others."""
    spans = model.span_values()
    if spans is None:
        return None
    cfg = model.block_cfg
    report = attention_flops(spans, model.n_layers, cfg.n_heads, cfg.d_head,
                             model.mem_len, chunk_len, cfg.ramp)
    return report.to_dict()
